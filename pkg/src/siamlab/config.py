"""Experiment configuration, validation and the ablation presets.

A config document is YAML (JSON is valid YAML) whose top-level keys mirror
:class:`ExperimentConfig`. An optional ``preset`` key names a preset that is
applied first; the remaining keys override it. Unknown keys are errors.
"""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from typing import Any

import yaml

from .data import AugmentationConfig
from .diagnostics import VerdictConfig
from .training import LossConfig, OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | cifar10 | file
    num_classes: int = 10
    dim: int = 32
    samples_per_class: int = 200
    test_per_class: int = 50
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0
    root: str | None = None  # cifar10; falls back to $SIAMLAB_DATA
    train_limit: int | None = None
    test_limit: int | None = None
    path: str | None = None  # file
    test_path: str | None = None


@dataclass
class ModelConfig:
    backbone: str = "mlp"
    backbone_widths: list[int] = field(default_factory=lambda: [128])
    projection_hidden: int = 128
    projection_layers: int = 3
    output_dim: int = 64
    bn_hidden: bool = True
    bn_output: bool = True
    bn_output_affine: bool = True
    predictor_hidden: int | None = None  # None: output_dim // 4
    predictor_bn_hidden: bool = True
    predictor_bn_output: bool = False
    init: str = "uniform"  # uniform | std0.01


@dataclass
class DiagnosticsConfig:
    log_every: int = 1
    knn_every: int = 100
    knn_k: int = 20
    knn_temperature: float = 0.07
    knn_features: str = "backbone"  # backbone | projection
    linear_probe: bool = True
    verdict: VerdictConfig = field(default_factory=VerdictConfig)


@dataclass
class HypothesisConfig:
    inner_steps: int = 1  # 0: one epoch per round
    eta_mode: str = "direct"  # direct | moving_average
    eta_momentum: float = 0.8
    normalize_eta: bool = True
    eta_init: str = "first"  # first | zero
    loss: str = "cosine"  # cosine | mse


@dataclass
class ExperimentConfig:
    name: str = "baseline"
    trainer: str = "simsiam"  # simsiam | alternating
    seed: int = 0
    precision: str = "float64"
    out: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    hypothesis: HypothesisConfig = field(default_factory=HypothesisConfig)

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def validate(self) -> "ExperimentConfig":
        if self.trainer not in ("simsiam", "alternating"):
            raise ConfigError(f"trainer: must be simsiam or alternating, got {self.trainer!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision: must be float32 or float64, got {self.precision!r}")
        if self.model.backbone not in ("mlp", "conv"):
            raise ConfigError(f"model.backbone: must be mlp or conv, got {self.model.backbone!r}")
        if self.model.projection_layers < 2:
            raise ConfigError("model.projection_layers: need at least 2")
        if self.dataset.kind not in ("synthetic", "cifar10", "file"):
            raise ConfigError(f"dataset.kind: unknown {self.dataset.kind!r}")
        if self.dataset.kind == "file" and not self.dataset.path:
            raise ConfigError("dataset.path: required for kind 'file'")
        if self.diagnostics.log_every < 1:
            raise ConfigError("diagnostics.log_every: must be >= 1")
        if self.diagnostics.knn_features not in ("backbone", "projection"):
            raise ConfigError("diagnostics.knn_features: must be backbone or projection")
        h = self.hypothesis
        if h.inner_steps < 0:
            raise ConfigError("hypothesis.inner_steps: must be >= 1 (or 0 for one epoch)")
        if h.eta_mode not in ("direct", "moving_average"):
            raise ConfigError(f"hypothesis.eta_mode: unknown {h.eta_mode!r}")
        if not 0 <= h.eta_momentum <= 1:
            raise ConfigError("hypothesis.eta_momentum: must be in [0, 1]")
        if h.eta_init not in ("first", "zero") or h.loss not in ("cosine", "mse"):
            raise ConfigError("hypothesis.eta_init must be first|zero and hypothesis.loss cosine|mse")
        return self


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'document'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown key '{where}'")
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where)
        else:
            kwargs[key] = _coerce(value, hint, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'document'}: {err}") from None


def _coerce(value, hint, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return list(value) if origin is list else tuple(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is float:
        if isinstance(value, str):  # YAML reads 1e-4 (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------- presets

# desk-scale toy run: 10 Gaussian clusters, d = 64, batch 128, 3000 steps;
# lr and view noise calibrated so both stop-gradient regimes separate cleanly
_TOY = {
    "dataset": {"kind": "synthetic"},
    "optim": {"batch_size": 128, "epochs": 200, "base_lr": 0.3},
    "augment": {"noise_std": 0.2, "dropout_prob": 0.1},
    "diagnostics": {"log_every": 1, "knn_every": 500},
}

_CIFAR = {
    "dataset": {"kind": "cifar10", "train_limit": 5000, "test_limit": 1000},
    "model": {
        "backbone": "conv",
        "backbone_widths": [32, 64, 128],
        "projection_hidden": 256,
        "projection_layers": 2,
        "output_dim": 256,
    },
    "optim": {"base_lr": 0.03, "weight_decay": 5e-4, "batch_size": 512, "epochs": 30},
    "diagnostics": {"log_every": 1, "knn_every": 30, "knn_k": 200, "knn_temperature": 0.1},
    "precision": "float32",
}


def _toy(**over) -> dict:
    return _merge(_TOY, over)


PRESETS: dict[str, dict] = {
    "baseline": {},
    "toy": _toy(),
    "fig2-stopgrad-on": _toy(loss={"stop_grad": True}),
    "fig2-stopgrad-off": _toy(loss={"stop_grad": False}),
    "table2a": _toy(loss={"predictor_mode": "identity"}),
    "table2b": _toy(loss={"predictor_mode": "frozen_random"}),
    "table2c": _toy(optim={"predictor_lr_policy": "constant"}),
    "table4a": _toy(
        model={"bn_hidden": False, "bn_output": False, "predictor_bn_hidden": False}, optim={"warmup_epochs": 10}
    ),
    "table4b": _toy(model={"bn_output": False}),
    "table4c": _toy(),
    "table4c-noaffine": _toy(model={"bn_output_affine": False}),
    "table4d": _toy(model={"predictor_bn_output": True}),
    "sim-cosine": _toy(loss={"similarity": "cosine"}),
    "sim-cross-entropy": _toy(loss={"similarity": "cross_entropy"}),
    "sym": _toy(loss={"symmetry": "symmetric"}),
    "asym": _toy(loss={"symmetry": "asymmetric"}),
    "asym2x": _toy(loss={"symmetry": "asymmetric_2x"}),
    "init-std0.01": _toy(model={"init": "std0.01"}),
    "pred-no-bottleneck": _toy(model={"predictor_hidden": 64}),
    "cifar10": _CIFAR,
    "hyp-1step": _toy(trainer="alternating", loss={"predictor_mode": "learned"}, hypothesis={"inner_steps": 1}),
    "hyp-multistep-k10": _toy(trainer="alternating", hypothesis={"inner_steps": 10}),
    "hyp-multistep-k100": _toy(trainer="alternating", hypothesis={"inner_steps": 100}),
    "hyp-multistep-1epoch": _toy(trainer="alternating", hypothesis={"inner_steps": 0}),
    # predictor-free pair differs only in eta_mode; direct assignment needs the
    # higher lr to finish collapsing inside 3000 steps
    "hyp-ma-nopred": _toy(
        trainer="alternating",
        loss={"predictor_mode": "identity"},
        optim={"base_lr": 0.6},
        hypothesis={"eta_mode": "moving_average", "eta_momentum": 0.8},
    ),
    "hyp-direct-nopred": _toy(
        trainer="alternating",
        loss={"predictor_mode": "identity"},
        optim={"base_lr": 0.6},
        hypothesis={"eta_mode": "direct"},
    ),
}
for _bs in (64, 128, 256, 512, 1024):
    PRESETS[f"table3-bs{_bs}"] = _toy(optim={"batch_size": _bs})
for _d in (16, 32, 64, 128):
    PRESETS[f"dim-{_d}"] = _toy(model={"output_dim": _d})

SWEEPS: dict[str, list[str]] = {
    "fig2": ["fig2-stopgrad-on", "fig2-stopgrad-off"],
    "table2": ["table2a", "table2b", "table2c"],
    "table3": [f"table3-bs{b}" for b in (64, 128, 256, 512, 1024)],
    "table4": ["table4a", "table4b", "table4c", "table4d"],
    "similarity": ["sim-cosine", "sim-cross-entropy"],
    "symmetry": ["sym", "asym", "asym2x"],
    "dim": [f"dim-{d}" for d in (16, 32, 64, 128)],
    "hyp-multistep": ["hyp-1step", "hyp-multistep-k10", "hyp-multistep-k100", "hyp-multistep-1epoch"],
    "hyp-ma": ["hyp-ma-nopred", "hyp-direct-nopred"],
}


def preset_config(name: str, overrides: dict | None = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'")
    doc = _merge(PRESETS[name], {"name": name})
    return config_from_dict(_merge(doc, overrides or {}))


def config_from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    doc = dict(doc or {})
    preset = doc.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}'")
        doc = _merge(_merge(PRESETS[preset], {"name": preset}), doc)
    return _build(ExperimentConfig, doc, "").validate()


def parse_config(text: str) -> ExperimentConfig:
    """Parse a YAML/JSON config document into a validated config."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config: {err}") from None
    return config_from_dict(doc or {})
