"""Losses, SGD, learning-rate schedule and the Siamese training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ArrayDataset, RngStream, augment_batch, load_cifar10, make_synthetic
from .diagnostics import MetricsRecord, knn_monitor, normalized_output_std
from .nn import EncoderSpec, SimSiamModel, forward_simsiam, init_params

if TYPE_CHECKING:
    from .config import ExperimentConfig

logger = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "cross_entropy")
SYMMETRIES = ("symmetric", "asymmetric", "asymmetric_2x")
PREDICTOR_MODES = ("learned", "identity", "frozen_random")


@dataclass
class LossConfig:
    similarity: str = "cosine"
    symmetry: str = "symmetric"
    stop_grad: bool = True
    predictor_mode: str = "learned"

    def __post_init__(self):
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"similarity must be one of {SIMILARITIES}, got {self.similarity!r}")
        if self.symmetry not in SYMMETRIES:
            raise ValueError(f"symmetry must be one of {SYMMETRIES}, got {self.symmetry!r}")
        if self.predictor_mode not in PREDICTOR_MODES:
            raise ValueError(f"predictor_mode must be one of {PREDICTOR_MODES}, got {self.predictor_mode!r}")

    @property
    def num_views(self) -> int:
        return 4 if self.symmetry == "asymmetric_2x" else 2


@dataclass
class OptimizerConfig:
    base_lr: float = 0.05
    batch_size: int = 512
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    warmup_epochs: int | None = None  # None: 10 when batch_size >= 1024, else 0
    predictor_lr_policy: str = "cosine"  # cosine | constant

    def __post_init__(self):
        if self.predictor_lr_policy not in ("cosine", "constant"):
            raise ValueError(f"predictor_lr_policy must be cosine or constant, got {self.predictor_lr_policy!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.base_lr <= 0 or self.epochs < 1:
            raise ValueError("base_lr must be positive and epochs >= 1")

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    @property
    def resolved_warmup_epochs(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return 10 if self.batch_size >= 1024 else 0


@dataclass
class OptimizerState:
    buffers: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------- losses


def negative_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Batch mean of ``-<p/|p|, z/|z|>``."""
    if p.shape != z.shape:
        raise ad.ShapeError(f"negative_cosine: {p.shape} vs {z.shape}")
    return ad.neg(ad.mean(ad.sum(ad.mul(ad.l2_normalize(p), ad.l2_normalize(z)), axis=1)))


def cross_entropy_similarity(p: Tensor, z: Tensor) -> Tensor:
    """Batch mean of ``-softmax(z) . log_softmax(p)`` over the channel axis."""
    if p.shape != z.shape:
        raise ad.ShapeError(f"cross_entropy_similarity: {p.shape} vs {z.shape}")
    return ad.neg(ad.mean(ad.sum(ad.mul(ad.softmax(z), ad.log_softmax(p)), axis=1)))


def _similarity(kind: str):
    return negative_cosine if kind == "cosine" else cross_entropy_similarity


def simsiam_loss(z1: Tensor, z2: Tensor, p1: Tensor, p2: Tensor, cfg: LossConfig) -> Tensor:
    """Symmetric: D(p1, sg(z2))/2 + D(p2, sg(z1))/2; asymmetric: D(p1, sg(z2)).

    ``asymmetric_2x`` is handled by the caller averaging two asymmetric
    terms over independent view pairs; for a single pair it equals the
    asymmetric loss.
    """
    D = _similarity(cfg.similarity)
    target = ad.stop_gradient if cfg.stop_grad else (lambda t: t)
    if cfg.symmetry == "symmetric":
        return ad.add(ad.scale(D(p1, target(z2)), 0.5), ad.scale(D(p2, target(z1)), 0.5))
    return D(p1, target(z2))


# ---------------------------------------------------------------- optimization


def lr_at(step: int, cfg: OptimizerConfig, total_steps: int, steps_per_epoch: int = 1) -> float:
    """Linear warmup to the scaled lr, then half-cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = cfg.effective_lr
    warmup = cfg.resolved_warmup_epochs * steps_per_epoch
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def predictor_lr_at(step: int, cfg: OptimizerConfig, total_steps: int, steps_per_epoch: int = 1) -> float:
    if cfg.predictor_lr_policy == "cosine":
        return lr_at(step, cfg, total_steps, steps_per_epoch)
    warmup = cfg.resolved_warmup_epochs * steps_per_epoch
    if step < warmup:
        return cfg.effective_lr * step / warmup
    return cfg.effective_lr


def sgd_step(
    params: Sequence[Tensor],
    grads: Mapping[Tensor, np.ndarray],
    state: OptimizerState,
    lr: float | Sequence[float],
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """SGD with momentum; weight decay applies to every parameter passed in.

    ``g = grad + wd * param; buf = momentum * buf + g; param -= lr * buf``.
    Parameters without a gradient are skipped entirely.
    """
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    for p, rate in zip(params, lrs):
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = g + weight_decay * p.data if weight_decay else g
        buf = state.buffers.get(p.id)
        if buf is None:
            buf = g.copy()
        else:
            buf *= momentum
            buf += g
        state.buffers[p.id] = buf
        p.data -= rate * buf
    state.step += 1


def train_step(
    model: SimSiamModel,
    views: Sequence[Tensor],
    cfg: LossConfig,
    state: OptimizerState,
    lr: float,
    predictor_lr: float | None = None,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> MetricsRecord:
    """One forward/backward/update on a batch given as 2 (or 4) views.

    Raises :class:`~siamlab.autodiff.NonFiniteError` if the forward pass or
    the loss becomes non-finite; parameters are untouched in that case.
    """
    if len(views) != cfg.num_views:
        raise ValueError(f"{cfg.symmetry} needs {cfg.num_views} views, got {len(views)}")
    z1, z2, p1, p2 = forward_simsiam(model, views[0], views[1], "train")
    loss = simsiam_loss(z1, z2, p1, p2, cfg)
    if cfg.symmetry == "asymmetric_2x":
        z3, z4, p3, p4 = forward_simsiam(model, views[2], views[3], "train")
        loss = ad.scale(ad.add(loss, simsiam_loss(z3, z4, p3, p4, cfg)), 0.5)
    grads = ad.backward(loss)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise ad.NonFiniteError("non-finite gradient")
    enc = model.encoder_parameters()
    pred = [p for p in model.predictor_parameters() if p.requires_grad]
    plr = lr if predictor_lr is None else predictor_lr
    sgd_step(enc + pred, grads, state, [lr] * len(enc) + [plr] * len(pred), momentum, weight_decay)
    return MetricsRecord(step=state.step - 1, loss=float(loss.data), output_std=normalized_output_std(z1), lr=lr)


# ---------------------------------------------------------------- experiments


def load_datasets(cfg: "ExperimentConfig") -> tuple[ArrayDataset, ArrayDataset]:
    import os

    ds = cfg.dataset
    if ds.kind == "synthetic":
        args = (ds.num_classes, ds.dim, ds.samples_per_class, ds.separation, ds.seed, ds.noise)
        train = make_synthetic(*args, split=0)
        test = make_synthetic(ds.num_classes, ds.dim, ds.test_per_class, ds.separation, ds.seed, ds.noise, split=1)
    elif ds.kind == "cifar10":
        root = ds.root or os.environ.get("SIAMLAB_DATA")
        if not root:
            raise FileNotFoundError("CIFAR-10 needs dataset.root or the SIAMLAB_DATA environment variable")
        train = load_cifar10(root, train=True, limit=ds.train_limit)
        test = load_cifar10(root, train=False, limit=ds.test_limit)
    elif ds.kind == "file":
        train = ArrayDataset.load(ds.path)
        test = ArrayDataset.load(ds.test_path) if ds.test_path else train
    else:
        raise ValueError(f"unknown dataset kind {ds.kind!r}")
    return train, test


def build_model(cfg: "ExperimentConfig", input_dim: int, input_shape: Sequence[int]) -> SimSiamModel:
    m = cfg.model
    spec = EncoderSpec(
        backbone=m.backbone,
        input_dim=input_dim,
        input_shape=list(input_shape),
        backbone_widths=list(m.backbone_widths),
        projection_hidden=m.projection_hidden,
        projection_layers=m.projection_layers,
        bn_hidden=m.bn_hidden,
        bn_output=m.bn_output,
        bn_output_affine=m.bn_output_affine,
        output_dim=m.output_dim,
    )
    model = SimSiamModel(
        spec,
        predictor_hidden=m.predictor_hidden,
        predictor_bn_output=m.predictor_bn_output,
        predictor_mode=cfg.loss.predictor_mode,
        predictor_bn_hidden=m.predictor_bn_hidden,
        dtype=np.dtype(cfg.precision),
    )
    init_params(model, cfg.seed, m.init)
    return model


class Experiment:
    """Shared machinery for a training run: data, model, schedule, monitors."""

    def __init__(self, cfg: "ExperimentConfig"):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.precision)
        self.train_ds, self.test_ds = load_datasets(cfg)
        shape = self.train_ds.x.shape[1:]
        self.model = build_model(cfg, int(np.prod(shape)), shape if len(shape) == 3 else [0, 0, 0])
        self.state = OptimizerState()
        self.rng = RngStream(cfg.seed)
        bs = cfg.optim.batch_size
        if bs > len(self.train_ds):
            raise ValueError(f"batch_size {bs} exceeds dataset size {len(self.train_ds)}")
        self.steps_per_epoch = len(self.train_ds) // bs
        self.total_steps = self.steps_per_epoch * cfg.optim.epochs

    def schedule(self) -> Iterator[tuple[int, int, np.ndarray]]:
        """Yield ``(step, epoch, sample indices)``; incomplete batches are dropped."""
        bs = self.cfg.optim.batch_size
        step = 0
        for epoch in range(self.cfg.optim.epochs):
            perm = self.rng.permutation(len(self.train_ds), epoch)
            for b in range(self.steps_per_epoch):
                yield step, epoch, perm[b * bs : (b + 1) * bs]
                step += 1

    def view(self, idx: np.ndarray, epoch: int, view: int) -> Tensor:
        x = augment_batch(self.train_ds, idx, self.cfg.augment, self.cfg.seed, epoch, view)
        return Tensor(x.astype(self.dtype, copy=False))

    def lrs(self, step: int) -> tuple[float, float]:
        o = self.cfg.optim
        return (
            lr_at(step, o, self.total_steps, self.steps_per_epoch),
            predictor_lr_at(step, o, self.total_steps, self.steps_per_epoch),
        )

    def features(self, x: np.ndarray) -> np.ndarray:
        which = self.cfg.diagnostics.knn_features
        out = []
        for s in range(0, len(x), 1000):
            t = Tensor(x[s : s + 1000].astype(self.dtype, copy=False))
            f = self.model.features(t, training=False) if which == "backbone" else self.model.encode(t, training=False)
            out.append(f.data)
        return np.concatenate(out)

    def knn_accuracy(self) -> float:
        d = self.cfg.diagnostics
        train_f = self.features(self.train_ds.x)
        test_f = self.features(self.test_ds.x)
        k = min(d.knn_k, len(train_f))
        return knn_monitor(train_f, self.train_ds.labels, test_f, self.test_ds.labels, k, d.knn_temperature, self.train_ds.num_classes)

    def should_log(self, step: int) -> bool:
        return step % self.cfg.diagnostics.log_every == 0 or step == self.total_steps - 1

    def knn_due(self, step: int) -> bool:
        every = self.cfg.diagnostics.knn_every
        return self.test_ds.labels is not None and (step == self.total_steps - 1 or (every > 0 and step % every == 0))


def run_simsiam(cfg: "ExperimentConfig", experiment: Experiment | None = None) -> Iterator[MetricsRecord]:
    exp = experiment or Experiment(cfg)
    o = cfg.optim
    t0 = time.perf_counter()
    for step, epoch, idx in exp.schedule():
        views = [exp.view(idx, epoch, v) for v in range(cfg.loss.num_views)]
        lr, plr = exp.lrs(step)
        try:
            rec = train_step(exp.model, views, cfg.loss, exp.state, lr, plr, o.momentum, o.weight_decay)
            if exp.should_log(step):
                rec.step, rec.epoch = step, epoch
                rec.knn_acc = exp.knn_accuracy() if exp.knn_due(step) else None
        except ad.NonFiniteError as err:
            logger.warning("aborting at step %d: %s", step, err)
            yield MetricsRecord(step, None, None, lr, epoch, None, (time.perf_counter() - t0) * 1e3, aborted=str(err))
            return
        if exp.should_log(step):
            rec.wallclock_ms = (time.perf_counter() - t0) * 1e3
            yield rec


def run_experiment(preset: "str | ExperimentConfig", experiment: Experiment | None = None) -> Iterator[MetricsRecord]:
    """Stream metrics for a preset name or a full config."""
    from .config import ExperimentConfig, preset_config

    cfg = preset if isinstance(preset, ExperimentConfig) else preset_config(preset)
    if cfg.trainer == "alternating":
        from .hypothesis import alternating_train

        return alternating_train(cfg, experiment)
    return run_simsiam(cfg, experiment)
