"""Layers, MLP builders and the Siamese encoder/predictor model."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


class Module:
    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def __call__(self, x: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        return self.forward(x, training, update_stats)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, dtype=np.float64):
        if in_features < 1 or out_features < 1:
            raise ValueError(f"invalid fc dims {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = ad.parameter(np.zeros((in_features, out_features), dtype=dtype), name="weight")
        self.bias = ad.parameter(np.zeros(out_features, dtype=dtype), name="bias")

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, training=True, update_stats=True):
        return ad.affine(x, self.weight, self.bias)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class BatchNorm(Module):
    def __init__(self, num_features: int, affine: bool = True, dtype=np.float64):
        self.num_features = num_features
        self.affine = affine
        self.gamma = ad.parameter(np.ones(num_features, dtype=dtype), name="gamma") if affine else None
        self.beta = ad.parameter(np.zeros(num_features, dtype=dtype), name="beta") if affine else None
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)] if self.affine else []

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, training=True, update_stats=True):
        return ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training=training, update_stats=update_stats
        )

    def __repr__(self):
        return f"BatchNorm({self.num_features}, affine={self.affine})"


class ReLU(Module):
    def forward(self, x, training=True, update_stats=True):
        return ad.relu(x)

    def __repr__(self):
        return "ReLU()"


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, padding: int = 1, dtype=np.float64):
        self.in_features = in_ch * kernel * kernel  # fan-in, used by the initializer
        self.padding = padding
        self.weight = ad.parameter(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype), name="weight")
        self.bias = ad.parameter(np.zeros(out_ch, dtype=dtype), name="bias")

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, training=True, update_stats=True):
        return ad.conv2d(x, self.weight, self.bias, padding=self.padding)


class AvgPool2d(Module):
    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x, training=True, update_stats=True):
        return ad.avg_pool2d(x, self.size)


class GlobalAvgPool(Module):
    def forward(self, x, training=True, update_stats=True):
        return ad.global_avg_pool(x)


class Sequential(Module):
    def __init__(self, layers: list[Module]):
        self.layers = list(layers)

    def parameters(self):
        return [(f"{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.parameters()]

    def buffers(self):
        return [(f"{i}.{n}", b) for i, layer in enumerate(self.layers) for n, b in layer.buffers()]

    def forward(self, x, training=True, update_stats=True):
        for layer in self.layers:
            x = layer(x, training, update_stats)
        return x

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"


# ---------------------------------------------------------------- specs


@dataclass
class MlpSpec:
    """Fully-connected head: fc layers between consecutive ``layer_dims``.

    Hidden fc layers are followed by (optional) BN and ReLU; the output fc
    gets optional BN, never a ReLU.
    """

    layer_dims: list[int]
    bn_hidden: bool = True
    bn_output: bool = True
    bn_output_affine: bool = True
    relu_output: bool = False

    def validate(self, min_layers: int = 1) -> None:
        if self.relu_output:
            raise ValueError("output fc must not have a ReLU")
        if len(self.layer_dims) < min_layers + 1:
            raise ValueError(f"need at least {min_layers} fc layers, got dims {self.layer_dims}")
        if any(int(d) < 1 for d in self.layer_dims):
            raise ValueError(f"invalid layer dims {self.layer_dims}")

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class EncoderSpec:
    backbone: str = "mlp"  # "mlp" | "conv"
    input_dim: int = 32
    input_shape: list[int] = field(default_factory=lambda: [3, 32, 32])
    backbone_widths: list[int] = field(default_factory=lambda: [128])
    projection_hidden: int = 128
    projection_layers: int = 3
    bn_hidden: bool = True
    bn_output: bool = True
    bn_output_affine: bool = True
    output_dim: int = 64

    @property
    def feature_dim(self) -> int:
        return self.backbone_widths[-1]

    def projection_spec(self) -> MlpSpec:
        dims = [self.feature_dim] + [self.projection_hidden] * (self.projection_layers - 1) + [self.output_dim]
        return MlpSpec(dims, self.bn_hidden, self.bn_output, self.bn_output_affine)


def build_mlp(spec: MlpSpec, dtype=np.float64) -> Sequential:
    layers: list[Module] = []
    dims = spec.layer_dims
    n = len(dims) - 1
    for i in range(n):
        layers.append(Linear(dims[i], dims[i + 1], dtype=dtype))
        last = i == n - 1
        if not last:
            if spec.bn_hidden:
                layers.append(BatchNorm(dims[i + 1], dtype=dtype))
            layers.append(ReLU())
        elif spec.bn_output:
            layers.append(BatchNorm(dims[i + 1], affine=spec.bn_output_affine, dtype=dtype))
    return Sequential(layers)


def build_projection_mlp(spec: MlpSpec, dtype=np.float64) -> Sequential:
    spec.validate(min_layers=2)
    return build_mlp(spec, dtype)


def build_prediction_mlp(
    d: int, hidden: int | None = None, bn_output: bool = False, bn_hidden: bool = True, dtype=np.float64
) -> Sequential:
    hidden = d // 4 if hidden is None else hidden
    if d < 1 or hidden < 1:
        raise ValueError(f"invalid predictor dims d={d} hidden={hidden}")
    return build_mlp(MlpSpec([d, hidden, d], bn_hidden=bn_hidden, bn_output=bn_output), dtype)


def mlp_spec_of(layers: Sequential) -> MlpSpec:
    """Recover the spec that built ``layers``."""
    dims: list[int] = []
    fcs = [i for i, l in enumerate(layers.layers) if isinstance(l, Linear)]
    for i in fcs:
        if not dims:
            dims.append(layers[i].in_features)
        dims.append(layers[i].out_features)

    def followed_by_bn(i):
        return i + 1 < len(layers) and isinstance(layers[i + 1], BatchNorm)

    bn_hidden = bool(fcs[:-1]) and all(followed_by_bn(i) for i in fcs[:-1])
    last = fcs[-1]
    bn_output = followed_by_bn(last)
    affine = layers[last + 1].affine if bn_output else True
    relu_output = isinstance(layers[-1], ReLU)
    return MlpSpec(dims, bn_hidden, bn_output, affine, relu_output)


def build_backbone(spec: EncoderSpec, dtype=np.float64) -> Sequential:
    layers: list[Module] = []
    if spec.backbone == "mlp":
        prev = spec.input_dim
        for w in spec.backbone_widths:
            layers += [Linear(prev, w, dtype=dtype), BatchNorm(w, dtype=dtype), ReLU()]
            prev = w
    elif spec.backbone == "conv":
        prev = spec.input_shape[0]
        for w in spec.backbone_widths:
            layers += [Conv2d(prev, w, dtype=dtype), BatchNorm(w, dtype=dtype), ReLU(), AvgPool2d(2)]
            prev = w
        layers.append(GlobalAvgPool())
    else:
        raise ValueError(f"unknown backbone kind {spec.backbone!r}")
    return Sequential(layers)


# ---------------------------------------------------------------- model


class SimSiamModel:
    """Encoder f (backbone + projection MLP) and predictor h.

    ``predictor_mode`` is ``learned``, ``identity`` (no h) or
    ``frozen_random`` (h keeps its initialization and receives no updates).
    """

    def __init__(
        self,
        encoder: EncoderSpec,
        predictor_hidden: int | None = None,
        predictor_bn_output: bool = False,
        predictor_mode: str = "learned",
        predictor_bn_hidden: bool = True,
        dtype=np.float64,
    ):
        if predictor_mode not in ("learned", "identity", "frozen_random"):
            raise ValueError(f"unknown predictor mode {predictor_mode!r}")
        self.encoder_spec = encoder
        self.dtype = np.dtype(dtype)
        self.predictor_mode = predictor_mode
        self.predictor_hidden = encoder.output_dim // 4 if predictor_hidden is None else predictor_hidden
        self.predictor_bn_output = predictor_bn_output
        self.predictor_bn_hidden = predictor_bn_hidden
        self.backbone = build_backbone(encoder, dtype)
        self.projector = build_projection_mlp(encoder.projection_spec(), dtype)
        self.predictor: Sequential | None = None
        if predictor_mode != "identity":
            self.predictor = build_prediction_mlp(
                encoder.output_dim, self.predictor_hidden, predictor_bn_output, predictor_bn_hidden, dtype
            )
            if predictor_mode == "frozen_random":
                for _, p in self.predictor.parameters():
                    p.requires_grad = False

    @property
    def d(self) -> int:
        return self.encoder_spec.output_dim

    def modules(self) -> list[tuple[str, Sequential]]:
        mods = [("backbone", self.backbone), ("projector", self.projector)]
        if self.predictor is not None:
            mods.append(("predictor", self.predictor))
        return mods

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{m}.{n}", p) for m, seq in self.modules() for n, p in seq.parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{m}.{n}", b) for m, seq in self.modules() for n, b in seq.buffers()]

    def trainable(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def encoder_parameters(self) -> list[Tensor]:
        return [p for _, seq in self.modules()[:2] for _, p in seq.parameters()]

    def predictor_parameters(self) -> list[Tensor]:
        return [p for _, p in self.predictor.parameters()] if self.predictor is not None else []

    def features(self, x: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        return self.backbone(x, training, update_stats)

    def encode(self, x: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        return self.projector(self.backbone(x, training, update_stats), training, update_stats)

    def predict(self, z: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        if self.predictor is None:
            return z
        return self.predictor(z, training, update_stats)

    def spec_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder_spec),
            "predictor_hidden": self.predictor_hidden,
            "predictor_bn_output": self.predictor_bn_output,
            "predictor_mode": self.predictor_mode,
            "predictor_bn_hidden": self.predictor_bn_hidden,
            "dtype": self.dtype.name,
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{n}": p.data.copy() for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            p.data[...] = state[f"param/{n}"]
        for n, b in self.named_buffers():
            b[...] = state[f"buffer/{n}"]


def forward_simsiam(model: SimSiamModel, view1: Tensor, view2: Tensor, mode: str = "train"):
    """Run both views through the shared encoder and the predictor.

    Returns ``(z1, z2, p1, p2)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if view1.shape != view2.shape:
        raise ad.ShapeError(f"view shapes differ: {view1.shape} vs {view2.shape}")
    training = mode == "train"
    z1 = model.encode(view1, training)
    z2 = model.encode(view2, training)
    p1 = model.predict(z1, training)
    p2 = model.predict(z2, training)
    return z1, z2, p1, p2


def init_params(model: SimSiamModel, seed: int, scheme: str = "uniform") -> None:
    """Initialize weights deterministically from ``seed``.

    ``uniform``: every fc/conv weight and bias ~ U(-sqrt(k), sqrt(k)) with
    k = 1/fan_in. ``std0.01``: weights ~ N(0, 0.01^2), biases zero.
    BN scale 1, offset 0, running mean 0, running var 1 in both schemes.
    """
    if scheme not in ("uniform", "std0.01"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for _, seq in model.modules():
        for layer in seq.layers:
            if isinstance(layer, (Linear, Conv2d)):
                if scheme == "uniform":
                    bound = np.sqrt(1.0 / layer.in_features)
                    layer.weight.data[...] = rng.uniform(-bound, bound, layer.weight.shape)
                    layer.bias.data[...] = rng.uniform(-bound, bound, layer.bias.shape)
                else:
                    layer.weight.data[...] = rng.normal(0.0, 0.01, layer.weight.shape)
                    layer.bias.data[...] = 0.0
            elif isinstance(layer, BatchNorm):
                if layer.affine:
                    layer.gamma.data[...] = 1.0
                    layer.beta.data[...] = 0.0
                layer.running_mean[...] = 0.0
                layer.running_var[...] = 1.0


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: SimSiamModel, path: str | Path, extra: dict | None = None) -> None:
    """Write an ``.npz`` archive: ``__meta__`` JSON plus one array per tensor.

    ``__meta__`` holds ``{"format": "siamlab-checkpoint", "version": 1,
    "spec": ..., "extra": ...}``; arrays are keyed ``param/<name>`` and
    ``buffer/<name>``.
    """
    meta = {"format": "siamlab-checkpoint", "version": CHECKPOINT_VERSION, "spec": model.spec_dict(), "extra": extra or {}}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **model.state_dict())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SimSiamModel, dict]:
    with np.load(path) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path} is not a siamlab checkpoint")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != "siamlab-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        state = {k: z[k] for k in z.files if k != "__meta__"}
    spec = meta["spec"]
    model = SimSiamModel(
        EncoderSpec(**spec["encoder"]),
        predictor_hidden=spec["predictor_hidden"],
        predictor_bn_output=spec["predictor_bn_output"],
        predictor_mode=spec["predictor_mode"],
        predictor_bn_hidden=spec["predictor_bn_hidden"],
        dtype=np.dtype(spec["dtype"]),
    )
    model.load_state_dict(state)
    return model, meta["extra"]
