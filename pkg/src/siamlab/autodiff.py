"""Define-by-run reverse-mode differentiation over numpy arrays.

Every op result carries a :class:`TapeNode` recording its parents and a
backward rule. Node ids come from one global counter, so parents always
have smaller ids than their children and sorting by id gives a valid
topological order of the tape.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "GradStore",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "tensor",
    "parameter",
    "stop_gradient",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "affine",
    "relu",
    "batchnorm",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "sum",
    "mean",
    "concat",
    "reshape",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "grad_check",
    "NORMALIZE_EPS",
    "BN_EPS",
    "BN_MOMENTUM",
]

NORMALIZE_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_node_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass
class TapeNode:
    id: int
    op: str
    parents: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    grad_blocked: bool = False
    saved: dict = field(default_factory=dict)


class Tensor:
    """Dense array plus the tape node that produced it (None for leaves)."""

    __hash__ = object.__hash__

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node: TapeNode | None = None
        self.id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{op}'")


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn, **saved) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(out.id, op, tuple(parents), backward_fn, False, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# stop-gradient replay lets finite differences honour blocked paths: values
# recorded at the base point are reused verbatim when inputs are perturbed
_sg_state: dict = {"mode": None, "values": [], "cursor": 0}


@contextlib.contextmanager
def _stop_gradient_trace(mode: str, values: list | None = None) -> Iterator[list]:
    prev = dict(_sg_state)
    _sg_state.update(mode=mode, values=values if values is not None else [], cursor=0)
    try:
        yield _sg_state["values"]
    finally:
        _sg_state.clear()
        _sg_state.update(prev)


def stop_gradient(t: Tensor) -> Tensor:
    """Identity forward; backward contributes nothing to ``t``'s ancestors."""
    data = t.data
    if _sg_state["mode"] == "record":
        _sg_state["values"].append(data.copy())
    elif _sg_state["mode"] == "replay":
        data = _sg_state["values"][_sg_state["cursor"]]
        _sg_state["cursor"] += 1
    out = Tensor(data)
    out.node = TapeNode(out.id, "stop_gradient", (t,), None, grad_blocked=True)
    return out


class GradStore(dict):
    """Maps each requires_grad leaf reached by the loss to its gradient."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return dict.__getitem__(self, t)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        if t.node is None or t.node.grad_blocked:
            continue
        for p in t.node.parents:
            if p.id >= t.id:
                raise TapeError(f"tape order violated: parent {p.id} of node {t.id}")
            if p.requires_grad and p.id not in seen:
                stack.append(p)
    return sorted(seen.values(), key=lambda x: x.id, reverse=True)


def backward(loss: Tensor) -> GradStore:
    """Back-propagate from a scalar ``loss`` and return leaf gradients."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    store = GradStore()
    if not loss.requires_grad:
        return store
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in _reachable(loss):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                store[t] = g
            continue
        if t.node.grad_blocked:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return store


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _record("log", out, (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return _record("affine", out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))
    out = out + bias.data
    return _record("affine", out, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------- normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over every axis except the channel axis 1.

    Train mode normalizes with batch statistics and differentiates through
    them; running statistics (unbiased variance) are updated in place unless
    ``update_stats`` is false. Eval mode uses the running statistics.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects (N, C) or (N, C, H, W), got {x.shape}")
    C = x.shape[1]
    if running_mean.shape != (C,) or running_var.shape != (C,):
        raise ShapeError(f"batchnorm: running stats do not match {C} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    m = x.data.size // C
    xd = x.data

    if training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    g_d = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * g_d if g_d is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    out = out.astype(xd.dtype, copy=False)

    parents: tuple[Tensor, ...] = (x,)
    if gamma is not None:
        parents += (gamma,)
    if beta is not None:
        parents += (beta,)

    def bw(g):
        dxhat = g * g_d if g_d is not None else g
        if training:
            s1 = dxhat.mean(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = (dxhat - s1 - xhat * s2) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes))
        if beta is not None:
            grads.append(g.sum(axis=axes))
        return grads

    return _record("batchnorm", out, parents, bw, training=training)


def l2_normalize(a: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """Divide each row (last axis) by ``max(norm, eps)``."""
    xd = a.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom
    active = norm > eps

    def bw(g):
        proj = np.sum(y * g, axis=-1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / denom),)

    return _record("l2_normalize", y, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    xd = a.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    sm = np.exp(out)
    return _record("log_softmax", out, (a,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def softmax(a: Tensor) -> Tensor:
    xd = a.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------- convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution, weight shaped (out_ch, in_ch, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    N, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    xp = _pad(x.data, padding)
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    # (N, C, Ho, Wo, kh, kw)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    wd = weight.data
    out = np.einsum("nchwij,ocij->nohw", cols, wd, optimize=True)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + Ho, j : j + Wo] += np.einsum("nohw,oc->nchw", g, wd[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record("conv2d", out, parents, bw)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    N, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {size}")
    out = x.data.reshape(N, C, H // size, size, W // size, size).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (g / (size * size),)

    return _record("avg_pool2d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    return _record(
        "global_avg_pool",
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),),
    )


# ---------------------------------------------------------------- verification


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-6,
    floor: float = 1e-4,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps fresh leaf tensors (one per input array) to a scalar. Inputs
    are promoted to float64. Stop-gradient outputs are frozen at their base
    values while perturbing, so blocked paths are checked against zero.
    The relative error denominator is ``max(|analytic|, |numeric|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    with _stop_gradient_trace("record") as frozen:
        out = fn(*leaves)
    frozen = list(frozen)
    grads = backward(out)
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in leaves]

    def evaluate(arrays):
        with _stop_gradient_trace("replay", frozen):
            return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    for k, a in enumerate(base):
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate(base)
            flat[i] = orig - step
            fm = evaluate(base)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            ana = analytic[k].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
