"""Alternating optimization over network weights and per-image targets.

The network F is trained to match a bank of per-image target vectors
(``eta``) that are held constant while the weights move, and the bank is
refreshed from the network's own outputs between rounds of SGD. Targets
never enter the tape as differentiable leaves, so gradient blocking is a
structural property here rather than an explicit op.

With one SGD step per round, direct assignment from a single augmented view
and no predictor, one round reproduces the asymmetric stop-gradient Siamese
update exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diagnostics import MetricsRecord, normalized_output_std
from .nn import SimSiamModel
from .training import Experiment, OptimizerState, sgd_step

if TYPE_CHECKING:
    from .config import ExperimentConfig, HypothesisConfig

BANK_FORMAT = "siamlab-eta-bank"


class EtaBank:
    """One target vector per training image.

    ``mode`` is ``direct`` (replace on update) or ``moving_average``
    (``eta <- m * eta + (1 - m) * rep``). With ``init='first'`` an entry's
    first update is a plain assignment; with ``init='zero'`` entries start
    at zero and are blended from the start. ``normalize_eta`` l2-normalizes
    incoming representations before they are stored or blended.
    """

    def __init__(
        self,
        num_images: int,
        dim: int,
        mode: str = "direct",
        momentum: float = 0.8,
        normalize_eta: bool = True,
        init: str = "first",
        path: str | Path | None = None,
        dtype=np.float64,
    ):
        if mode not in ("direct", "moving_average"):
            raise ValueError(f"unknown eta mode {mode!r}")
        if init not in ("first", "zero"):
            raise ValueError(f"unknown eta init {init!r}")
        self.mode, self.momentum, self.normalize_eta, self.init = mode, momentum, normalize_eta, init
        try:
            if path is None:
                self.values = np.zeros((num_images, dim), dtype=dtype)
            else:
                self.values = np.lib.format.open_memmap(path, mode="w+", dtype=dtype, shape=(num_images, dim))
        except MemoryError as err:
            size = num_images * dim * np.dtype(dtype).itemsize
            raise MemoryError(f"eta bank of {num_images}x{dim} ({size / 2**30:.2f} GiB) does not fit") from err
        self.initialized = np.full(num_images, init == "zero")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def _check(self, ids) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(ids))
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise KeyError(f"image id out of range [0, {len(self)})")
        return ids

    def get(self, ids) -> np.ndarray:
        ids = self._check(ids)
        missing = ids[~self.initialized[ids]]
        if missing.size:
            raise KeyError(f"no eta for image ids {missing[:5].tolist()}")
        return self.values[ids].copy()

    def save(self, path: str | Path) -> None:
        """``.npz`` with ``values`` (N, d), ``initialized`` (N,) and ``meta`` JSON bytes."""
        import json

        meta = {"format": BANK_FORMAT, "version": 1, "mode": self.mode, "momentum": self.momentum,
                "normalize_eta": self.normalize_eta, "init": self.init}
        np.savez(path, values=np.asarray(self.values), initialized=self.initialized,
                 meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "EtaBank":
        import json

        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("format") != BANK_FORMAT:
                raise ValueError("not an eta bank snapshot")
            values, initialized = z["values"], z["initialized"]
        bank = cls(len(values), values.shape[1], meta["mode"], meta["momentum"], meta["normalize_eta"], meta["init"],
                   dtype=values.dtype)
        bank.values[...] = values
        bank.initialized[...] = initialized
        return bank


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), ad.NORMALIZE_EPS)


def eta_update(bank: EtaBank, image_ids, representation: np.ndarray) -> None:
    ids = bank._check(image_ids)
    rep = np.asarray(representation, dtype=bank.values.dtype).reshape(len(ids), bank.dim)
    if bank.normalize_eta:
        rep = _normalize_rows(rep)
    if bank.mode == "direct":
        bank.values[ids] = rep
    else:
        m = bank.momentum
        fresh = ~bank.initialized[ids]
        blended = m * bank.values[ids] + (1.0 - m) * rep
        bank.values[ids] = np.where(fresh[:, None], rep, blended)
    bank.initialized[ids] = True


def eta_solve(model: SimSiamModel, draws: Iterable[np.ndarray | Tensor]) -> np.ndarray:
    """Average encoder output over augmented draws of the same images.

    The network runs with batch statistics (train-mode BN) but leaves the
    running statistics alone; no tape is kept for the result.
    """
    mean = None
    n = 0
    for draw in draws:
        x = draw if isinstance(draw, Tensor) else Tensor(draw)
        z = model.encode(x, training=True, update_stats=False).data
        n += 1
        if mean is None:
            mean = z.copy()
        else:
            mean += (z - mean) / n
    if mean is None:
        raise ValueError("eta_solve needs at least one augmentation draw")
    return mean


def substep_loss(model: SimSiamModel, view: Tensor, eta: np.ndarray, loss: str = "cosine") -> tuple[Tensor, Tensor, Tensor]:
    """Loss of F(view) (through the predictor, if any) against fixed targets.

    ``cosine``: batch mean of ``|n(p) - n(eta)|^2 / 2 - 1`` (equal to the
    negative cosine similarity). ``mse``: batch mean of ``|p - eta|^2``.
    Returns ``(loss, z, target)``; ``target`` is a constant leaf.
    """
    z = model.encode(view, training=True)
    p = model.predict(z, training=True)
    target = Tensor(np.asarray(eta, dtype=p.dtype))
    if loss == "cosine":
        diff = ad.sub(ad.l2_normalize(p), ad.l2_normalize(target))
        value = ad.sub(ad.scale(ad.mean(ad.sum(ad.mul(diff, diff), axis=1)), 0.5), 1.0)
    elif loss == "mse":
        diff = ad.sub(p, target)
        value = ad.mean(ad.sum(ad.mul(diff, diff), axis=1))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, z, target


def theta_substep(
    model: SimSiamModel,
    view: Tensor,
    eta: np.ndarray,
    state: OptimizerState,
    lr: float,
    predictor_lr: float | None = None,
    loss: str = "cosine",
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> tuple[float, Tensor]:
    """One SGD step on the weights with the targets held fixed."""
    value, z, _ = substep_loss(model, view, eta, loss)
    grads = ad.backward(value)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise ad.NonFiniteError("non-finite gradient")
    enc = model.encoder_parameters()
    pred = [p for p in model.predictor_parameters() if p.requires_grad]
    plr = lr if predictor_lr is None else predictor_lr
    sgd_step(enc + pred, grads, state, [lr] * len(enc) + [plr] * len(pred), momentum, weight_decay)
    return float(value.data), z


def make_bank(cfg: "HypothesisConfig", num_images: int, dim: int, dtype=np.float64, path=None) -> EtaBank:
    return EtaBank(num_images, dim, cfg.eta_mode, cfg.eta_momentum, cfg.normalize_eta, cfg.eta_init, path, dtype)


def alternating_train(
    cfg: "ExperimentConfig", experiment: Experiment | None = None, bank: EtaBank | None = None
) -> Iterator[MetricsRecord]:
    """Outer loop: refresh targets for the next k batches; inner loop: k SGD steps.

    Targets come from view 1 of each batch (one draw), the SGD steps use
    view 0, mirroring the two views of a Siamese step. ``inner_steps == 0``
    means one epoch per round. Pass ``bank`` to keep a handle on the targets.
    """
    exp = experiment or Experiment(cfg)
    h, o = cfg.hypothesis, cfg.optim
    model = exp.model
    k = h.inner_steps or exp.steps_per_epoch
    if bank is None:
        bank = make_bank(h, len(exp.train_ds), model.d, exp.dtype)
    schedule = list(exp.schedule())
    t0 = time.perf_counter()
    for start in range(0, len(schedule), k):
        chunk = schedule[start : start + k]
        try:
            for _, epoch, idx in chunk:
                eta_update(bank, idx, eta_solve(model, [exp.view(idx, epoch, 1)]))
        except ad.NonFiniteError as err:
            step, lr = chunk[0][0], exp.lrs(chunk[0][0])[0]
            yield MetricsRecord(step, None, None, lr, epoch, None, (time.perf_counter() - t0) * 1e3, aborted=str(err))
            return
        for step, epoch, idx in chunk:
            lr, plr = exp.lrs(step)
            try:
                loss, z = theta_substep(
                    model, exp.view(idx, epoch, 0), bank.get(idx), exp.state, lr, plr, h.loss, o.momentum, o.weight_decay
                )
                knn = exp.knn_accuracy() if exp.should_log(step) and exp.knn_due(step) else None
            except ad.NonFiniteError as err:
                yield MetricsRecord(step, None, None, lr, epoch, None, (time.perf_counter() - t0) * 1e3, aborted=str(err))
                return
            if exp.should_log(step):
                yield MetricsRecord(step, loss, normalized_output_std(z), lr, epoch, knn, (time.perf_counter() - t0) * 1e3)
