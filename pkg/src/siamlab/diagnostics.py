"""Collapse detection and representation monitors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad


@dataclass
class MetricsRecord:
    step: int
    loss: float | None
    output_std: float | None
    lr: float
    epoch: int = 0
    knn_acc: float | None = None
    wallclock_ms: float = 0.0
    aborted: str | None = None

    def to_json(self) -> dict:
        rec = asdict(self)
        if rec["aborted"] is None:
            del rec["aborted"]
        for k in ("loss", "output_std"):
            if rec[k] is not None and not math.isfinite(rec[k]):
                rec[k] = None
        return rec

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsRecord":
        return cls(**obj)


@dataclass
class CollapseVerdict:
    status: str  # collapsed | healthy | diverged | unstable
    evidence: dict = field(default_factory=dict)


@dataclass
class VerdictConfig:
    window: int = 100
    loss_floor: float = -0.99
    std_factor: float = 0.1  # collapsed needs output_std <= std_factor / sqrt(d)
    oscillation: float = 0.05  # unstable if std of step-to-step loss changes exceeds this
    divergence_rise: float = 1.0
    divergence_bound: float = 1e6


class InsufficientHistory(ValueError):
    pass


def _as_array(z) -> np.ndarray:
    return z.data if isinstance(z, ad.Tensor) else np.asarray(z, dtype=np.float64)


def normalized_output_std(z_batch) -> float:
    """Mean over channels of the per-channel std of row-normalized outputs."""
    z = _as_array(z_batch)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need a (batch >= 2, d) array, got shape {z.shape}")
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), ad.NORMALIZE_EPS)
    return float((z / norm).std(axis=0, ddof=1).mean())


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), ad.NORMALIZE_EPS)


def knn_predict(train_feats, train_labels, query_feats, k: int = 20, temperature: float = 0.07, num_classes=None):
    """Similarity-weighted kNN vote over cosine similarity (weights exp(s / T))."""
    train = _normalize_rows(_as_array(train_feats))
    query = _normalize_rows(_as_array(query_feats))
    labels = np.asarray(train_labels)
    if len(train) == 0 or len(query) == 0:
        raise ValueError("kNN needs non-empty train and query sets")
    if not 1 <= k <= len(train):
        raise ValueError(f"k={k} must be in [1, {len(train)}]")
    C = int(num_classes if num_classes is not None else labels.max() + 1)
    sim = query @ train.T
    nn_idx = np.argpartition(-sim, k - 1, axis=1)[:, :k]
    nn_sim = np.take_along_axis(sim, nn_idx, axis=1)
    weights = np.exp((nn_sim - 1.0) / temperature)  # shift keeps exp bounded; argmax unaffected
    votes = np.zeros((len(query), C))
    np.add.at(votes, (np.arange(len(query))[:, None], labels[nn_idx]), weights)
    return votes.argmax(axis=1)


def knn_monitor(train_feats, train_labels, query_feats, query_labels, k: int = 20, temperature: float = 0.07, num_classes=None) -> float:
    pred = knn_predict(train_feats, train_labels, query_feats, k, temperature, num_classes)
    return float(np.mean(pred == np.asarray(query_labels)))


@dataclass
class ProbeConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 256
    test_fraction: float = 0.25
    seed: int = 0


def linear_probe(feats, labels, cfg: ProbeConfig | None = None, test_feats=None, test_labels=None) -> float:
    """Train a softmax-regression layer on frozen features; return held-out accuracy.

    Features are standardized with training-set statistics. Without an
    explicit test set, ``cfg.test_fraction`` of the samples is held out.
    """
    from .training import OptimizerState, sgd_step

    cfg = cfg or ProbeConfig()
    X = np.array(_as_array(feats), dtype=np.float64)
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(cfg.seed)
    if test_feats is None:
        order = rng.permutation(len(X))
        n_test = max(1, int(round(cfg.test_fraction * len(X))))
        te, tr = order[:n_test], order[n_test:]
        Xtr, ytr, Xte, yte = X[tr], y[tr], X[te], y[te]
    else:
        Xtr, ytr = X, y
        Xte, yte = np.array(_as_array(test_feats), dtype=np.float64), np.asarray(test_labels).astype(int)
    if len(np.unique(ytr)) < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    C = int(max(ytr.max(), yte.max()) + 1)
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd

    W = ad.parameter(np.zeros((X.shape[1], C)))
    b = ad.parameter(np.zeros(C))
    state = OptimizerState()
    onehot = np.eye(C)
    bs = min(cfg.batch_size, len(Xtr))
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(Xtr))
        for s in range(0, len(Xtr) - bs + 1, bs):
            idx = perm[s : s + bs]
            logits = ad.affine(ad.Tensor(Xtr[idx]), W, b)
            loss = ad.neg(ad.mean(ad.sum(ad.mul(ad.log_softmax(logits), onehot[ytr[idx]]), axis=1)))
            grads = ad.backward(loss)
            sgd_step([W, b], grads, state, cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    pred = (Xte @ W.data + b.data).argmax(axis=1)
    return float(np.mean(pred == yte))


def collapse_verdict(history: Sequence[MetricsRecord | dict], d: int, cfg: VerdictConfig | None = None) -> CollapseVerdict:
    """Classify a run from its metrics history.

    ``diverged``: a non-finite or aborted record (decided before the
    history-length check), |loss| beyond
    ``divergence_bound``, or the trailing window sitting ``divergence_rise``
    above the first window. ``collapsed``: trailing mean loss at or below
    ``loss_floor`` and trailing mean output std at or below
    ``std_factor / sqrt(d)``. ``unstable``: loss oscillation in the trailing
    window above ``oscillation``. Otherwise ``healthy``.
    """
    cfg = cfg or VerdictConfig()
    recs = [MetricsRecord(**r) if isinstance(r, dict) else r for r in history]
    bad = [r for r in recs if r.aborted or r.loss is None or not math.isfinite(r.loss)]
    if bad:  # conclusive at any history length
        return CollapseVerdict("diverged", {"reason": "non-finite loss", "step": bad[0].step, "detail": bad[0].aborted})
    if len(recs) < cfg.window:
        raise InsufficientHistory(f"need at least {cfg.window} records, got {len(recs)}")
    losses = np.array([np.nan if r.loss is None else r.loss for r in recs], dtype=np.float64)
    stds = np.array([np.nan if r.output_std is None else r.output_std for r in recs], dtype=np.float64)
    tail_l = losses[-cfg.window :]
    tail_s = stds[-cfg.window :]
    head_l = losses[: cfg.window]
    std_limit = cfg.std_factor / math.sqrt(d)
    evidence = {
        "trailing_loss": float(np.mean(tail_l)),
        "trailing_output_std": float(np.mean(tail_s)),
        "std_threshold": std_limit,
        "loss_threshold": cfg.loss_floor,
        "loss_trend": float(np.mean(tail_l) - np.mean(head_l)),
        "oscillation": float(np.std(np.diff(tail_l))) if np.all(np.isfinite(tail_l)) else float("nan"),
    }
    if np.max(np.abs(losses)) > cfg.divergence_bound or evidence["loss_trend"] > cfg.divergence_rise:
        return CollapseVerdict("diverged", {**evidence, "reason": "loss rising"})
    if evidence["trailing_loss"] <= cfg.loss_floor and evidence["trailing_output_std"] <= std_limit:
        return CollapseVerdict("collapsed", evidence)
    if evidence["oscillation"] > cfg.oscillation:
        return CollapseVerdict("unstable", evidence)
    return CollapseVerdict("healthy", evidence)
