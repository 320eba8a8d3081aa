"""Datasets (CIFAR-10 binary, synthetic clusters) and view augmentation.

Randomness is keyed, never sequential: every augmentation draw comes from a
Philox generator seeded by ``(root seed, sample id, epoch, view index)``, so
a view can be regenerated anywhere from its path alone.

Vector augmentation (used for synthetic data, which has no natural image
transforms): ``x + noise_std * N(0, I)``, then each coordinate is zeroed
independently with probability ``dropout_prob``.

Color jitter conventions, applied to RGB images in [0, 1]:

* brightness factor b ~ U[1-s, 1+s]: ``img * b``
* contrast factor c ~ U[1-s, 1+s]: ``(img - mean(gray(img))) * c + mean``
* saturation factor s' ~ U[1-s, 1+s]: ``gray + s' * (img - gray)``
* hue shift h ~ U[-s, s]: H channel of HSV rotated by ``h`` (mod 1)

Each sub-transform clips to [0, 1]; the four are applied in a random order.
``gray = 0.299 R + 0.587 G + 0.114 B``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
LUMA = np.array([0.299, 0.587, 0.114])


class CifarFormatError(ValueError):
    pass


@dataclass
class Sample:
    id: int
    payload: np.ndarray
    label: int | None = None


@dataclass
class ArrayDataset:
    """Samples stored as one stacked array; ``ids`` are positions unless given."""

    x: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.x))
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset payload contains non-finite values")
        if self.labels is not None and self.num_classes is not None:
            if np.any(self.labels >= self.num_classes) or np.any(self.labels < 0):
                raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def sample(self, i: int) -> Sample:
        label = None if self.labels is None else int(self.labels[i])
        return Sample(int(self.ids[i]), self.x[i], label)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return ArrayDataset(self.x[idx], labels, self.num_classes, self.ids[idx])

    def save(self, path: str | Path) -> None:
        """Write ``x``, ``labels``, ``ids`` and ``num_classes`` arrays to an ``.npz``."""
        arrays = {"x": self.x, "ids": self.ids, "num_classes": np.array(self.num_classes or -1)}
        if self.labels is not None:
            arrays["labels"] = self.labels
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ArrayDataset":
        with np.load(path) as z:
            nc = int(z["num_classes"])
            labels = z["labels"] if "labels" in z.files else None
            return cls(z["x"], labels, None if nc < 0 else nc, z["ids"])


# ---------------------------------------------------------------- rng


def rng_for(seed: int, sample_id: int, epoch: int, view: int) -> np.random.Generator:
    """Counter-based generator for one ``(seed, sample, epoch, view)`` path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, sample_id, epoch, view])))


@dataclass(frozen=True)
class RngStream:
    seed: int

    def at(self, sample_id: int, epoch: int, view: int) -> np.random.Generator:
        return rng_for(self.seed, sample_id, epoch, view)

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        # sample id 2**31 is reserved for the epoch shuffle
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 2**31, epoch, 0]))).permutation(n)


# ---------------------------------------------------------------- CIFAR-10


def parse_cifar10(data: bytes) -> ArrayDataset:
    """Decode CIFAR-10 binary records (label byte + 3072 planar RGB bytes)."""
    if len(data) % CIFAR_RECORD:
        raise CifarFormatError(f"truncated record: {len(data)} bytes is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CifarFormatError(f"record {bad[0]} has label byte {labels[bad[0]]} > 9")
    x = raw[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return ArrayDataset(x, labels, 10)


def serialize_cifar10(ds: ArrayDataset) -> bytes:
    if ds.x.shape[1:] != CIFAR_SHAPE or ds.labels is None:
        raise CifarFormatError("need labelled 3x32x32 images")
    pixels = np.rint(np.clip(ds.x, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(len(ds), -1)
    out = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return out.tobytes()


def load_cifar10(root: str | Path, train: bool = True, limit: int | None = None) -> ArrayDataset:
    """Load ``data_batch_{1..5}.bin`` (train) or ``test_batch.bin`` from ``root``.

    ``root`` may also be the parent of a ``cifar-10-batches-bin`` directory.
    """
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    buf = io.BytesIO()
    for name in names:
        buf.write((root / name).read_bytes())
        if limit is not None and buf.tell() >= limit * CIFAR_RECORD:
            break
    data = buf.getvalue()
    if limit is not None:
        data = data[: limit * CIFAR_RECORD]
    return parse_cifar10(data)


# ---------------------------------------------------------------- synthetic


def make_synthetic(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    seed: int,
    noise: float = 1.0,
    split: int = 0,
) -> ArrayDataset:
    """Gaussian clusters with isotropic noise ``noise``.

    Class centers are ``separation * noise / sqrt(2)`` times random
    orthonormal directions (so any two centers sit ``separation`` noise
    std apart); they depend on ``seed`` only, while the samples also depend
    on ``split``, so splits of the same seed share the class structure.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if num_classes > dim:
        raise ValueError("need dim >= num_classes for orthogonal centers")
    center_rng = np.random.default_rng([seed, 0])
    q, _ = np.linalg.qr(center_rng.standard_normal((dim, num_classes)))
    centers = q.T * (separation * noise / np.sqrt(2.0))
    rng = np.random.default_rng([seed, 1, split])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = centers[labels] + noise * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return ArrayDataset(x[order], labels[order], num_classes)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentationConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    crop: bool = True
    hflip: bool = True
    jitter: bool = True
    grayscale: bool = True
    output_size: int | None = None
    # vector data
    noise_std: float = 0.5
    dropout_prob: float = 0.2
    vector: bool = True

    def __post_init__(self):
        self.crop_scale_range = tuple(self.crop_scale_range)
        self.crop_ratio_range = tuple(self.crop_ratio_range)
        self.jitter_strengths = tuple(self.jitter_strengths)
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ("hflip_prob", "jitter_prob", "grayscale_prob", "dropout_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(crop=False, hflip=False, jitter=False, grayscale=False, vector=False)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a (C, H, W) array."""
    _, H, W = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * H / out_h - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * W / out_w - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(img, rng, scale, ratio, out_size=None):
    _, H, W = img.shape
    out_h = out_w = out_size if out_size else None
    if out_h is None:
        out_h, out_w = H, W
    area = H * W
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(*log_ratio))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return _resize_bilinear(img[:, top : top + h, left : left + w], out_h, out_w)
    # fallback: central crop at the closest allowed aspect ratio
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, max(1, int(round(W / ratio[0])))
    elif in_ratio > ratio[1]:
        h, w = H, max(1, int(round(H * ratio[1])))
    else:
        w, h = W, H
    top, left = (H - h) // 2, (W - w) // 2
    return _resize_bilinear(img[:, top : top + h, left : left + w], out_h, out_w)


def grayscale(img: np.ndarray) -> np.ndarray:
    g = np.tensordot(LUMA, img, axes=(0, 0))
    return np.broadcast_to(g, img.shape).copy()


def _rgb_to_hsv(img):
    r, g, b = img
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def adjust_hue(img, shift):
    h, s, v = _rgb_to_hsv(img)
    return _hsv_to_rgb((h + shift) % 1.0, s, v)


def color_jitter(img, rng, strengths):
    b, c, s, h = strengths
    factors = (rng.uniform(1 - b, 1 + b), rng.uniform(1 - c, 1 + c), rng.uniform(1 - s, 1 + s), rng.uniform(-h, h))
    for k in rng.permutation(4):
        if k == 0:
            img = img * factors[0]
        elif k == 1:
            m = np.tensordot(LUMA, img, axes=(0, 0)).mean()
            img = (img - m) * factors[1] + m
        elif k == 2:
            gray = np.tensordot(LUMA, img, axes=(0, 0))[None]
            img = gray + factors[2] * (img - gray)
        else:
            img = adjust_hue(img, factors[3])
        img = np.clip(img, 0.0, 1.0)
    return img


def augment_image(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    out = img
    if cfg.crop:
        out = random_resized_crop(out, rng, cfg.crop_scale_range, cfg.crop_ratio_range, cfg.output_size)
    if cfg.hflip and rng.random() < cfg.hflip_prob:
        out = out[:, :, ::-1]
    if cfg.jitter and rng.random() < cfg.jitter_prob:
        out = color_jitter(out, rng, cfg.jitter_strengths)
    if cfg.grayscale and rng.random() < cfg.grayscale_prob:
        out = grayscale(out)
    return np.clip(out, 0.0, 1.0) if out is not img else img.copy()


def augment_vector(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.vector:
        return x.copy()
    out = x + cfg.noise_std * rng.standard_normal(x.shape)
    if cfg.dropout_prob > 0:
        out = out * (rng.random(x.shape) >= cfg.dropout_prob)
    return out


def augment(sample: Sample, cfg: AugmentationConfig, rng_path: tuple[int, int, int, int]) -> np.ndarray:
    """One augmented view of ``sample``; ``rng_path`` is (seed, sample id, epoch, view)."""
    rng = rng_for(*rng_path)
    if sample.payload.ndim == 3:
        return augment_image(sample.payload, cfg, rng)
    return augment_vector(sample.payload, cfg, rng)


def augment_batch(ds: ArrayDataset, idx: np.ndarray, cfg: AugmentationConfig, seed: int, epoch: int, view: int) -> np.ndarray:
    fn = augment_image if ds.is_image else augment_vector
    return np.stack([fn(ds.x[i], cfg, rng_for(seed, int(ds.ids[i]), epoch, view)) for i in idx])
