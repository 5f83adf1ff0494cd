"""Synthetic object-on-context scenes, CIFAR-10 ingestion, and the CFDS container.

Each synthetic sample is a procedural context texture (keyed by context id)
with a class-keyed glyph drawn inside a random bounding box covering 15-50%
of the image. The glyph's shape carries the class and its colour contrasts
with the local context, so blurring the box destroys the object evidence
while leaving the context.

Context assignment per mode:
  dissimilar  one class per supercategory, context id == supercategory id
  similar     classes share a supercategory and draw from its context pool
  uniform     context id uniform at random (no class information)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError, RecordValueError, TruncationError

MODES = {"dissimilar": 0, "similar": 1, "uniform": 2, "cifar10": 3, "adversarial": 255}
MODE_NAMES = {v: k for k, v in MODES.items()}

CFDS_MAGIC = b"CFDS"
CFDS_VERSION = 1
CIFAR_RECORD = 3073

MIN_BOX_FRAC = 0.15
MAX_BOX_FRAC = 0.5
PIXEL_NOISE = 0.04
GRAY = 0.5
CONTEXT_FREQ = (0.5, 1.5)  # cycles per image; contexts stay low-frequency


@dataclass(frozen=True)
class DatasetMeta:
    n_classes: int
    class_to_super: tuple
    mode: str = "dissimilar"
    height: int = 32
    width: int = 32
    contexts_per_super: int = 1
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    @property
    def n_super(self):
        return max(self.class_to_super) + 1

    @property
    def n_contexts(self):
        if self.mode == "uniform":
            return self.n_classes
        return self.n_super * self.contexts_per_super

    def context_pool(self, super_id):
        k = self.contexts_per_super
        return list(range(super_id * k, super_id * k + k))


def make_meta(n_classes=8, mode="dissimilar", n_super=4, size=32) -> DatasetMeta:
    """Meta with the class->supercategory map each mode implies."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if mode not in ("dissimilar", "similar", "uniform"):
        raise ConfigError(f"unknown context mode {mode!r}")
    if mode == "similar":
        if n_super < 1 or n_classes % n_super:
            raise ConfigError(f"{n_classes} classes cannot split evenly into {n_super} supercategories")
        per = n_classes // n_super
        c2s = tuple(c // per for c in range(n_classes))
        return DatasetMeta(n_classes, c2s, mode, size, size, contexts_per_super=per)
    return DatasetMeta(n_classes, tuple(range(n_classes)), mode, size, size)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    bbox: tuple
    context_id: int
    supercategory_id: int


@dataclass
class Batch:
    images: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    bboxes: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.labels)


def one_hot(labels, n_classes, dtype=np.float32):
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


@dataclass
class Dataset:
    meta: DatasetMeta
    images: np.ndarray
    labels: np.ndarray
    bboxes: np.ndarray
    context_ids: np.ndarray
    super_ids: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(
            self.images[i],
            int(self.labels[i]),
            tuple(int(v) for v in self.bboxes[i]),
            int(self.context_ids[i]),
            int(self.super_ids[i]),
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return Dataset(
            self.meta,
            self.images[idx],
            self.labels[idx],
            self.bboxes[idx],
            self.context_ids[idx],
            self.super_ids[idx],
        )

    def with_images(self, images) -> "Dataset":
        return replace(self, images=np.asarray(images, dtype=np.float32))

    def normalized_images(self) -> np.ndarray:
        return normalize(self.images, self.meta.mean, self.meta.std)

    def batch(self, idx=None, normalized=True) -> Batch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        imgs = self.images[idx]
        if normalized:
            imgs = normalize(imgs, self.meta.mean, self.meta.std)
        return Batch(imgs, one_hot(self.labels[idx], self.meta.n_classes), self.labels[idx], self.bboxes[idx])


# -- procedural rendering ---------------------------------------------------------


def _context_texture(ctx_id, H, W, rng):
    keyed = np.random.default_rng([7919, ctx_id])
    kind = ctx_id % 4
    angle = (ctx_id * 0.618034 % 1.0) * np.pi + rng.uniform(-0.3, 0.3)
    freq = keyed.uniform(*CONTEXT_FREQ) * rng.uniform(0.8, 1.2)
    c1 = np.clip(keyed.uniform(0.1, 0.9, 3) + rng.normal(0, 0.04, 3), 0, 1)
    c2 = np.clip(keyed.uniform(0.1, 0.9, 3) + rng.normal(0, 0.04, 3), 0, 1)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    if kind == 0:
        field = 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj + phase)
    elif kind == 1:
        ortho = -xx * np.sin(angle) + yy * np.cos(angle)
        field = (np.sin(2 * np.pi * freq * proj + phase) * np.sin(2 * np.pi * freq * ortho + phase) > 0) * 1.0
    elif kind == 2:
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = np.hypot(yy - cy, xx - cx)
        field = 0.5 + 0.5 * np.cos(2 * np.pi * freq * 1.5 * r + phase)
    else:
        field = np.clip(proj * 0.9 + 0.1 * np.sin(2 * np.pi * freq * (xx - yy) + phase), 0, 1)
    return c1[:, None, None] * (1 - field) + c2[:, None, None] * field


def _glyph_mask(cls, h, w, rng):
    v, u = np.mgrid[0:h, 0:w]
    u = (u + 0.5) / w * 2 - 1
    v = (v + 0.5) / h * 2 - 1
    th = rng.uniform(-0.15, 0.15)
    u, v = u * np.cos(th) - v * np.sin(th), u * np.sin(th) + v * np.cos(th)
    shape = cls % 8
    r = np.hypot(u, v)
    if shape == 0:
        m = r <= 0.85
    elif shape == 1:
        m = np.maximum(abs(u), abs(v)) <= 0.7
    elif shape == 2:
        m = (v <= 0.75) & (abs(u) <= (v + 0.85) * 0.55)
    elif shape == 3:
        m = ((abs(u) <= 0.25) & (abs(v) <= 0.85)) | ((abs(v) <= 0.25) & (abs(u) <= 0.85))
    elif shape == 4:
        m = (r >= 0.5) & (r <= 0.9)
    elif shape == 5:
        m = abs(u) + abs(v) <= 0.9
    elif shape == 6:
        m = ((abs(u - v) <= 0.35) | (abs(u + v) <= 0.35)) & (np.maximum(abs(u), abs(v)) <= 0.85)
    else:
        m = ((abs(u) >= 0.45) & (abs(u) <= 0.85) & (abs(v) <= 0.85)) | (abs(v) <= 0.2) & (abs(u) <= 0.85)
    # classes beyond the eight base shapes toggle a central disc or bar
    variant = (cls // 8) % 3
    if variant == 1:
        m ^= r <= 0.3
    elif variant == 2:
        m ^= (abs(v) <= 0.12) & (abs(u) <= 0.85)
    return m


def _box(H, W, rng):
    area = H * W
    for _ in range(100):
        frac = rng.uniform(MIN_BOX_FRAC, MAX_BOX_FRAC)
        aspect = rng.uniform(0.75, 1.33)
        h = int(round(np.sqrt(frac * area * aspect)))
        w = int(round(frac * area / max(h, 1)))
        if 1 <= h <= H and 1 <= w <= W and MIN_BOX_FRAC * area <= h * w <= MAX_BOX_FRAC * area:
            return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1)), h, w
    raise ConfigError(f"cannot place a bounding box with area in [{MIN_BOX_FRAC}, {MAX_BOX_FRAC}] of {H}x{W}")


def _render(meta: DatasetMeta, label, seed, index, render):
    rng = np.random.default_rng([seed, index])
    H, W = meta.height, meta.width
    sup = meta.class_to_super[label]
    if meta.mode == "uniform":
        ctx = int(rng.integers(0, meta.n_contexts))
    else:
        pool = meta.context_pool(sup)
        ctx = pool[int(rng.integers(0, len(pool)))]
    context = _context_texture(ctx, H, W, rng)
    r0, c0, h, w = _box(H, W, rng)
    mask = _glyph_mask(label, h, w, rng)
    bright = context[:, r0 : r0 + h, c0 : c0 + w].mean() < 0.5
    color = rng.uniform(0.7, 1.0, 3) if bright else rng.uniform(0.0, 0.3, 3)
    noise = rng.normal(0, PIXEL_NOISE, (3, H, W))

    if render == "context":
        img = context.copy()
        img[:, r0 : r0 + h, c0 : c0 + w] = GRAY
    else:
        img = np.full((3, H, W), GRAY) if render == "object" else context.copy()
        crop = img[:, r0 : r0 + h, c0 : c0 + w]
        crop[:, mask] = color[:, None]
    img = np.clip(img + noise, 0, 1).astype(np.float32)
    return img, (r0, c0, h, w), ctx, sup


def generate_synthetic_dataset(meta: DatasetMeta, n_per_class: int, seed=0, render="full") -> Dataset:
    """Deterministic in (meta, n_per_class, seed); sample i depends only on (seed, i).

    ``render`` selects the full scene, the object alone on gray ("object"),
    or the context with the box grayed out ("context"). All three share
    labels, boxes and context ids for the same seed.
    """
    if meta.n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {meta.n_classes}")
    if meta.height < 16 or meta.width < 16:
        raise ConfigError(f"images must be at least 16x16, got {meta.height}x{meta.width}")
    if render not in ("full", "object", "context"):
        raise ConfigError(f"unknown render mode {render!r}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be positive, got {n_per_class}")
    n = meta.n_classes * n_per_class
    labels = np.arange(n) % meta.n_classes
    images = np.empty((n, 3, meta.height, meta.width), dtype=np.float32)
    bboxes = np.empty((n, 4), dtype=np.int64)
    ctxs = np.empty(n, dtype=np.int64)
    sups = np.empty(n, dtype=np.int64)
    for i in range(n):
        images[i], bboxes[i], ctxs[i], sups[i] = _render(meta, int(labels[i]), seed, i, render)
    mean, std = channel_stats(images)
    meta = replace(meta, mean=mean, std=std)
    return Dataset(meta, images, labels, bboxes, ctxs, sups)


def channel_stats(images):
    x = images.astype(np.float64)
    return tuple(float(v) for v in x.mean(axis=(0, 2, 3))), tuple(float(v) for v in x.std(axis=(0, 2, 3)))


def mutual_information(a, b) -> float:
    """Empirical mutual information (nats) between two integer label arrays."""
    a, b = np.asarray(a), np.asarray(b)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


# -- normalization / splitting ----------------------------------------------------


def _stats_arrays(mean, std, ndim):
    shape = (-1,) + (1,) * 2
    mean = np.asarray(mean, dtype=np.float32).reshape(shape)
    std = np.asarray(std, dtype=np.float32).reshape(shape)
    if np.any(std <= 1e-8):
        raise ConfigError(f"channel std must exceed 1e-8, got {std.ravel().tolist()}")
    return mean, std


def normalize(x, mean, std):
    """Per-channel (x - mean) / std over N×C×H×W arrays or a :class:`Batch`."""
    if isinstance(x, Batch):
        return replace(x, images=normalize(x.images, mean, std))
    m, s = _stats_arrays(mean, std, x.ndim)
    return ((x - m) / s).astype(np.float32)


def unnormalize(x, mean, std):
    if isinstance(x, Batch):
        return replace(x, images=unnormalize(x.images, mean, std))
    m, s = _stats_arrays(mean, std, x.ndim)
    return (x * s + m).astype(np.float32)


def normalized_bounds(mean, std):
    """Per-channel images of 0 and 1 under normalization, shaped C×1×1."""
    lo = normalize(np.zeros((1, len(mean), 1, 1), np.float32), mean, std)[0]
    hi = normalize(np.ones((1, len(mean), 1, 1), np.float32), mean, std)[0]
    return lo, hi


def split(dataset: Dataset, train_fraction: float, seed=0):
    """Stratified seeded split -> (train, test).

    The train total is floor(fraction * N); per-class quotas use largest
    remainders so each class is within one sample of the target fraction.
    """
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = dataset.labels
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise ConfigError(f"class {int(classes[np.argmin(counts)])} has fewer than 2 samples")
    ideal = counts * train_fraction
    quota = np.floor(ideal).astype(int)
    total = int(np.floor(len(labels) * train_fraction + 1e-9))
    leftover = total - quota.sum()
    order = np.lexsort((classes, -(ideal - quota)))
    quota[order[:leftover]] += 1
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c, q in zip(classes, quota):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:q])
        test_idx.append(idx[q:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


# -- CIFAR-10 ---------------------------------------------------------------------


def parse_cifar10_batch(buf: bytes):
    """Binary CIFAR-10 batch -> list of (label, 3×32×32 float32 image in [0, 1])."""
    buf = bytes(buf)
    n, rem = divmod(len(buf), CIFAR_RECORD)
    if rem:
        raise TruncationError(f"length {len(buf)} is not a multiple of {CIFAR_RECORD}", n * CIFAR_RECORD)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0]
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        i = int(bad[0])
        raise RecordValueError(f"label {labels[i]} > 9", i, i * CIFAR_RECORD)
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / np.float32(255)
    return [(int(lbl), img) for lbl, img in zip(labels, images)]


def cifar10_dataset(records) -> Dataset:
    labels = np.array([r[0] for r in records], dtype=np.int64)
    images = np.stack([r[1] for r in records]).astype(np.float32)
    n = len(labels)
    mean, std = channel_stats(images)
    meta = DatasetMeta(10, tuple(range(10)), "cifar10", 32, 32, mean=mean, std=std)
    bboxes = np.tile(np.array([0, 0, 32, 32]), (n, 1))
    return Dataset(meta, images, labels, bboxes, labels.copy(), labels.copy())


# -- CFDS container -----------------------------------------------------------------


def _record_dtype(H, W):
    return np.dtype(
        [
            ("label", "<u2"),
            ("super", "<u2"),
            ("context", "<u2"),
            ("bbox", "<u2", (4,)),
            ("image", "<f4", (3 * H * W,)),
        ]
    )


CFDS_HEADER = struct.Struct("<4sHHHHBI")


def dump_cfds(dataset: Dataset, mode=None) -> bytes:
    meta = dataset.meta
    mode_code = MODES[mode or meta.mode]
    H, W = meta.height, meta.width
    recs = np.empty(len(dataset), dtype=_record_dtype(H, W))
    recs["label"] = dataset.labels
    recs["super"] = dataset.super_ids
    recs["context"] = dataset.context_ids
    recs["bbox"] = dataset.bboxes
    recs["image"] = dataset.images.reshape(len(dataset), -1)
    header = CFDS_HEADER.pack(CFDS_MAGIC, CFDS_VERSION, meta.n_classes, H, W, mode_code, len(dataset))
    return header + recs.tobytes()


def load_cfds(buf: bytes) -> Dataset:
    buf = bytes(buf)
    if len(buf) < CFDS_HEADER.size:
        raise TruncationError("file shorter than CFDS header", len(buf))
    magic, version, C, H, W, mode, count = CFDS_HEADER.unpack_from(buf)
    if magic != CFDS_MAGIC:
        raise ParseError("bad CFDS magic", 0)
    if version != CFDS_VERSION:
        raise ParseError(f"unsupported CFDS version {version}", 4)
    if mode not in MODE_NAMES:
        raise ParseError(f"unknown mode byte {mode}", 12)
    dt = _record_dtype(H, W)
    body = len(buf) - CFDS_HEADER.size
    if body != count * dt.itemsize:
        off = CFDS_HEADER.size + min(body // dt.itemsize, count) * dt.itemsize
        raise TruncationError(f"expected {count} records of {dt.itemsize} bytes, body has {body} bytes", off)
    recs = np.frombuffer(buf, dtype=dt, offset=CFDS_HEADER.size)
    labels = recs["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= C)
    if len(bad):
        i = int(bad[0])
        raise RecordValueError(f"label {labels[i]} >= class count {C}", i, CFDS_HEADER.size + i * dt.itemsize)
    sups = recs["super"].astype(np.int64)
    c2s = [0] * C
    for c in range(C):
        hit = sups[labels == c]
        c2s[c] = int(hit[0]) if len(hit) else c
    images = recs["image"].reshape(count, 3, H, W).copy()
    mean, std = channel_stats(images) if count else ((0.0,) * 3, (1.0,) * 3)
    mode_name = MODE_NAMES[mode]
    per = 1
    if mode_name == "similar":
        per = max(1, C // (max(c2s) + 1))
    meta = DatasetMeta(C, tuple(c2s), mode_name, H, W, per, mean, std)
    return Dataset(
        meta, images, labels, recs["bbox"].astype(np.int64), recs["context"].astype(np.int64), sups
    )
