"""Foreground, background and joint classifiers.

Each stream is a small conv stack (conv3x3 -> batchnorm -> relu -> pool per
block, the last block pooling globally) whose flattened output is the
feature vector. The joint classifier concatenates the two streams,
foreground first, and applies a :class:`FusionHead` whose weight rows are
partitioned into a foreground block and a background block.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ParseError, TruncationError
from .tensor import BatchNormState, Tensor

KINDS = ("foreground", "background", "joint")
STREAMS = {"foreground": ("fg",), "background": ("bg",), "joint": ("fg", "bg")}

CHECKPOINT_MAGIC = b"FZCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (8, 16)
    output_dim: int = 64
    in_channels: int = 3
    kernel_size: int = 3
    image_size: int | None = 32

    @property
    def n_blocks(self):
        return len(self.widths) + 1

    def validate(self):
        if self.output_dim <= 0:
            raise ConfigError(f"output_dim must be positive, got {self.output_dim}")
        if any(w <= 0 for w in self.widths) or self.in_channels <= 0:
            raise ConfigError(f"channel widths must be positive, got {self.widths}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.image_size is not None and self.image_size % (2 ** len(self.widths)):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{len(self.widths)}")


class FeatureExtractor:
    """Conv stack producing an N×output_dim feature matrix.

    A frozen extractor exposes no trainable parameters and always runs its
    batchnorm layers on running statistics, so no training call can change it.
    """

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        arch.validate()
        self.arch = arch
        self.frozen = False
        self.blocks = []
        chans = (arch.in_channels, *arch.widths, arch.output_dim)
        k = arch.kernel_size
        for cin, cout in zip(chans[:-1], chans[1:]):
            std = np.sqrt(2.0 / (cin * k * k))
            self.blocks.append(
                {
                    "conv": Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True),
                    "gamma": Tensor(np.ones(cout), requires_grad=True),
                    "beta": Tensor(np.zeros(cout), requires_grad=True),
                    "bn": BatchNormState(cout),
                }
            )

    @property
    def output_dim(self):
        return self.arch.output_dim

    def freeze(self, flag: bool = True):
        self.frozen = flag
        for p in self._param_tensors():
            p.requires_grad = not flag
            p.grad = None
        return self

    def _param_tensors(self):
        return [blk[key] for blk in self.blocks for key in ("conv", "gamma", "beta")]

    def parameters(self):
        return [] if self.frozen else self._param_tensors()

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise DimensionError(f"extractor expects N×{self.arch.in_channels}×H×W input, got {x.shape}")
        H, W = x.shape[2:]
        n_pool = len(self.blocks) - 1
        if H != W or H % (2**n_pool) or (self.arch.image_size and H != self.arch.image_size):
            raise DimensionError(f"extractor cannot take spatial extent {(H, W)}")
        training = training and not self.frozen
        pad = self.arch.kernel_size // 2
        h = x
        for i, blk in enumerate(self.blocks):
            h = T.conv2d(h, blk["conv"], stride=1, padding=pad)
            h = T.batchnorm2d(h, blk["gamma"], blk["beta"], blk["bn"], training)
            h = T.relu(h)
            h = T.avg_pool2d(h, h.shape[2] if i == n_pool else 2)
        return T.flatten(h)

    def named_arrays(self, prefix):
        out = []
        for i, blk in enumerate(self.blocks):
            out += [
                (f"{prefix}.{i}.conv", blk["conv"].data),
                (f"{prefix}.{i}.gamma", blk["gamma"].data),
                (f"{prefix}.{i}.beta", blk["beta"].data),
                (f"{prefix}.{i}.running_mean", blk["bn"].running_mean),
                (f"{prefix}.{i}.running_var", blk["bn"].running_var),
            ]
        return out


class LinearHead:
    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator):
        self.W = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, n_classes)), requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, feats: Tensor) -> Tensor:
        return T.linear(feats, self.W, self.b)


class FusionHead(LinearHead):
    """Linear head over [fg | bg] features with a declared row partition."""

    def __init__(self, d_fg: int, d_bg: int, n_classes: int, rng: np.random.Generator):
        super().__init__(d_fg + d_bg, n_classes, rng)
        self.d_fg, self.d_bg = d_fg, d_bg

    @property
    def fg_rows(self):
        return slice(0, self.d_fg)

    @property
    def bg_rows(self):
        return slice(self.d_fg, self.d_fg + self.d_bg)

    @property
    def theta_fg(self) -> np.ndarray:
        """Writable view of the foreground weight block."""
        return self.W.data[self.fg_rows]

    @property
    def theta_bg(self) -> np.ndarray:
        return self.W.data[self.bg_rows]


class Classifier:
    def __init__(self, kind, extractors: dict, head: LinearHead, n_classes: int, name=None):
        if kind not in KINDS:
            raise ConfigError(f"unknown classifier kind {kind!r}")
        if tuple(extractors) != STREAMS[kind]:
            raise ConfigError(f"{kind} classifier needs streams {STREAMS[kind]}, got {tuple(extractors)}")
        self.kind = kind
        self.extractors = extractors
        self.head = head
        self.n_classes = n_classes
        self.name = name or kind

    @property
    def streams(self):
        return STREAMS[self.kind]

    def parameters(self):
        params = [p for ex in self.extractors.values() for p in ex.parameters()]
        return params + self.head.parameters()

    def features(self, x, training=False) -> dict:
        """Per-stream feature tensors. ``x`` is one image batch, or for joint
        classifiers optionally a (fg_input, bg_input) pair."""
        if isinstance(x, tuple):
            if len(x) != len(self.streams):
                raise DimensionError(f"{self.kind} classifier takes {len(self.streams)} inputs")
            inputs = dict(zip(self.streams, x))
        else:
            inputs = {s: x for s in self.streams}
        return {s: self.extractors[s].forward(inputs[s], training) for s in self.streams}

    def head_logits(self, feats: dict) -> Tensor:
        if self.kind == "joint":
            return self.head(T.concat(feats["fg"], feats["bg"]))
        return self.head(feats[self.streams[0]])

    def logits(self, x, training=False) -> Tensor:
        return self.head_logits(self.features(x, training))

    def __call__(self, x) -> Tensor:
        return self.logits(x, training=False)

    def named_arrays(self):
        out = []
        for s in self.streams:
            out += self.extractors[s].named_arrays(s)
        return out + [("head.W", self.head.W.data), ("head.b", self.head.b.data)]

    def copy(self):
        return copy.deepcopy(self)


def build_classifier(kind, arch: ArchConfig, n_classes: int, seed=0, extractors: dict | None = None):
    """Fresh classifier with seeded He-style init.

    ``extractors`` may supply pretrained streams (copied, not shared). Joint
    classifiers freeze their extractors.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown classifier kind {kind!r}")
    if n_classes <= 0:
        raise ConfigError(f"class count must be positive, got {n_classes}")
    arch.validate()
    rng = np.random.default_rng(seed)
    exs = {}
    for s in STREAMS[kind]:
        fresh = FeatureExtractor(arch, rng)
        if extractors and s in extractors:
            fresh = copy.deepcopy(extractors[s])
        exs[s] = fresh
    if kind == "joint":
        head = FusionHead(exs["fg"].output_dim, exs["bg"].output_dim, n_classes, rng)
        for ex in exs.values():
            ex.freeze()
    else:
        head = LinearHead(exs[STREAMS[kind][0]].output_dim, n_classes, rng)
    return Classifier(kind, exs, head, n_classes)


def _as_input(batch):
    from .data import Batch

    if isinstance(batch, Batch):
        return batch.images
    return batch


def _chunks(x, size):
    if isinstance(x, tuple):
        n = len(x[0])
        for i in range(0, n, size):
            yield tuple(Tensor(a[i : i + size], dtype=a.dtype) for a in x)
    else:
        for i in range(0, len(x), size):
            yield Tensor(x[i : i + size], dtype=x.dtype)


def forward_features(clf: Classifier, batch, chunk=256) -> dict:
    """Eval-mode features per stream as numpy arrays, without recording."""
    x = _as_input(batch)
    parts = {s: [] for s in clf.streams}
    with T.no_grad():
        for xb in _chunks(x, chunk):
            for s, f in clf.features(xb).items():
                parts[s].append(f.data)
    return {s: np.concatenate(v) for s, v in parts.items()}


def predict(clf: Classifier, batch, chunk=256):
    """(logits, labels); ties go to the smallest class index."""
    x = _as_input(batch)
    out = []
    with T.no_grad():
        for xb in _chunks(x, chunk):
            out.append(clf(xb).data)
    logits = np.concatenate(out)
    return logits, np.argmax(logits, axis=1)


def accuracy(clf: Classifier, images, labels) -> float:
    return float(np.mean(predict(clf, images)[1] == labels))


# -- checkpoints ----------------------------------------------------------------


def serialize_params(clf: Classifier) -> bytes:
    arrays = clf.named_arrays()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_records(buf):
    r = _Reader(bytes(buf))
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    (version,) = r.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    (count,) = r.unpack("<I", "record count")
    records = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("parameter name is not utf-8", start + 2) from None
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}I", "extents")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
        if name in records:
            raise ParseError(f"duplicate parameter {name}", start)
        records[name] = (arr.astype(np.float32), start)
    if r.pos != len(r.buf):
        raise ParseError("trailing bytes after last record", r.pos)
    return records


def deserialize_params(buf: bytes) -> Classifier:
    records = _read_records(buf)
    streams = tuple(s for s in ("fg", "bg") if f"{s}.0.conv" in records)
    kind = {("fg",): "foreground", ("bg",): "background", ("fg", "bg"): "joint"}.get(streams)
    end = len(buf)

    def need(name):
        if name not in records:
            raise ParseError(f"checkpoint lacks parameter {name}", end)
        return records[name]

    if kind is None:
        raise ParseError("checkpoint holds no recognizable extractor stream", end)
    W, w_off = need("head.W")
    b, b_off = need("head.b")
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ParseError(f"head shapes {W.shape} / {b.shape} inconsistent", b_off)

    exs = {}
    for s in streams:
        convs = []
        i = 0
        while f"{s}.{i}.conv" in records:
            convs.append(records[f"{s}.{i}.conv"])
            i += 1
        for c, off in convs:
            if c.ndim != 4 or c.shape[2] != c.shape[3]:
                raise ParseError(f"conv kernel shape {c.shape} invalid", off)
        for (a, _), (c, off) in zip(convs, convs[1:]):
            if c.shape[1] != a.shape[0]:
                raise ParseError(f"conv chain breaks between shapes {a.shape} and {c.shape}", off)
        arch = ArchConfig(
            widths=tuple(c.shape[0] for c, _ in convs[:-1]),
            output_dim=convs[-1][0].shape[0],
            in_channels=convs[0][0].shape[1],
            kernel_size=convs[0][0].shape[2],
            image_size=None,
        )
        ex = FeatureExtractor(arch, np.random.default_rng(0))
        for i, blk in enumerate(ex.blocks):
            blk["conv"].data = need(f"{s}.{i}.conv")[0]
            for key in ("gamma", "beta", "running_mean", "running_var"):
                arr, off = need(f"{s}.{i}.{key}")
                if arr.shape != (blk["conv"].shape[0],):
                    raise ParseError(f"{s}.{i}.{key} has shape {arr.shape}", off)
                if key in ("gamma", "beta"):
                    blk[key].data = arr
                else:
                    setattr(blk["bn"], key, arr)
        exs[s] = ex

    d_total = sum(ex.output_dim for ex in exs.values())
    if W.shape[0] != d_total:
        raise ParseError(f"head.W has {W.shape[0]} rows, streams provide {d_total}", w_off)
    n_classes = W.shape[1]
    rng = np.random.default_rng(0)
    if kind == "joint":
        head = FusionHead(exs["fg"].output_dim, exs["bg"].output_dim, n_classes, rng)
        for ex in exs.values():
            ex.freeze()
    else:
        head = LinearHead(d_total, n_classes, rng)
    head.W.data, head.b.data = W, b
    expected = {name for name, _ in Classifier(kind, exs, head, n_classes).named_arrays()}
    extra = sorted(set(records) - expected)
    if extra:
        raise ParseError(f"unexpected parameter {extra[0]}", records[extra[0]][1])
    return Classifier(kind, exs, head, n_classes)
