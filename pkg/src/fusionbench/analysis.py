"""Measurement tools: 2-component PCA, feature-subspace shift, head weight
statistics per stream, and accuracy-vs-strength curves."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .attacks import blur_images, fgsm, named_models
from .data import Dataset, normalize, normalized_bounds
from .errors import ConfigError, DegenerateDataError
from .models import FusionHead, predict


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # 2×D, rows orthonormal
    explained_variance: np.ndarray
    total_variance: float
    iterations: tuple = ()

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def _power_iteration(C, v, ortho, tol, max_iter, null):
    def _orth(w):
        for u in ortho:
            w = w - (w @ u) * u
        return w / np.linalg.norm(w)

    v = _orth(v)
    for it in range(1, max_iter + 1):
        w = C @ v
        # remaining spectrum is numerically zero: any orthogonal direction will do
        if np.linalg.norm(w) <= null:
            return v, it
        w = _orth(w)
        if np.linalg.norm(w - v) < tol:
            return w, it
        v = w
    return v, max_iter


def pca2(features, tol=1e-9, max_iter=10_000):
    """Top-2 principal axes by power iteration with deflation.

    Returns (PcaModel, N×2 projection). Each component's largest-magnitude
    entry is made positive.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ConfigError(f"pca2 needs at least 3 samples in an N×D matrix, got shape {X.shape}")
    if X.shape[1] < 2:
        raise ConfigError("pca2 needs at least 2 feature dimensions")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (len(X) - 1)
    total = float(np.trace(C))
    if total <= 1e-12 * max(1.0, float(np.abs(X).max())):
        raise DegenerateDataError("all points coincide; covariance is zero")
    v0 = np.random.default_rng(0).normal(size=C.shape[0])
    comps, variances, iters = [], [], []
    deflated = C.copy()
    for _ in range(2):
        v, it = _power_iteration(deflated, v0.copy(), comps, tol, max_iter, 1e-12 * total)
        lam = max(float(v @ C @ v), 0.0)
        deflated = deflated - lam * np.outer(v, v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        variances.append(lam)
        iters.append(it)
    model = PcaModel(mean, np.stack(comps), np.array(variances), total, tuple(iters))
    return model, model.transform(X)


@dataclass
class ShiftReport:
    displacement: dict
    spread: float
    score: float

    @property
    def mean_displacement(self):
        return float(np.mean(list(self.displacement.values())))

    def to_kv(self, prefix=""):
        lines = [f"{prefix}score={self.score:.6f}", f"{prefix}spread={self.spread:.6f}"]
        lines += [f"{prefix}displacement.{c}={d:.6f}" for c, d in sorted(self.displacement.items())]
        return "\n".join(lines) + "\n"


def subspace_shift(clean_feats, pert_feats, labels) -> ShiftReport:
    """Mean per-class centroid displacement over pooled clean within-class spread."""
    clean = np.asarray(clean_feats, dtype=np.float64)
    pert = np.asarray(pert_feats, dtype=np.float64)
    labels = np.asarray(labels)
    if clean.shape != pert.shape or len(labels) != len(clean):
        raise ConfigError(f"shape mismatch: clean {clean.shape}, perturbed {pert.shape}, labels {labels.shape}")
    disp, spreads = {}, []
    for c in np.unique(labels):
        m = labels == c
        disp[int(c)] = float(np.linalg.norm(pert[m].mean(axis=0) - clean[m].mean(axis=0)))
        spreads.append(np.sqrt(clean[m].var(axis=0).mean()))
    spread = float(np.mean(spreads))
    if spread < 1e-9:
        raise DegenerateDataError(f"clean within-class spread {spread:g} is degenerate")
    return ShiftReport(disp, spread, float(np.mean(list(disp.values()))) / spread)


@dataclass
class WeightSummary:
    avg_abs_fg: float
    avg_abs_bg: float

    def to_kv(self, prefix=""):
        return f"{prefix}avg_abs_fg={self.avg_abs_fg:.6f}\n{prefix}avg_abs_bg={self.avg_abs_bg:.6f}\n"


def weight_stream_summary(head: FusionHead) -> WeightSummary:
    return WeightSummary(float(np.abs(head.theta_fg).mean()), float(np.abs(head.theta_bg).mean()))


@dataclass
class RobustnessCurve:
    kind: str
    grid: list
    rows: dict = field(default_factory=dict)
    n_samples: int = 0
    source: str | None = None

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (header or {}).items():
            buf.write(f"# {k}={v}\n")
        buf.write(f"# axis={self.kind}\n# samples={self.n_samples}\n")
        if self.source:
            buf.write(f"# source={self.source}\n")
        buf.write(",".join(["strength", *self.rows]) + "\n")
        for j, g in enumerate(self.grid):
            buf.write(",".join([f"{g:g}", *(f"{self.rows[m][j]:.4f}" for m in self.rows)]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RobustnessCurve":
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line.strip():
                body.append(line.split(","))
        names = body[0][1:]
        grid = [float(r[0]) for r in body[1:]]
        rows = {n: [float(r[i + 1]) for r in body[1:]] for i, n in enumerate(names)}
        return cls(meta.get("axis", "epsilon"), grid, rows, int(meta.get("samples", 0)), meta.get("source"))


def robustness_curve(models, dataset: Dataset, kind: str, grid, source=None) -> RobustnessCurve:
    """Accuracy of every model at each perturbation strength.

    kind "sigma" blurs each test image inside its box; kind "epsilon" crafts
    FGSM against ``source`` (a name in ``models`` or a classifier). With no
    source, every model is attacked white-box. Perturbed inputs are made
    once per grid point and shared by all models.
    """
    named = named_models(models)
    grid = [float(g) for g in grid]
    if not grid or len(dataset) == 0 or not named:
        raise ConfigError("robustness_curve needs a non-empty grid, dataset and model list")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError(f"grid must be strictly increasing, got {grid}")
    if kind not in ("sigma", "epsilon"):
        raise ConfigError(f"unknown curve axis {kind!r}")
    meta = dataset.meta
    labels = dataset.labels
    src = dict(named).get(source, source) if isinstance(source, str) else source
    if kind == "epsilon" and isinstance(source, str) and src is source:
        raise ConfigError(f"source model {source!r} not among models")
    rows = {name: [] for name, _ in named}
    clean = dataset.normalized_images()
    bounds = normalized_bounds(meta.mean, meta.std)
    targets = dataset.batch().targets
    for g in grid:
        if kind == "sigma":
            x = normalize(blur_images(dataset.images, dataset.bboxes, g), meta.mean, meta.std)
            inputs = {name: x for name, _ in named}
        elif src is not None:
            x = fgsm(src, clean, targets, g, bounds).x_adv
            inputs = {name: x for name, _ in named}
        else:
            inputs = {name: fgsm(m, clean, targets, g, bounds).x_adv for name, m in named}
        for name, m in named:
            rows[name].append(float(np.mean(predict(m, inputs[name])[1] == labels)))
    src_name = None
    if kind == "epsilon":
        src_name = "white-box" if src is None else next((n for n, m in named if m is src), getattr(src, "name", None))
    return RobustnessCurve(kind, grid, rows, len(dataset), src_name)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def curve_svg(curve: RobustnessCurve, title="", width=480, height=320) -> str:
    """Standalone SVG polyline chart of a robustness curve."""
    ml, mr, mt, mb = 52, 130, 28, 40
    pw, ph = width - ml - mr, height - mt - mb
    g0, g1 = curve.grid[0], curve.grid[-1]
    span = (g1 - g0) or 1.0

    def px(g):
        return ml + (g - g0) / span * pw

    def py(a):
        return mt + (1 - a) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="16" font-size="13">{title}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for a in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<line x1="{ml - 4}" y1="{py(a):.1f}" x2="{ml}" y2="{py(a):.1f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{py(a) + 4:.1f}" text-anchor="end">{a:.2f}</text>')
    for g in curve.grid:
        out.append(f'<line x1="{px(g):.1f}" y1="{mt + ph}" x2="{px(g):.1f}" y2="{mt + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(g):.1f}" y="{mt + ph + 16}" text-anchor="middle">{g:g}</text>')
    axis = "σ" if curve.kind == "sigma" else "ε"
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">{axis}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" text-anchor="middle">accuracy</text>')
    for i, (name, accs) in enumerate(curve.rows.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(g):.1f},{py(a):.1f}" for g, a in zip(curve.grid, accs))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 10 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
