"""Bounding-box Gaussian blur and FGSM, plus source->target transfer evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .data import Dataset, normalized_bounds
from .errors import ConfigError
from .models import Classifier, predict
from .tensor import Tensor


@dataclass(frozen=True)
class BlurConfig:
    sigma: float = 0.0
    region: str = "bbox"

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.region not in ("bbox", "full_image"):
            raise ConfigError(f"unknown blur region {self.region!r}")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.0
    source: str = "foreground"
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")


@dataclass
class AdversarialExample:
    x_adv: np.ndarray
    eta: np.ndarray
    source: str
    epsilon: float


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D taps over [-ceil(3 sigma), ceil(3 sigma)]."""
    sigma = max(float(sigma), 0.0)
    if sigma < 0.01:
        return np.ones(1)
    r = int(np.ceil(3 * sigma))
    i = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(i**2) / (2 * sigma**2))
    return w / w.sum()


def _conv_axis(a, k, axis):
    r = len(k) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    mode = "reflect" if a.shape[axis] > 1 else "edge"
    padded = np.pad(a, pad, mode=mode)
    return sliding_window_view(padded, len(k), axis=axis) @ k


def blur_region(image: np.ndarray, bbox, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of the C×H×W image inside ``bbox`` = (row, col, h, w).

    The crop is reflect-padded at its own border, so pixels outside the box
    are neither read nor written.
    """
    out = image.copy()
    r0, c0, h, w = (int(v) for v in bbox)
    k = gaussian_kernel(sigma)
    if h <= 0 or w <= 0 or len(k) == 1:
        return out
    crop = image[:, r0 : r0 + h, c0 : c0 + w].astype(np.float64)
    crop = _conv_axis(_conv_axis(crop, k, axis=2), k, axis=1)
    out[:, r0 : r0 + h, c0 : c0 + w] = crop.astype(image.dtype)
    return out


def blur_images(images: np.ndarray, bboxes, sigma: float, region="bbox") -> np.ndarray:
    cfg = BlurConfig(sigma, region)
    H, W = images.shape[2:]
    out = np.empty_like(images)
    for i, img in enumerate(images):
        box = bboxes[i] if cfg.region == "bbox" else (0, 0, H, W)
        out[i] = blur_region(img, box, cfg.sigma)
    return out


def input_gradient(model, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the input batch."""
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    loss = T.softmax_cross_entropy(model(xt), targets)
    return T.grad(loss, [xt])[0]


def fgsm(model, x: np.ndarray, targets: np.ndarray, epsilon: float, bounds=None, source="model", chunk=256):
    """x_adv = clamp(x + epsilon * sign(grad_x J)) with sign(0) = 0.

    ``model`` maps an input Tensor to logits; classifiers run in eval mode.
    The per-sample gradients are independent under eval-mode batchnorm, so
    chunking does not change the result.
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    eta = np.empty_like(x)
    for i in range(0, len(x), chunk):
        g = input_gradient(model, x[i : i + chunk], targets[i : i + chunk])
        eta[i : i + chunk] = x.dtype.type(epsilon) * np.sign(g)
    x_adv = x + eta
    if bounds is not None:
        x_adv = np.clip(x_adv, bounds[0], bounds[1]).astype(x.dtype)
    return AdversarialExample(x_adv, eta, source, float(epsilon))


def named_models(models):
    """Normalize a dict, list of classifiers, or (name, model) pairs to pairs."""
    if isinstance(models, dict):
        return list(models.items())
    return [m if isinstance(m, tuple) else (m.name, m) for m in models]


def transfer_attack(source: Classifier, targets, dataset: Dataset, epsilon: float, include_source=True):
    """Craft FGSM once against ``source`` and score every target on it.

    ``targets`` is a list of classifiers, (name, classifier) pairs, or a dict.
    Returns [(name, accuracy)] in target order; the source is prepended when
    absent and ``include_source`` is set.
    """
    named = named_models(targets)
    if include_source and not any(m is source for _, m in named):
        named = [(source.name, source)] + named
    for name, m in named:
        if m.n_classes != source.n_classes or m.n_classes != dataset.meta.n_classes:
            raise ConfigError(f"class count mismatch between {source.name!r} and {name!r}")
    batch = dataset.batch()
    adv = fgsm(source, batch.images, batch.targets, epsilon, normalized_bounds(dataset.meta.mean, dataset.meta.std), source.name)
    return [(name, float(np.mean(predict(m, adv.x_adv)[1] == batch.labels))) for name, m in named]
