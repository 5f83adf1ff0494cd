"""Mini-batch SGD for extractors and heads, the foreground-penalized joint
objective, and FGSM adversarial retraining."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import fgsm
from .data import Dataset, normalized_bounds, one_hot
from .errors import ConfigError
from .models import Classifier, FusionHead, forward_features, predict
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    loss: str = "cross_entropy"
    mode: str = "head_only"

    def validate(self, clf: Classifier | None = None):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.mode not in ("full", "head_only"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unknown loss {self.loss!r}")
        if clf is not None:
            frozen = [ex.frozen for ex in clf.extractors.values()]
            if self.mode == "head_only" and not all(frozen):
                raise ConfigError("head_only training needs frozen extractors")


@dataclass
class RegConfig:
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_csv(self, extra_header: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in {**self.meta, **(extra_header or {})}.items():
            buf.write(f"# {k}={v}\n")
        buf.write("epoch,train_loss,train_acc,test_acc\n")
        for i, row in enumerate(zip(self.train_loss, self.train_acc, self.test_acc), 1):
            buf.write(f"{i},{row[0]:.6f},{row[1]:.4f},{row[2]:.4f}\n")
        return buf.getvalue()


class SGD:
    """Heavy-ball SGD: v <- mu*v + g; p <- p - lr*v (in place)."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= p.data.dtype.type(self.momentum)
            v += p.grad
            p.data -= p.data.dtype.type(self.lr) * v


def cross_entropy_loss(logits, targets, clf):
    return T.softmax_cross_entropy(logits, targets)


def regularized_joint_loss(logits, targets, head: FusionHead, alpha: float):
    """Cross-entropy + alpha * sum(theta_fg ** 2); bias and theta_bg unpenalized."""
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    if not isinstance(head, FusionHead):
        raise ConfigError("regularized loss needs a FusionHead")
    ce = T.softmax_cross_entropy(logits, targets)
    theta_fg = head.W[head.fg_rows]
    return ce + T.mul(T.tsum(T.mul(theta_fg, theta_fg)), alpha)


def evaluate(clf: Classifier, dataset: Dataset | None) -> float:
    if dataset is None or len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(clf, dataset.normalized_images())[1] == dataset.labels))


def _fit(clf, train_set, cfg, loss_fn, test_set=None, batch_hook=None, meta=None):
    cfg.validate(clf)
    if train_set.meta.n_classes != clf.n_classes:
        raise ConfigError(f"dataset has {train_set.meta.n_classes} classes, classifier {clf.n_classes}")
    rng = np.random.default_rng(cfg.seed)
    x_all = train_set.normalized_images()
    t_all = one_hot(train_set.labels, clf.n_classes)
    n = len(train_set)
    full = cfg.mode == "full"
    cached = None if (full or batch_hook) else forward_features(clf, x_all)
    opt = SGD(clf.parameters(), cfg.lr, cfg.momentum)
    hist = TrainHistory(meta={**asdict(cfg), **(meta or {})})

    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        tot_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if full and len(idx) < 2:
                continue  # batchnorm needs two samples
            tb = t_all[idx]
            opt.zero_grad()
            if cached is not None:
                logits = clf.head_logits({s: Tensor(f[idx], dtype=f.dtype) for s, f in cached.items()})
            else:
                xb = x_all[idx]
                if batch_hook is not None:
                    xb = batch_hook(clf, xb, tb)
                logits = clf.logits(Tensor(xb, dtype=xb.dtype), training=full)
            loss = loss_fn(logits, tb, clf)
            T.backward(loss)
            opt.step()
            tot_loss += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == train_set.labels[idx]))
            seen += len(idx)
        hist.train_loss.append(tot_loss / max(seen, 1))
        hist.train_acc.append(correct / max(seen, 1))
        hist.test_acc.append(evaluate(clf, test_set))
    return clf, hist


def train(clf: Classifier, train_set: Dataset, cfg: TrainConfig, test_set: Dataset | None = None):
    """Plain cross-entropy training; mutates and returns ``clf`` with its history.

    In head_only mode the frozen extractors are run once over the training
    set and the head trains on the cached features.
    """
    return _fit(clf, train_set, cfg, cross_entropy_loss, test_set)


def train_regularized_joint(clf: Classifier, train_set: Dataset, cfg: TrainConfig, alpha: float, test_set=None):
    if clf.kind != "joint":
        raise ConfigError(f"regularized training needs a joint classifier, got {clf.kind}")
    if not all(ex.frozen for ex in clf.extractors.values()):
        raise ConfigError("regularized training needs frozen extractors")
    RegConfig(alpha)

    def loss_fn(logits, targets, c):
        return regularized_joint_loss(logits, targets, c.head, alpha)

    return _fit(clf, train_set, cfg, loss_fn, test_set, meta={"alpha": alpha})


def adversarial_retrain(clf: Classifier, train_set: Dataset, eps_train: float, cfg: TrainConfig, test_set=None):
    """Each mini-batch keeps its first half clean and replaces the second
    half with FGSM examples crafted against the current parameters.

    At eps_train == 0 in head_only mode the crafted half equals the clean
    half exactly, so the cached-feature path of :func:`train` is used.
    """
    if eps_train < 0:
        raise ConfigError(f"eps_train must be non-negative, got {eps_train}")
    bounds = normalized_bounds(train_set.meta.mean, train_set.meta.std)

    def mix(c, xb, tb):
        half = len(xb) // 2
        adv = fgsm(c, xb[half:], tb[half:], eps_train, bounds, c.name).x_adv
        return np.concatenate([xb[:half], adv])

    hook = None if (eps_train == 0 and cfg.mode == "head_only") else mix
    return _fit(clf, train_set, cfg, cross_entropy_loss, test_set, hook, meta={"eps_train": eps_train})
