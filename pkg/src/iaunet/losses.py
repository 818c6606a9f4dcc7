"""Segmentation and metric-learning objectives.

Binary segmentation uses BCE-on-logits plus soft Dice on the sigmoid; the
multiclass path swaps BCE for cross-entropy and Dice on the softmax. The
identity branch uses a margin triplet loss on Euclidean distances. The total
objective is ``seg + lambda * triplet``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DataValidationError, DimensionError
from .nn import functional as F
from .nn.tensor import Tensor, as_tensor, record


@dataclass
class LossConfig:
    margin: float = 1.0
    lam: float = 0.5
    dice_smooth: float = 1.0
    mode: str = "binary"

    def __post_init__(self):
        if self.margin < 0 or self.lam < 0:
            raise ConfigurationError("margin and lambda must be non-negative")
        if self.dice_smooth <= 0:
            raise ConfigurationError("dice_smooth must be positive")
        if self.mode not in ("binary", "multiclass"):
            raise ConfigurationError(f"unknown loss mode {self.mode!r}")


def _distances(a, b):
    diff = a - b
    return diff, np.sqrt((diff * diff).sum(axis=1))


def triplet_loss(e_a, e_p, e_n, margin=1.0):
    """Batch mean of ``max(|a - p| - |a - n| + margin, 0)``."""
    if not (e_a.shape == e_p.shape == e_n.shape) or e_a.ndim != 2:
        raise DimensionError(
            f"triplet_loss: embedding shapes differ: {e_a.shape}, {e_p.shape}, {e_n.shape}")
    a, p, n = e_a.data, e_p.data, e_n.data
    dap_vec, dap = _distances(a, p)
    dan_vec, dan = _distances(a, n)
    hinge = dap - dan + margin
    active = hinge > 0
    count = a.shape[0]
    loss = np.asarray(np.where(active, hinge, 0.0).mean(), dtype=a.dtype)

    def bw(g):
        if not active.any():
            # no triplet violates the margin: skip the embedding branches entirely
            return None, None, None
        # unit directions; zero distance has zero subgradient
        with np.errstate(invalid="ignore", divide="ignore"):
            u_ap = np.where(dap[:, None] > 0, dap_vec / dap[:, None], 0.0)
            u_an = np.where(dan[:, None] > 0, dan_vec / dan[:, None], 0.0)
        w = (g / count) * active[:, None]
        return w * (u_ap - u_an), -w * u_ap, w * u_an

    return record("triplet_loss", loss, (e_a, e_p, e_n), bw)


def bce_with_logits(logits, target):
    """Mean binary cross-entropy on logits, log-sum-exp form."""
    z = logits.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    if t.shape != z.shape:
        raise DimensionError(f"bce_with_logits: target {t.shape} vs logits {z.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean(), dtype=z.dtype)
    count = z.size

    def bw(g):
        return ((expit(z) - t) * (g / count),)

    return record("bce_with_logits", loss, (logits,), bw)


def one_hot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    if labels.ndim == 4 and labels.shape[1] == 1:
        labels = labels[:, 0]
    lab = labels.astype(np.int64)
    if not np.array_equal(lab, labels) or lab.min() < 0 or lab.max() >= num_classes:
        raise DataValidationError(f"class labels must be integers in [0, {num_classes})")
    out = np.zeros((lab.shape[0], num_classes) + lab.shape[1:], dtype=dtype)
    np.put_along_axis(out, lab[:, None], 1.0, axis=1)
    return out


def _dice_grad(t, inter, total, eps, k):
    denom = total + eps
    return (-2.0 * t / denom + (2.0 * inter + eps) / (denom * denom)) / k


def dice_loss(probs, target, eps=1.0, multiclass=False):
    """Soft Dice loss ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``.

    Sums run over the whole batch. In multiclass mode ``probs`` is
    ``[N,K,H,W]``, ``target`` is a one-hot array of the same shape, and the
    loss is averaged over classes.
    """
    p = probs.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if t.shape != p.shape:
        raise DimensionError(f"dice_loss: target {t.shape} vs probs {p.shape}")
    if multiclass:
        axes = (0,) + tuple(range(2, p.ndim))
        k = p.shape[1]
        shape = (1, k) + (1,) * (p.ndim - 2)
        inter = (p * t).sum(axis=axes).reshape(shape)
        total = (p.sum(axis=axes) + t.sum(axis=axes)).reshape(shape)
    else:
        k = 1
        inter = (p * t).sum()
        total = p.sum() + t.sum()
    per_class = 1.0 - (2.0 * inter + eps) / (total + eps)
    loss = np.asarray(np.mean(per_class), dtype=p.dtype)

    def bw(g):
        return (g * _dice_grad(t, inter, total, eps, k),)

    return record("dice_loss", loss, (probs,), bw)


def cross_entropy(logits, target):
    """Mean negative log-softmax of the true class; ``target`` holds class indices."""
    z = logits.data
    k = z.shape[1]
    onehot = one_hot(target, k, dtype=z.dtype)
    if onehot.shape != z.shape:
        raise DimensionError(f"cross_entropy: target shape does not match logits {z.shape}")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    count = z.size // k
    loss = np.asarray(-(logp * onehot).sum() / count, dtype=z.dtype)

    def bw(g):
        return ((np.exp(logp) - onehot) * (g / count),)

    return record("cross_entropy", loss, (logits,), bw)


def segmentation_loss(logits, mask, cfg):
    if cfg.mode == "binary":
        m = np.asarray(mask, dtype=logits.dtype)
        return bce_with_logits(logits, m) + dice_loss(F.sigmoid(logits), m, cfg.dice_smooth)
    onehot = one_hot(mask, logits.shape[1], dtype=logits.dtype)
    return (cross_entropy(logits, mask)
            + dice_loss(F.softmax(logits, axis=1), onehot, cfg.dice_smooth, multiclass=True))


def total_loss(seg_logits, mask, e_a, e_p, e_n, cfg):
    """Return ``(total, seg, tri)``; ``total`` is ``seg`` itself when lambda is 0."""
    seg = segmentation_loss(seg_logits, mask, cfg)
    tri = triplet_loss(e_a, e_p, e_n, cfg.margin)
    if cfg.lam == 0:
        return seg, seg, tri
    return seg + as_tensor(tri) * cfg.lam, seg, tri
