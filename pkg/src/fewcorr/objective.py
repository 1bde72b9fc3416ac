"""Anchor cross-entropy over the base classes and the weighted total loss.

The correlation branches only ever compare episode images to each other;
the anchor head ties features to the global base-class labels so the
backbone cannot drift into episode-specific solutions.  The total loss is
a fixed linear combination: CE plus alpha/beta/gamma times the three
branch losses (defaults 1.0 : 0.5 : 0.25, preserving a 4:2:1 balance).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError


@dataclass
class ClassifierHead:
    """Fully connected layer over average-pooled features."""

    weight: Tensor   # (n_classes, C)
    bias: Tensor     # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def init_head(n_classes: int, channels: int, rng: np.random.Generator) -> ClassifierHead:
    if n_classes < 2:
        raise ConfigError(f"classifier head needs >= 2 classes, got {n_classes}")
    bound = np.sqrt(1.0 / channels)
    return ClassifierHead(
        weight=ad.parameter(rng.uniform(-bound, bound, size=(n_classes, channels))),
        bias=ad.parameter(rng.uniform(-bound, bound, size=(n_classes,))),
    )


def loss_ce(feature_maps, labels, head: ClassifierHead) -> Tensor:
    """Softmax cross-entropy of avg-pooled features against global labels.

    `labels` are base-class row indices into the head, not episode-local
    ones; a single (H, W, C) map with a scalar label also works.
    """
    f = ad.as_tensor(feature_maps)
    if f.ndim == 3:
        f = f.reshape((1,) + f.shape)
        labels = np.ravel(labels)
    if f.ndim != 4:
        raise ShapeError(f"expected (B, H, W, C) feature maps, got shape {f.shape}")
    idx = np.asarray(labels, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != f.shape[0]:
        raise ShapeError(f"{f.shape[0]} maps but {idx.shape} labels")
    if idx.size and (idx.min() < 0 or idx.max() >= head.n_classes):
        bad = idx[(idx < 0) | (idx >= head.n_classes)][0]
        raise DataError(f"label {bad} outside the {head.n_classes} base classes")
    feats = ad.avg_pool_spatial(f)                                   # (B, C)
    logits = ad.einsum2("bc,kc->bk", feats, head.weight) + head.bias
    picked = ad.gather_rows(ad.log_softmax(logits, axis=1), idx)
    return -picked.mean()


@dataclass
class LossBundle:
    """The four loss terms, their weights, and the combined objective."""

    l_ce: Tensor
    l_sc: Tensor
    l_cc: Tensor
    l_pc: Tensor
    l_total: Tensor
    alpha: float
    beta: float
    gamma: float

    def values(self) -> dict:
        return {"l_ce": self.l_ce.item(), "l_sc": self.l_sc.item(),
                "l_cc": self.l_cc.item(), "l_pc": self.l_pc.item(),
                "l_total": self.l_total.item()}


def total_loss(l_ce, l_sc, l_cc, l_pc,
               alpha: float, beta: float, gamma: float) -> LossBundle:
    """l_total = l_ce + alpha*l_sc + beta*l_cc + gamma*l_pc."""
    for name, v in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if v < 0:
            raise ConfigError(f"loss weight {name} must be non-negative, got {v}")
    l_ce, l_sc = ad.as_tensor(l_ce), ad.as_tensor(l_sc)
    l_cc, l_pc = ad.as_tensor(l_cc), ad.as_tensor(l_pc)
    total = l_ce + l_sc * float(alpha) + l_cc * float(beta) + l_pc * float(gamma)
    return LossBundle(l_ce=l_ce, l_sc=l_sc, l_cc=l_cc, l_pc=l_pc, l_total=total,
                      alpha=float(alpha), beta=float(beta), gamma=float(gamma))
