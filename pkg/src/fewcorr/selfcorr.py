"""Self-correlation branch: per-channel spatial attention over a feature map.

A map attends to its own activations: softmax over the spatial positions of
each channel yields an attention distribution, and the attention-weighted
spatial pool gives a per-image embedding.  Class prototypes are plain
averages of embeddings and feed the shared contrastive loss.
"""
from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import prototype_contrastive_loss
from .errors import ConfigError, ShapeError


def self_attention_map(feature_map, axis: str = "spatial") -> Tensor:
    """Attention weights with the same shape as the map.

    axis="spatial" (default): softmax over the H*W positions of each channel,
    so each channel's weights form a distribution over positions.
    axis="channel": softmax over channels at each position instead.
    Accepts a single (H, W, C) map or a (B, H, W, C) batch.
    """
    f = ad.as_tensor(feature_map)
    single = f.ndim == 3
    if single:
        f = f.reshape((1,) + f.shape)
    if f.ndim != 4:
        raise ShapeError(f"expected a (H, W, C) map or (B, H, W, C) batch, got {f.shape}")
    b, h, w, c = f.shape
    if axis == "spatial":
        a = ad.softmax(f.reshape(b, h * w, c), axis=1).reshape(b, h, w, c)
    elif axis == "channel":
        a = ad.softmax(f, axis=3)
    else:
        raise ConfigError(f"unknown attention axis {axis!r}")
    return a[0] if single else a


def self_embedding(feature_map, attention) -> Tensor:
    """Attention-weighted spatial pool: z[c] = (1/HW) sum_x A[x,c] * F[x,c].

    The 1/HW factor rescales uniformly and cancels under cosine similarity;
    it is kept so the embedding magnitude tracks the plain spatial mean.
    """
    f, a = ad.as_tensor(feature_map), ad.as_tensor(attention)
    if f.shape != a.shape:
        raise ShapeError(f"map {f.shape} and attention {a.shape} differ")
    if f.ndim == 3:
        h, w, _ = f.shape
        return (a * f).sum(axis=(0, 1)) / float(h * w)
    if f.ndim == 4:
        _, h, w, _ = f.shape
        return (a * f).sum(axis=(1, 2)) / float(h * w)
    raise ShapeError("self_embedding expects rank-3 or rank-4 input")


def prototype_average(views) -> Tensor:
    """Componentwise mean of K embedding vectors (K = 1 is the identity)."""
    views = list(views)
    if not views:
        raise ShapeError("prototype_average needs at least one embedding")
    return ad.stack(views).mean(axis=0)


def loss_sc(pairs, tau1: float, pairing: str = "matched") -> Tensor:
    """Contrastive loss over N class-paired (support, query) prototypes."""
    return prototype_contrastive_loss(pairs, tau1, pairing)
