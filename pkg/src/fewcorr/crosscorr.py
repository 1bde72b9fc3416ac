"""Cross-correlation branch: 4D cosine tensor between two feature maps.

Every pair of positions (one per map) gets the cosine similarity of its
channel vectors; softmax over one side's positions at a fixed position of
the other side, averaged over the fixed side, gives a spatial attention map
that sums to 1.  Attention-weighted pooling then yields a pair of
context-conditioned embeddings, one per map.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import prototype_contrastive_loss
from .errors import ConfigError, ShapeError

# keeps sqrt away from 0 for all-zero channel columns; positions this small
# are masked to similarity 0 anyway, so gradients there are zero too
_NORM_FLOOR = 1e-30


def unit_positions(feature_map) -> Tensor:
    """L2-normalize the channel vector at every position; zero stays zero."""
    f = ad.as_tensor(feature_map)
    if f.ndim not in (3, 4):
        raise ShapeError("unit_positions expects rank-3 or rank-4 input")
    sq = (f * f).sum(axis=-1, keepdims=True)
    mask = Tensor((sq.data > _NORM_FLOOR).astype(np.float64))
    return f / ad.sqrt(ad.clamp_min(sq, _NORM_FLOOR)) * mask


def correlation_tensor(f_q, f_s) -> Tensor:
    """(H, W, H, W) tensor of cosines; [x_q, x_s] compares the two positions.

    Positions whose channel vector has zero norm contribute similarity 0
    instead of erroring, since ReLU features can go entirely dark.
    """
    f_q, f_s = ad.as_tensor(f_q), ad.as_tensor(f_s)
    if f_q.ndim != 3 or f_q.shape != f_s.shape:
        raise ShapeError(f"expected two equal (H, W, C) maps, got {f_q.shape} and {f_s.shape}")
    return ad.einsum2("abc,dec->abde", unit_positions(f_q), unit_positions(f_s))


def cross_attention_map(cos, gamma: float):
    """(M_q, M_s) from a correlation tensor.

    M_q(x_q) averages, over support positions x_s, the softmax over query
    positions of cos[:, :, x_s] / gamma, so it sums to 1 over query
    positions; M_s swaps the roles.
    """
    gamma = float(gamma)
    if gamma <= 0:
        raise ConfigError(f"cross-attention temperature must be positive, got {gamma}")
    cos = ad.as_tensor(cos)
    if cos.ndim != 4:
        raise ShapeError("cross_attention_map expects a rank-4 correlation tensor")
    hq, wq, hs, ws = cos.shape
    flat = cos.reshape(hq * wq, hs * ws) / gamma
    m_q = ad.softmax(flat, axis=0).mean(axis=1).reshape(hq, wq)
    m_s = ad.softmax(flat, axis=1).mean(axis=0).reshape(hs, ws)
    return m_q, m_s


def cross_embedding(feature_map, attention) -> Tensor:
    """c[ch] = (1/HW) sum_x M(x) * F[x, ch], differentiable through both."""
    f, m = ad.as_tensor(feature_map), ad.as_tensor(attention)
    if f.ndim != 3 or m.ndim != 2 or f.shape[:2] != m.shape:
        raise ShapeError(f"map {f.shape} does not match attention {m.shape}")
    h, w, _ = f.shape
    return ad.einsum2("abc,ab->c", f, m) / float(h * w)


def pair_embeddings(f_queries, f_supports, gamma: float):
    """Embeddings for every (query, support) pair in one batched pass.

    f_queries: (NQ, H, W, C), f_supports: (NS, H, W, C).  Returns
    (c_q, c_s), both (NQ, NS, C): c_q[q, s] is query q attended in support
    s's context and c_s[q, s] is support s attended in query q's context.
    """
    gamma = float(gamma)
    if gamma <= 0:
        raise ConfigError(f"cross-attention temperature must be positive, got {gamma}")
    fq, fs = ad.as_tensor(f_queries), ad.as_tensor(f_supports)
    if fq.ndim != 4 or fs.ndim != 4 or fq.shape[1:] != fs.shape[1:]:
        raise ShapeError("pair_embeddings expects two (B, H, W, C) batches "
                         "with matching map shapes")
    nq, h, w, c = fq.shape
    ns = fs.shape[0]
    hw = h * w
    cos = ad.einsum2("qabc,sdec->qsabde", unit_positions(fq), unit_positions(fs))
    flat = cos.reshape(nq, ns, hw, hw) / gamma
    m_q = ad.softmax(flat, axis=2).mean(axis=3)          # (NQ, NS, HW)
    m_s = ad.softmax(flat, axis=3).mean(axis=2)          # (NQ, NS, HW)
    fq_flat = fq.reshape(nq, hw, c)
    fs_flat = fs.reshape(ns, hw, c)
    c_q = ad.einsum2("qsx,qxc->qsc", m_q, fq_flat) / float(hw)
    c_s = ad.einsum2("qsx,sxc->qsc", m_s, fs_flat) / float(hw)
    return c_q, c_s


def loss_cc(pairs, tau2: float, pairing: str = "matched") -> Tensor:
    """Contrastive loss over N class-paired cross-embedding prototypes."""
    return prototype_contrastive_loss(pairs, tau2, pairing)
