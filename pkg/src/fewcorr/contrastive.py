"""Prototype-contrastive loss shared by the three correlation branches.

Each branch reduces an episode to N (support prototype, query view) pairs,
one per class.  The loss for class n is the negative log of a softmax over
temperature-scaled cosine similarities, and the branches differ only in how
the embeddings were produced.  In the default `matched` pairing the
denominator pairs every class with its own query view; `fixed_query` is the
conventional alternative that holds one query view fixed against all
support prototypes.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return tau


def pair_similarities(pairs) -> Tensor:
    """Cosine similarity of each (support prototype, query view) pair."""
    if len(pairs) < 2:
        raise ShapeError("need at least 2 classes for a contrastive loss")
    return ad.stack([ad.cosine(s, q) for s, q in pairs])


def matched_pair_loss(similarities, tau: float) -> Tensor:
    """Mean over classes of -log softmax(sims / tau) at the class's own entry.

    Equals ln N when every similarity is equal, and is always positive.
    """
    tau = _check_tau(tau)
    sims = ad.as_tensor(similarities)
    if sims.ndim != 1 or sims.size < 2:
        raise ShapeError("matched_pair_loss expects a vector of >= 2 similarities")
    return -ad.log_softmax(sims / tau, axis=0).mean()


def fixed_query_loss(sim_matrix, tau: float) -> Tensor:
    """Alternative pairing: row n scores query view n against every prototype.

    sim_matrix[n, m] = sim(support prototype m, query view n); the target of
    row n is its diagonal entry.
    """
    tau = _check_tau(tau)
    mat = ad.as_tensor(sim_matrix)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError("fixed_query_loss expects a square similarity matrix")
    logp = ad.log_softmax(mat / tau, axis=1)
    return -ad.gather_rows(logp, np.arange(mat.shape[0])).mean()


def prototype_contrastive_loss(pairs, tau: float, pairing: str = "matched") -> Tensor:
    """Loss over N class-paired (support prototype, query view) embeddings."""
    if pairing == "matched":
        return matched_pair_loss(pair_similarities(pairs), tau)
    if pairing == "fixed_query":
        if len(pairs) < 2:
            raise ShapeError("need at least 2 classes for a contrastive loss")
        rows = [ad.stack([ad.cosine(s, q) for s, _ in pairs]) for _, q in pairs]
        return fixed_query_loss(ad.stack(rows), tau)
    raise ConfigError(f"unknown pairing {pairing!r}")
