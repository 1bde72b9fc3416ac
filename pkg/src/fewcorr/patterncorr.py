"""Pattern-correlation branch: a mixture model over episode feature vectors.

Every spatial position of every map in the episode contributes one sample.
Component densities decay exponentially with squared Euclidean distance
(concentration kappa); fitting alternates responsibilities (inner step)
with mean/weight updates (outer step).  Gradients flow through the final
inner/outer round only: earlier rounds run detached, a first-order
treatment that keeps the fit cheap.  A per-image embedding is the spatial
pool of each position's soft reconstruction from the component means, so
two images sharing patterns land near each other even though the means are
episode-global.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import prototype_contrastive_loss
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

_DEAD_FLOOR = 1e-12      # total responsibility below this marks a dead component
_LOG_FLOOR = 1e-300      # keeps log(weight) finite when a weight underflows


@dataclass
class SampleSet:
    """Flattened position vectors of all maps in one episode."""

    values: Tensor          # (n_images * hw, C), image-major
    image_ids: np.ndarray   # (n_samples,) owning-image index
    hw: int                 # positions per image
    n_images: int

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def rows_for(self, image: int) -> slice:
        if not 0 <= image < self.n_images:
            raise ShapeError(f"image index {image} outside 0..{self.n_images - 1}")
        return slice(image * self.hw, (image + 1) * self.hw)


def collect_samples(maps) -> SampleSet:
    """Flatten a (B, H, W, C) batch of maps into an image-major SampleSet."""
    m = ad.as_tensor(maps)
    if m.ndim != 4:
        raise ShapeError("collect_samples expects a (B, H, W, C) batch")
    b, h, w, c = m.shape
    return SampleSet(values=m.reshape(b * h * w, c),
                     image_ids=np.repeat(np.arange(b), h * w),
                     hw=h * w, n_images=b)


@dataclass
class MixtureState:
    """Fitted component means/weights plus the final responsibilities."""

    means: Tensor              # (K_c, C)
    weights: Tensor            # (K_c,), non-negative, sums to 1
    responsibilities: Tensor   # (n_samples, K_c), rows sum to 1
    kappa: float
    k: int
    sample_set: SampleSet
    trace: list = field(default_factory=list)  # detached (means, weights) per round


def component_likelihood(sample, mean, kappa: float) -> Tensor:
    """exp(-kappa * ||sample - mean||^2); the normalizer is fixed to 1.

    Any shared positive normalizer cancels in the responsibilities, so it
    carries no information and is dropped.
    """
    if kappa <= 0:
        raise ConfigError(f"concentration must be positive, got {kappa}")
    s, m = ad.as_tensor(sample), ad.as_tensor(mean)
    if s.shape != m.shape:
        raise ShapeError(f"sample {s.shape} and mean {m.shape} differ")
    d = s - m
    return ad.exp((d * d).sum() * -float(kappa))


def responsibilities(likelihoods, weights=None) -> Tensor:
    """Row-normalized posterior weights P_ik = w_k p_ik / sum_k' w_k' p_ik'.

    Rows whose numerator underflows to all-zero fall back to a uniform row
    (logged); the fitting loop itself works in the log domain and never
    trips this.
    """
    like = ad.as_tensor(likelihoods)
    if like.ndim != 2:
        raise ShapeError("responsibilities expects an (n_samples, K_c) matrix")
    if np.any(like.data < 0):
        raise ShapeError("likelihoods must be non-negative")
    k = like.shape[1]
    if weights is not None:
        w = ad.as_tensor(weights)
        if w.shape != (k,):
            raise ShapeError(f"weights shape {w.shape} does not match {k} components")
        num = like * w
    else:
        num = like
    den = num.sum(axis=1, keepdims=True)
    zero_rows = np.flatnonzero(den.data.ravel() <= 0.0)
    p = num / ad.clamp_min(den, _LOG_FLOOR)
    if zero_rows.size:
        logger.warning("responsibilities: %d all-zero rows after underflow, "
                       "falling back to uniform", zero_rows.size)
        uniform = Tensor(np.full((zero_rows.size, k), 1.0 / k))
        p = ad.row_replace(p, zero_rows, uniform)
    return p


def update_means(resp, samples) -> Tensor:
    """Responsibility-weighted sample means: mu_k = sum_i P_ik s_i / sum_i P_ik.

    A component whose total responsibility collapses below 1e-12 is reseeded
    to the sample the current mixture reconstructs worst.
    """
    p, s = ad.as_tensor(resp), ad.as_tensor(samples)
    if p.ndim != 2 or s.ndim != 2 or p.shape[0] != s.shape[0]:
        raise ShapeError(f"responsibilities {p.shape} do not match samples {s.shape}")
    k = p.shape[1]
    col = p.sum(axis=0)
    mu = ad.einsum2("ik,ic->kc", p, s) / ad.clamp_min(col, _DEAD_FLOOR).reshape(k, 1)
    dead = np.flatnonzero(col.data < _DEAD_FLOOR)
    if dead.size:
        worst = _worst_reconstructed(p.data, mu.data, s.data, dead.size)
        mu = ad.row_replace(mu, dead, s[worst])
    return mu


def _worst_reconstructed(p: np.ndarray, mu: np.ndarray, s: np.ndarray,
                         count: int) -> np.ndarray:
    recon = p @ mu
    err = ((s - recon) ** 2).sum(axis=1)
    return np.argsort(-err, kind="stable")[:count]


def _distance_weighted_init(data: np.ndarray, k: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point-flavored seeding: each next mean is drawn with
    probability proportional to squared distance from the chosen set."""
    n = data.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((data - data[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))        # all remaining mass coincides
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((data - data[idx]) ** 2).sum(axis=1))
    return data[chosen].copy()


def _round_np(data, mu, w, kappa, use_weights, k):
    """One detached inner+outer round in plain numpy, log-domain stable."""
    d2 = _sq_distances(data, mu)
    logits = -kappa * d2
    if use_weights:
        logits = logits + np.log(np.maximum(w, _LOG_FLOOR))
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    col = p.sum(axis=0)
    mu_new = (p.T @ data) / np.maximum(col, _DEAD_FLOOR)[:, None]
    dead = np.flatnonzero(col < _DEAD_FLOOR)
    w_new = p.mean(axis=0)
    if dead.size:
        worst = _worst_reconstructed(p, mu_new, data, dead.size)
        mu_new[dead] = data[worst]
        w_new[dead] = 1.0 / k
        w_new = w_new / w_new.sum()
    return p, mu_new, w_new


def _sq_distances(data: np.ndarray, mu: np.ndarray) -> np.ndarray:
    d2 = ((data * data).sum(axis=1)[:, None] + (mu * mu).sum(axis=1)[None, :]
          - 2.0 * data @ mu.T)
    return np.maximum(d2, 0.0)


def fit_mixture(samples, k: int, kappa: float, iters: int,
                rng: np.random.Generator | None = None,
                init_means: np.ndarray | None = None,
                use_weights: bool = True, trace: bool = False) -> MixtureState:
    """Alternate responsibilities and mean/weight updates for `iters` rounds.

    All rounds but the last run detached; the final round is recorded so
    gradients reach the samples through one inner and one outer step.
    `init_means` overrides the distance-weighted seeding (useful for
    finite-difference checks, which need initialization independent of the
    perturbed inputs).
    """
    sset = samples if isinstance(samples, SampleSet) else _as_sample_set(samples)
    data = sset.values.data
    n, c = data.shape
    if k < 1 or n < k:
        raise ConfigError(f"need at least k={k} samples, got {n}")
    if iters < 1:
        raise ConfigError("iters must be at least 1")
    if kappa <= 0:
        raise ConfigError(f"concentration must be positive, got {kappa}")
    if init_means is not None:
        mu = np.array(init_means, dtype=np.float64)
        if mu.shape != (k, c):
            raise ConfigError(f"init_means shape {mu.shape}, expected {(k, c)}")
    else:
        if rng is None:
            raise ConfigError("fit_mixture needs an rng when init_means is not given")
        mu = _distance_weighted_init(data, k, rng)
    w = np.full(k, 1.0 / k)
    rounds = [(mu.copy(), w.copy())]
    for _ in range(iters - 1):
        _, mu, w = _round_np(data, mu, w, float(kappa), use_weights, k)
        rounds.append((mu.copy(), w.copy()))

    # final round, recorded for differentiation; mu/w enter as constants
    s_t = sset.values
    mu_prev = Tensor(mu)
    d2 = _attached_sq_distances(s_t, mu_prev)
    logits = d2 * -float(kappa)
    if use_weights:
        logits = logits + Tensor(np.log(np.maximum(w, _LOG_FLOOR)))
    p = ad.softmax(logits, axis=1)
    col = p.sum(axis=0)
    mu_t = ad.einsum2("ik,ic->kc", p, s_t) / ad.clamp_min(col, _DEAD_FLOOR).reshape(k, 1)
    w_t = p.mean(axis=0)
    dead = np.flatnonzero(col.data < _DEAD_FLOOR)
    if dead.size:
        worst = _worst_reconstructed(p.data, mu_t.data, data, dead.size)
        mu_t = ad.row_replace(mu_t, dead, s_t[worst])
        w_t = ad.row_replace(w_t, dead, Tensor(np.full(dead.size, 1.0 / k)))
        w_t = w_t / w_t.sum()
    if trace:
        rounds.append((mu_t.data.copy(), w_t.data.copy()))
    return MixtureState(means=mu_t, weights=w_t, responsibilities=p,
                        kappa=float(kappa), k=k, sample_set=sset,
                        trace=rounds if trace else [])


def _attached_sq_distances(s_t: Tensor, mu: Tensor) -> Tensor:
    s2 = (s_t * s_t).sum(axis=1, keepdims=True)
    m2 = (mu * mu).sum(axis=1).reshape(1, mu.shape[0])
    cross = ad.einsum2("ic,kc->ik", s_t, mu)
    return ad.clamp_min(s2 + m2 - cross * 2.0, 0.0)


def _as_sample_set(values) -> SampleSet:
    v = ad.as_tensor(values)
    if v.ndim != 2:
        raise ShapeError("expected an (n_samples, C) sample matrix")
    return SampleSet(values=v, image_ids=np.zeros(v.shape[0], dtype=int),
                     hw=v.shape[0], n_images=1)


def mixture_log_likelihood(data: np.ndarray, means: np.ndarray,
                           weights: np.ndarray, kappa: float) -> float:
    """sum_i log sum_k w_k exp(-kappa d2_ik), the surrogate the fit ascends."""
    logits = -kappa * _sq_distances(np.asarray(data, dtype=np.float64),
                                    np.asarray(means, dtype=np.float64))
    logits = logits + np.log(np.maximum(np.asarray(weights, dtype=np.float64),
                                        _LOG_FLOOR))
    mx = logits.max(axis=1, keepdims=True)
    return float((mx.ravel() + np.log(np.exp(logits - mx).sum(axis=1))).sum())


def pattern_embedding(state: MixtureState, image: int) -> Tensor:
    """Spatially pooled soft reconstruction of one image from the means."""
    rows = state.sample_set.rows_for(image)
    p_sum = state.responsibilities[rows].sum(axis=0)
    return ad.einsum2("k,kc->c", p_sum, state.means) / float(state.sample_set.hw)


def pattern_embeddings(state: MixtureState) -> Tensor:
    """All per-image embeddings at once: (n_images, C)."""
    sset = state.sample_set
    p3 = state.responsibilities.reshape(sset.n_images, sset.hw, state.k)
    p_sums = p3.sum(axis=1)
    return ad.einsum2("bk,kc->bc", p_sums, state.means) / float(sset.hw)


def loss_pc(pairs, tau3: float, pairing: str = "matched") -> Tensor:
    """Contrastive loss over N class-paired pattern-embedding prototypes."""
    return prototype_contrastive_loss(pairs, tau3, pairing)
