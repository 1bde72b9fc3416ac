"""Mixture fitting against a classical EM reference written from the
textbook recipe: explicit loops, plain-domain densities, nothing shared
with the implementation under test."""
import numpy as np
import pytest

from fewcorr import patterncorr as pc
from fewcorr.autodiff import Tensor
from fewcorr.errors import ConfigError


def em_reference(data, k, kappa, iters, init_means, use_weights=True):
    """Textbook EM for the exp(-kappa * squared distance) component density."""
    mu = np.array(init_means, dtype=np.float64)
    w = np.full(k, 1.0 / k)
    n = data.shape[0]
    p = np.zeros((n, k))
    for _ in range(iters):
        for i in range(n):
            for j in range(k):
                d2 = float(((data[i] - mu[j]) ** 2).sum())
                p[i, j] = (w[j] if use_weights else 1.0) * np.exp(-kappa * d2)
            p[i] /= p[i].sum()
        for j in range(k):
            mass = p[:, j].sum()
            mu[j] = p[:, j] @ data / mass
            w[j] = mass / n
    return mu, w, p


def two_clusters(seed, n_per=30, dim=3, gap=4.0, sigma=0.3):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, sigma, size=(n_per, dim))
    b = rng.normal(gap, sigma, size=(n_per, dim))
    return np.concatenate([a, b])


def paired_distance(got, want):
    """Greedy nearest pairing of two small mean sets; returns the max gap."""
    want = list(want)
    worst = 0.0
    for g in got:
        dists = [np.linalg.norm(g - w) for w in want]
        j = int(np.argmin(dists))
        worst = max(worst, dists[j])
        want.pop(j)
    return worst


class TestAgainstClassicalEM:
    @pytest.mark.parametrize("seed", range(5))
    def test_means_converge_to_reference(self, seed):
        data = two_clusters(seed)
        state = pc.fit_mixture(Tensor(data), k=2, kappa=1.0, iters=15,
                               rng=np.random.default_rng([seed, 1]))
        ref_mu, _, _ = em_reference(data, 2, 1.0, 40,
                                    init_means=data[[0, -1]])
        assert paired_distance(state.means.data, ref_mu) < 0.05

    def test_same_init_tracks_reference_exactly(self):
        data = two_clusters(99)
        init = data[[0, -1]].copy()
        state = pc.fit_mixture(Tensor(data), k=2, kappa=1.0, iters=6,
                               init_means=init)
        ref_mu, ref_w, ref_p = em_reference(data, 2, 1.0, 6, init_means=init)
        np.testing.assert_allclose(state.means.data, ref_mu, atol=1e-9)
        np.testing.assert_allclose(state.weights.data, ref_w, atol=1e-9)
        np.testing.assert_allclose(state.responsibilities.data, ref_p,
                                   atol=1e-9)


class TestNormalization:
    def test_responsibility_rows_sum_to_one(self, rng):
        data = rng.standard_normal((40, 4))
        state = pc.fit_mixture(Tensor(data), k=5, kappa=1.0, iters=3,
                               rng=np.random.default_rng(3))
        np.testing.assert_allclose(state.responsibilities.data.sum(axis=1),
                                   np.ones(40), atol=1e-6)

    def test_weights_sum_to_one(self, rng):
        data = rng.standard_normal((30, 3))
        state = pc.fit_mixture(Tensor(data), k=4, kappa=2.0, iters=4,
                               rng=np.random.default_rng(4))
        assert state.weights.data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_equal_likelihoods_give_uniform_rows(self):
        # 25 components, every sample equidistant from every mean
        lik = Tensor(np.full((6, 25), 0.3))
        p = pc.responsibilities(lik, Tensor(np.full(25, 1 / 25)))
        np.testing.assert_allclose(p.data, np.full((6, 25), 0.04), atol=1e-12)


class TestPieces:
    def test_component_likelihood_closed_form(self):
        s = Tensor(np.array([1.0, 2.0]))
        mu = Tensor(np.array([0.0, 0.0]))
        got = pc.component_likelihood(s, mu, kappa=0.5).item()
        assert got == pytest.approx(np.exp(-0.5 * 5.0), abs=1e-12)

    def test_update_means_matches_loops(self, rng):
        p = rng.uniform(0.1, 1.0, size=(8, 3))
        p /= p.sum(axis=1, keepdims=True)
        s = rng.standard_normal((8, 4))
        got = pc.update_means(Tensor(p), Tensor(s)).data
        want = np.zeros((3, 4))
        for j in range(3):
            acc, mass = np.zeros(4), 0.0
            for i in range(8):
                acc += p[i, j] * s[i]
                mass += p[i, j]
            want[j] = acc / mass
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_weighted_responsibilities_tilt_toward_heavy_component(self):
        lik = Tensor(np.full((4, 2), 0.5))
        p = pc.responsibilities(lik, Tensor(np.array([0.9, 0.1])))
        np.testing.assert_allclose(p.data[:, 0], np.full(4, 0.9), atol=1e-12)

    def test_collect_samples_layout(self, rng):
        maps = rng.standard_normal((3, 2, 2, 5))
        sset = pc.collect_samples(Tensor(maps))
        assert sset.values.shape == (12, 5)
        assert sset.n_images == 3 and sset.hw == 4
        np.testing.assert_allclose(sset.values.data[sset.rows_for(1)],
                                   maps[1].reshape(4, 5), atol=1e-12)


class TestFitBehavior:
    def test_surrogate_likelihood_never_decreases(self):
        data = two_clusters(7)
        state = pc.fit_mixture(Tensor(data), k=2, kappa=1.0, iters=8,
                               rng=np.random.default_rng(8), trace=True)
        lls = [pc.mixture_log_likelihood(data, mu, w, 1.0)
               for mu, w in state.trace]
        diffs = np.diff(lls)
        assert np.all(diffs > -1e-9), lls

    def test_deterministic_under_same_rng_seed(self):
        data = two_clusters(5, n_per=20)
        a = pc.fit_mixture(Tensor(data), k=3, kappa=1.0, iters=4,
                           rng=np.random.default_rng([5, 2]))
        b = pc.fit_mixture(Tensor(data), k=3, kappa=1.0, iters=4,
                           rng=np.random.default_rng([5, 2]))
        np.testing.assert_array_equal(a.means.data, b.means.data)
        np.testing.assert_array_equal(a.weights.data, b.weights.data)

    def test_rejects_bad_preconditions(self, rng):
        data = Tensor(rng.standard_normal((10, 3)))
        with pytest.raises(ConfigError):
            pc.fit_mixture(data, k=11, kappa=1.0, iters=1,
                           rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            pc.fit_mixture(data, k=2, kappa=1.0, iters=0,
                           rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            pc.fit_mixture(data, k=2, kappa=-1.0, iters=1,
                           rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            pc.fit_mixture(data, k=2, kappa=1.0, iters=1)  # no rng, no init

    def test_init_means_shape_checked(self, rng):
        data = Tensor(rng.standard_normal((10, 3)))
        with pytest.raises(ConfigError):
            pc.fit_mixture(data, k=2, kappa=1.0, iters=1,
                           init_means=np.zeros((3, 3)))

    def test_duplicated_points_do_not_crash(self):
        # all-coincident samples exercise the degenerate-init fallback
        data = np.zeros((12, 3))
        state = pc.fit_mixture(Tensor(data), k=2, kappa=1.0, iters=2,
                               rng=np.random.default_rng(1))
        assert np.all(np.isfinite(state.means.data))
        assert state.weights.data.sum() == pytest.approx(1.0, abs=1e-9)


class TestEmbeddings:
    def test_single_image_embedding_formula(self, rng):
        maps = rng.standard_normal((2, 2, 2, 3))
        sset = pc.collect_samples(Tensor(maps))
        state = pc.fit_mixture(sset, k=2, kappa=1.0, iters=2,
                               rng=np.random.default_rng(2))
        p = state.responsibilities.data
        mu = state.means.data
        for b in range(2):
            rows = p[sset.rows_for(b)]
            want = rows.sum(axis=0) @ mu / sset.hw
            got = pc.pattern_embedding(state, b).data
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_batched_matches_single(self, rng):
        maps = rng.standard_normal((3, 2, 2, 4))
        sset = pc.collect_samples(Tensor(maps))
        state = pc.fit_mixture(sset, k=3, kappa=1.0, iters=2,
                               rng=np.random.default_rng(6))
        batched = pc.pattern_embeddings(state).data
        for b in range(3):
            np.testing.assert_allclose(batched[b],
                                       pc.pattern_embedding(state, b).data,
                                       atol=1e-12)
