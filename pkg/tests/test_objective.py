"""Anchor cross-entropy over base classes and the weighted total."""
import numpy as np
import pytest

from fewcorr import autodiff as ad
from fewcorr import objective
from fewcorr.autodiff import Tensor
from fewcorr.errors import ConfigError, DataError


def zero_head(n_classes, channels):
    return objective.ClassifierHead(weight=Tensor(np.zeros((n_classes, channels))),
                                    bias=Tensor(np.zeros(n_classes)))


class TestCrossEntropy:
    def test_uniform_logits_give_ln_classes(self, rng):
        maps = Tensor(rng.standard_normal((6, 5, 5, 4)))
        labels = np.array([0, 1, 2, 3, 4, 5])
        loss = objective.loss_ce(maps, labels, zero_head(8, 4)).item()
        assert loss == pytest.approx(np.log(8), abs=1e-9)

    def test_matches_manual_computation(self, rng):
        maps = rng.standard_normal((4, 3, 3, 5))
        weight = rng.standard_normal((6, 5))
        bias = rng.standard_normal(6)
        labels = np.array([2, 0, 5, 1])
        head = objective.ClassifierHead(weight=Tensor(weight), bias=Tensor(bias))
        got = objective.loss_ce(Tensor(maps), labels, head).item()
        feats = maps.mean(axis=(1, 2))
        logits = feats @ weight.T + bias
        want = 0.0
        for i, lab in enumerate(labels):
            z = logits[i] - logits[i].max()
            want -= z[lab] - np.log(np.exp(z).sum())
        assert got == pytest.approx(want / 4, abs=1e-12)

    def test_single_map_promoted(self, rng):
        fmap = rng.standard_normal((3, 3, 4))
        loss = objective.loss_ce(Tensor(fmap), np.array([1]), zero_head(5, 4))
        assert loss.item() == pytest.approx(np.log(5), abs=1e-9)

    def test_label_out_of_range(self, rng):
        maps = Tensor(rng.standard_normal((2, 3, 3, 4)))
        with pytest.raises(DataError, match="7"):
            objective.loss_ce(maps, np.array([0, 7]), zero_head(5, 4))

    def test_gradient(self, rng):
        maps = rng.standard_normal((3, 3, 3, 4))
        weight = rng.standard_normal((5, 4))
        labels = np.array([4, 0, 2])

        def f(ts):
            head = objective.ClassifierHead(weight=ts[1],
                                            bias=Tensor(np.zeros(5)))
            return objective.loss_ce(ts[0], labels, head)

        rep = ad.grad_check(f, [maps, weight])
        assert rep.passed, rep.summary()


class TestHead:
    def test_init_shapes(self, rng):
        head = objective.init_head(7, 12, rng)
        assert head.weight.shape == (7, 12) and head.bias.shape == (7,)
        assert head.n_classes == 7

    def test_init_needs_two_classes(self, rng):
        with pytest.raises(ConfigError):
            objective.init_head(1, 8, rng)


class TestTotal:
    def scalars(self, *vals):
        return [Tensor(np.array(v)) for v in vals]

    def test_weighted_sum(self):
        ce, sc, cc, pc = self.scalars(1.0, 0.8, 0.6, 0.4)
        bundle = objective.total_loss(ce, sc, cc, pc,
                                      alpha=1.0, beta=0.5, gamma=0.25)
        want = 1.0 + 1.0 * 0.8 + 0.5 * 0.6 + 0.25 * 0.4
        assert bundle.l_total.item() == pytest.approx(want, abs=1e-12)
        assert bundle.values()["l_ce"] == pytest.approx(1.0)

    def test_zero_weights_leave_only_ce(self):
        ce, sc, cc, pc = self.scalars(2.0, 10.0, 10.0, 10.0)
        bundle = objective.total_loss(ce, sc, cc, pc,
                                      alpha=0.0, beta=0.0, gamma=0.0)
        assert bundle.l_total.item() == pytest.approx(2.0, abs=1e-12)

    def test_negative_weight_rejected(self):
        ce, sc, cc, pc = self.scalars(1.0, 1.0, 1.0, 1.0)
        with pytest.raises(ConfigError):
            objective.total_loss(ce, sc, cc, pc,
                                 alpha=-0.1, beta=0.5, gamma=0.25)

    def test_values_keys(self):
        ce, sc, cc, pc = self.scalars(1.0, 2.0, 3.0, 4.0)
        bundle = objective.total_loss(ce, sc, cc, pc,
                                      alpha=1.0, beta=0.5, gamma=0.25)
        assert set(bundle.values()) == {"l_ce", "l_sc", "l_cc", "l_pc",
                                        "l_total"}
