"""Finite-difference verification of every differentiable pipeline.

Each check builds a scalar function of explicit leaf arrays, runs the
reverse sweep, and compares against central differences.  Mixture checks
pin the initialization and use a single round: with more rounds only the
final one is recorded (by design), so the analytic gradient would
legitimately differ from the true derivative of the whole iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import crosscorr, objective, patterncorr, selfcorr
from .autodiff import Tensor
from .backbone import episode_channel_shift, extract_features, init_backbone
from .config import Config


@dataclass
class CheckResult:
    name: str
    report: ad.GradReport


def _rand_head(rng, classes: int, channels: int) -> objective.ClassifierHead:
    return objective.ClassifierHead(
        weight=Tensor(rng.standard_normal((classes, channels))),
        bias=Tensor(rng.standard_normal(classes)))


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return (t * Tensor(w)).sum()


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4,
                    eps: float = 1e-5) -> list:
    """Run every check; returns CheckResult entries in a fixed order."""
    floor = tolerance * 1e-3
    results = []

    def run(name, f, inputs):
        report = ad.grad_check(f, inputs, eps=eps, tolerance=tolerance,
                               abs_floor=floor)
        results.append(CheckResult(name=name, report=report))

    rng = np.random.default_rng([seed, 0])

    # plain calculus cases
    run("quadratic x^2 at x=3", lambda ts: (ts[0] * ts[0]).sum(), [np.array([3.0])])
    logits = rng.standard_normal(5)
    run("softmax cross-entropy, 5 logits",
        lambda ts: -ad.log_softmax(ts[0], axis=0)[2], [logits])

    # self-correlation attention and embedding
    for shape in ((3, 3, 4), (4, 4, 2)):
        rng = np.random.default_rng([seed, 10 + shape[0]])
        fmap = rng.standard_normal(shape)
        w = rng.standard_normal(shape[2])

        def f_sc(ts, w=w):
            att = selfcorr.self_attention_map(ts[0])
            return _weighted_sum(selfcorr.self_embedding(ts[0], att), w)

        run(f"self-attention embedding {shape[0]}x{shape[1]}x{shape[2]}",
            f_sc, [fmap])
    fmap = rng.standard_normal((3, 3, 5))
    w5 = rng.standard_normal(5)
    run("self-attention, channel axis",
        lambda ts: _weighted_sum(selfcorr.self_embedding(
            ts[0], selfcorr.self_attention_map(ts[0], axis="channel")), w5),
        [fmap])

    # contrastive losses on raw embeddings
    for tau, pairing in ((0.5, "matched"), (0.5, "fixed_query"), (0.1, "matched")):
        rng = np.random.default_rng([seed, 20 + int(tau * 10), len(pairing)])
        sup = rng.standard_normal((5, 8))
        qry = rng.standard_normal((5, 8))

        def f_pairs(ts, tau=tau, pairing=pairing):
            pairs = [(ts[0][i], ts[1][i]) for i in range(5)]
            return selfcorr.loss_sc(pairs, tau, pairing)

        run(f"contrastive loss, tau={tau}, {pairing}", f_pairs, [sup, qry])
    views = rng.standard_normal((4, 6))
    wp = rng.standard_normal(6)
    run("prototype average",
        lambda ts: _weighted_sum(
            selfcorr.prototype_average([ts[0][i] for i in range(4)]), wp),
        [views])

    # cross-correlation: tensor -> attention -> embedding -> loss
    rng = np.random.default_rng([seed, 30])
    fq = rng.standard_normal((3, 3, 3))
    fs = rng.standard_normal((3, 3, 3))
    wc = rng.standard_normal(3)

    def f_cc_chain(ts, wc=wc):
        cos = crosscorr.correlation_tensor(ts[0], ts[1])
        m_q, m_s = crosscorr.cross_attention_map(cos, 0.2)
        return (_weighted_sum(crosscorr.cross_embedding(ts[0], m_q), wc)
                + _weighted_sum(crosscorr.cross_embedding(ts[1], m_s), wc))

    run("cross-correlation chain, query map", f_cc_chain, [fq, fs])
    rng = np.random.default_rng([seed, 31])
    run("cross-correlation chain, second draw",
        f_cc_chain, [rng.standard_normal((3, 3, 3)),
                     rng.standard_normal((3, 3, 3))])

    rng = np.random.default_rng([seed, 32])
    bq = rng.standard_normal((2, 2, 2, 3))
    bs = rng.standard_normal((2, 2, 2, 3))
    wb = rng.standard_normal(3)

    def f_cc_pairs(ts, wb=wb):
        c_q, c_s = crosscorr.pair_embeddings(ts[0], ts[1], 0.2)
        return _weighted_sum(c_q.mean(axis=(0, 1)), wb) \
            + _weighted_sum(c_s.mean(axis=(0, 1)), wb)

    run("batched pair embeddings", f_cc_pairs, [bq, bs])

    for i in range(2):
        rng = np.random.default_rng([seed, 33 + i])
        fq4 = rng.standard_normal((1, 2, 2, 3))
        fs4 = rng.standard_normal((3, 2, 2, 3))

        def f_loss_cc(ts):
            c_q, c_s = crosscorr.pair_embeddings(ts[0], ts[1], 0.3)
            pairs = [(c_s[0, j], c_q[0, j]) for j in range(3)]
            return crosscorr.loss_cc(pairs, 0.5)

        run(f"cross-correlation loss, draw {i}", f_loss_cc, [fq4, fs4])

    # pattern-correlation: one recorded round, pinned init
    for i in range(2):
        rng = np.random.default_rng([seed, 40 + i])
        samples = rng.standard_normal((12, 4))
        init = rng.standard_normal((3, 4))
        wm = rng.standard_normal(4)

        def f_mix(ts, init=init, wm=wm):
            state = patterncorr.fit_mixture(ts[0], k=3, kappa=1.0, iters=1,
                                            init_means=init)
            return _weighted_sum(patterncorr.pattern_embeddings(state), wm)

        run(f"mixture fit and embeddings, draw {i}", f_mix, [samples])

    rng = np.random.default_rng([seed, 42])
    like_s = rng.uniform(0.5, 2.0, size=(6, 3))
    weights3 = np.array([0.5, 0.3, 0.2])
    samp6 = rng.standard_normal((6, 4))
    wm4 = rng.standard_normal((3, 4))

    def f_resp_means(ts, weights3=weights3, wm4=wm4):
        p = patterncorr.responsibilities(ts[0], weights3)
        mu = patterncorr.update_means(p, ts[1])
        return _weighted_sum(mu, wm4)

    run("responsibilities + mean update", f_resp_means, [like_s, samp6])

    rng = np.random.default_rng([seed, 43])
    ep_maps = rng.standard_normal((4, 3, 3, 4))
    init4 = rng.standard_normal((3, 4))

    def f_loss_pc(ts, init4=init4):
        state = patterncorr.fit_mixture(patterncorr.collect_samples(ts[0]),
                                        k=3, kappa=1.0, iters=1, init_means=init4)
        emb = patterncorr.pattern_embeddings(state)
        pairs = [(emb[0], emb[2]), (emb[1], emb[3])]
        return patterncorr.loss_pc(pairs, 0.5)

    run("pattern loss through the mixture", f_loss_pc, [ep_maps])

    # anchor cross-entropy
    rng = np.random.default_rng([seed, 50])
    maps_ce = rng.standard_normal((4, 3, 3, 5))
    head = _rand_head(rng, 7, 5)
    labels_ce = np.array([0, 3, 6, 2])
    run("anchor CE wrt feature maps",
        lambda ts: objective.loss_ce(ts[0], labels_ce, head), [maps_ce])

    def f_ce_head(ts):
        h = objective.ClassifierHead(weight=ts[0], bias=ts[1])
        return objective.loss_ce(Tensor(maps_ce), labels_ce, h)

    run("anchor CE wrt head", f_ce_head,
        [head.weight.data.copy(), head.bias.data.copy()])

    # convolution / backbone plumbing
    rng = np.random.default_rng([seed, 60])
    img = rng.standard_normal((5, 5, 2))
    kern = rng.standard_normal((3, 3, 2, 3))
    wk = rng.standard_normal((3, 3, 3))
    run("conv2d wrt input and kernel",
        lambda ts: _weighted_sum(ad.conv2d(ts[0], ts[1], padding=0), wk),
        [img, kern])

    cfg = Config({"backbone.blocks": 2, "backbone.widths": [3, 3],
                  "backbone.downsample_blocks": 2, "backbone.feature_size": 2})
    rng = np.random.default_rng([seed, 61])
    bb = init_backbone(cfg, rng)
    images = rng.uniform(0.0, 1.0, size=(2, 8, 8, 3))
    wf = rng.standard_normal((2, 2, 2, 3))

    def f_backbone(ts, training):
        bb2 = replace(bb, params={**bb.params, "block0.kernel": ts[0]})
        feats, _ = extract_features(images, bb2, training=training)
        return _weighted_sum(feats, wf)

    run("backbone, frozen statistics",
        lambda ts: f_backbone(ts, False), [bb.params["block0.kernel"].data.copy()])
    run("backbone, batch statistics",
        lambda ts: f_backbone(ts, True), [bb.params["block0.kernel"].data.copy()])

    rng = np.random.default_rng([seed, 62])
    shift_maps = rng.standard_normal((3, 3, 3, 4))
    ws = rng.standard_normal(4)
    run("episode channel shift",
        lambda ts: _weighted_sum(selfcorr.self_embedding(
            episode_channel_shift(ts[0]),
            selfcorr.self_attention_map(episode_channel_shift(ts[0]))), ws),
        [shift_maps])

    rng = np.random.default_rng([seed, 63])
    pool_in = rng.standard_normal((2, 4, 4, 3))
    wp3 = rng.standard_normal(3)
    run("average pooling chain",
        lambda ts: _weighted_sum(
            ad.avg_pool_spatial(ad.avg_pool2(ts[0])).mean(axis=0), wp3),
        [pool_in])

    # the full objective on a miniature two-way episode
    for i in range(2):
        rng = np.random.default_rng([seed, 70 + i])
        maps = rng.standard_normal((4, 3, 3, 4))
        init_m = rng.standard_normal((3, 4))
        mini_head = _rand_head(rng, 3, 4)

        def f_total(ts, init_m=init_m, mini_head=mini_head):
            feats = episode_channel_shift(ts[0])
            f_s, f_q = feats[:2], feats[2:]
            l_ce = objective.loss_ce(f_q, [0, 1], mini_head)
            att = selfcorr.self_attention_map(feats)
            z = selfcorr.self_embedding(feats, att)
            l_sc = selfcorr.loss_sc([(z[0], z[2]), (z[1], z[3])], 0.5)
            c_q, c_s = crosscorr.pair_embeddings(f_q, f_s, 0.2)
            l_cc = crosscorr.loss_cc(
                [(c_s[0, 0], c_q[0, 0]), (c_s[1, 1], c_q[1, 1])], 0.5)
            state = patterncorr.fit_mixture(
                patterncorr.collect_samples(feats), k=3, kappa=1.0,
                iters=1, init_means=init_m)
            emb = patterncorr.pattern_embeddings(state)
            l_pc = patterncorr.loss_pc([(emb[0], emb[2]), (emb[1], emb[3])], 0.5)
            return objective.total_loss(l_ce, l_sc, l_cc, l_pc,
                                        1.0, 0.5, 0.25).l_total

        run(f"total objective, miniature episode {i}", f_total, [maps])

    return results


def suite_passed(results) -> bool:
    return all(r.report.passed for r in results)


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name.ljust(width)}  {r.report.summary()}" for r in results]
    verdict = "all checks passed" if suite_passed(results) else "FAILURES present"
    lines.append(f"{len(results)} checks: {verdict}")
    return "\n".join(lines)
