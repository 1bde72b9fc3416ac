"""Wires the backbone, the three correlation branches, and the anchor head.

One forward pass per episode: every image goes through the backbone as a
single batch, the episode channel shift recenters the maps, and each
enabled branch reduces them to class-paired prototypes for its loss.
Disabled branches are skipped outright, not just zero-weighted, so an
ablation row pays nothing for the branches it drops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import crosscorr, patterncorr, selfcorr
from .autodiff import Tensor
from .backbone import (BackboneParams, backbone_state, episode_channel_shift,
                       extract_features, init_backbone, restore_backbone)
from .config import Config
from .errors import DataError
from .objective import ClassifierHead, LossBundle, init_head, loss_ce, total_loss


@dataclass
class Model:
    cfg: Config
    backbone: BackboneParams
    head: ClassifierHead
    base_classes: list            # sorted global class ids behind the head rows

    def __post_init__(self):
        self._rows = {int(c): i for i, c in enumerate(self.base_classes)}

    def head_row(self, global_label: int) -> int:
        try:
            return self._rows[int(global_label)]
        except KeyError:
            raise DataError(f"label {global_label} is not a base class") from None


def init_model(cfg: Config, base_classes, rng: np.random.Generator) -> Model:
    base_classes = sorted(int(c) for c in base_classes)
    bb = init_backbone(cfg, rng)
    head = init_head(len(base_classes), bb.out_channels, rng)
    return Model(cfg=cfg, backbone=bb, head=head, base_classes=base_classes)


def model_parameters(model: Model) -> dict:
    params = dict(model.backbone.params)
    params["head.weight"] = model.head.weight
    params["head.bias"] = model.head.bias
    return params


def set_model_parameters(model: Model, params: dict) -> None:
    for name, tensor in params.items():
        if name == "head.weight":
            model.head.weight = tensor
        elif name == "head.bias":
            model.head.bias = tensor
        else:
            model.backbone.params[name] = tensor


def model_state(model: Model) -> dict:
    """Checkpoint tensors: backbone, head, and the base-class id list."""
    state = backbone_state(model.backbone)
    state["head.weight"] = model.head.weight.data
    state["head.bias"] = model.head.bias.data
    state["head.classes"] = np.asarray(model.base_classes, dtype=np.float64)
    return state


def model_from_state(cfg: Config, state: dict) -> Model:
    for need in ("head.weight", "head.bias", "head.classes"):
        if need not in state:
            raise DataError(f"checkpoint is missing tensor {need!r}")
    bb = restore_backbone(cfg, state)
    head = ClassifierHead(weight=ad.parameter(state["head.weight"]),
                          bias=ad.parameter(state["head.bias"]))
    classes = [int(v) for v in state["head.classes"]]
    return Model(cfg=cfg, backbone=bb, head=head, base_classes=classes)


def inference_weights(cfg: Config) -> dict:
    """Branch scores are combined with the loss weights at inference time.

    With every correlation branch ablated away, classification falls back to
    plain cosine matching on average-pooled backbone features.
    """
    weights = {}
    if cfg["branch.sc"]:
        weights["sc"] = cfg["loss.alpha"]
    if cfg["branch.cc"]:
        weights["cc"] = cfg["loss.beta"]
    if cfg["branch.pc"]:
        weights["pc"] = cfg["loss.gamma"]
    if not weights:
        weights["base"] = 1.0
    return weights


def _episode_feature_maps(model: Model, episode, training: bool):
    images = np.concatenate([episode.support_images, episode.query_images])
    feats, new_running = extract_features(images, model.backbone, training=training)
    return episode_channel_shift(feats), new_running


def _class_pairs(support_emb, query_emb, n: int, k: int, q: int):
    """(N, C) class means of support and query embeddings, paired up."""
    c = support_emb.shape[1]
    s = support_emb.reshape(n, k, c).mean(axis=1)
    qm = query_emb.reshape(n, q, c).mean(axis=1)
    return [(s[i], qm[i]) for i in range(n)]


def episode_losses(model: Model, episode, mixture_rng: np.random.Generator,
                   training: bool = True):
    """LossBundle for one episode plus the refreshed running statistics."""
    cfg = model.cfg
    n, k, q = episode.n_way, episode.k_shot, episode.n_query
    nk = n * k
    feats, new_running = _episode_feature_maps(model, episode, training)
    f_s, f_q = feats[:nk], feats[nk:]

    rows = [model.head_row(g) for g in episode.query_labels]
    l_ce = loss_ce(f_q, rows, model.head)

    pairing = cfg["loss.pairing"]
    zero = Tensor(0.0)
    l_sc = l_cc = l_pc = zero
    if cfg["branch.sc"]:
        att = selfcorr.self_attention_map(feats, cfg["selfcorr.softmax_axis"])
        z = selfcorr.self_embedding(feats, att)
        l_sc = selfcorr.loss_sc(_class_pairs(z[:nk], z[nk:], n, k, q),
                                cfg["temp.tau1"], pairing)
    if cfg["branch.cc"]:
        c_q, c_s = crosscorr.pair_embeddings(f_q, f_s, cfg["cross.gamma"])
        pairs = []
        for i in range(n):
            qs, ss = slice(i * q, (i + 1) * q), slice(i * k, (i + 1) * k)
            pairs.append((c_s[qs, ss].mean(axis=(0, 1)),
                          c_q[qs, ss].mean(axis=(0, 1))))
        l_cc = crosscorr.loss_cc(pairs, cfg["temp.tau2"], pairing)
    if cfg["branch.pc"]:
        state = patterncorr.fit_mixture(
            patterncorr.collect_samples(feats), cfg["mixture.k"],
            cfg["mixture.kappa"], cfg["mixture.iters"], rng=mixture_rng,
            use_weights=cfg["mixture.use_weights"])
        emb = patterncorr.pattern_embeddings(state)
        l_pc = patterncorr.loss_pc(_class_pairs(emb[:nk], emb[nk:], n, k, q),
                                   cfg["temp.tau3"], pairing)
    bundle = total_loss(l_ce, l_sc, l_cc, l_pc, cfg["loss.alpha"],
                        cfg["loss.beta"], cfg["loss.gamma"])
    return bundle, new_running


def episode_branch_tables(model: Model, episode,
                          mixture_rng: np.random.Generator):
    """Per-query views and class prototypes for every enabled branch.

    Returns (views, protos, weights) as plain arrays: views[b] is (NQ, C)
    for context-free branches or (NQ, N, C) for the cross branch, whose
    prototypes are also per-query (the support is attended in each query's
    own context).
    """
    cfg = model.cfg
    n, k, q = episode.n_way, episode.k_shot, episode.n_query
    nk, nq = n * k, n * q
    weights = inference_weights(cfg)
    views: dict = {}
    protos: dict = {}
    with ad.no_grad():
        feats, _ = _episode_feature_maps(model, episode, training=False)
        f_s, f_q = feats[:nk], feats[nk:]
        c = model.backbone.out_channels
        if "sc" in weights:
            att = selfcorr.self_attention_map(feats, cfg["selfcorr.softmax_axis"])
            z = selfcorr.self_embedding(feats, att).data
            views["sc"] = z[nk:]
            protos["sc"] = z[:nk].reshape(n, k, c).mean(axis=1)
        if "cc" in weights:
            c_q, c_s = crosscorr.pair_embeddings(f_q, f_s, cfg["cross.gamma"])
            views["cc"] = c_q.data.reshape(nq, n, k, c).mean(axis=2)
            protos["cc"] = c_s.data.reshape(nq, n, k, c).mean(axis=2)
        if "pc" in weights:
            state = patterncorr.fit_mixture(
                patterncorr.collect_samples(feats), cfg["mixture.k"],
                cfg["mixture.kappa"], cfg["mixture.iters"], rng=mixture_rng,
                use_weights=cfg["mixture.use_weights"])
            emb = patterncorr.pattern_embeddings(state).data
            views["pc"] = emb[nk:]
            protos["pc"] = emb[:nk].reshape(n, k, c).mean(axis=1)
        if "base" in weights:
            pooled = ad.avg_pool_spatial(feats).data
            views["base"] = pooled[nk:]
            protos["base"] = pooled[:nk].reshape(n, k, c).mean(axis=1)
    return views, protos, weights
