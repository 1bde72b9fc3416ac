"""Episodic SGD training of the combined objective over the base split.

One episode per optimizer step: forward through the backbone and enabled
branches, reverse-mode gradients, then SGD with momentum and the classical
L2 weight-decay term folded into the gradient.  Every random draw derives
from the run seed, so two runs with the same config produce bit-identical
loss logs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import episodic
from . import model as model_mod
from .config import Config
from .data import Dataset
from .errors import NumericError

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = "step,l_ce,l_sc,l_cc,l_pc,l_total"


@dataclass
class TrainResult:
    model: model_mod.Model
    loss_rows: list        # (step, {l_ce, l_sc, l_cc, l_pc, l_total}) per step
    loss_csv: str


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float, weight_decay: float) -> dict:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    updated = {}
    for name, p in params.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + grads[name] + weight_decay * p.data
        velocity[name] = v
        updated[name] = ad.parameter(p.data - lr * v)
    return updated


def loss_csv_text(loss_rows) -> str:
    """repr() keeps every float digit, so equal runs give equal bytes."""
    lines = [LOSS_CSV_HEADER]
    for step, vals in loss_rows:
        lines.append(f"{step},{vals['l_ce']!r},{vals['l_sc']!r},"
                     f"{vals['l_cc']!r},{vals['l_pc']!r},{vals['l_total']!r}")
    return "\n".join(lines) + "\n"


def train(cfg: Config, ds: Dataset, loss_csv_path=None) -> TrainResult:
    """Train a fresh model for epochs x episodes_per_epoch steps."""
    seed = cfg["run.seed"]
    n, k, q = cfg["episode.n_way"], cfg["episode.k_shot"], cfg["episode.n_query"]
    lr, momentum = cfg["train.lr"], cfg["train.momentum"]
    weight_decay = cfg["train.weight_decay"]
    model = model_mod.init_model(
        cfg, ds.classes("base"),
        np.random.default_rng([seed, episodic.TRAIN_STREAM, 0]))
    velocity: dict = {}
    loss_rows = []
    total_steps = cfg["train.epochs"] * cfg["train.episodes_per_epoch"]
    for step in range(total_steps):
        episode_key = [seed, episodic.TRAIN_STREAM, 1 + step]
        episode = episodic.sample_episode(
            ds, "base", n, k, q, np.random.default_rng(episode_key + [0]))
        try:
            bundle, new_running = model_mod.episode_losses(
                model, episode, np.random.default_rng(episode_key + [1]),
                training=True)
            params = model_mod.model_parameters(model)
            grads = ad.gradients(bundle.l_total, params)
        except NumericError as exc:
            logger.error("non-finite value at step %d, episode seed %s: %s",
                         step, episode_key, exc)
            raise NumericError(f"training aborted at step {step}, episode "
                               f"seed {episode_key}: {exc}") from exc
        model_mod.set_model_parameters(
            model, sgd_step(params, grads, velocity, lr, momentum, weight_decay))
        model.backbone.running.update(new_running)
        loss_rows.append((step, bundle.values()))
    csv = loss_csv_text(loss_rows)
    if loss_csv_path is not None:
        Path(loss_csv_path).write_text(csv)
    return TrainResult(model=model, loss_rows=loss_rows, loss_csv=csv)
