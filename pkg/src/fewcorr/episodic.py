"""Episode sampling, the inference rule, evaluation, and the ablation grid.

An episode is N classes with K support and Q query images each, labeled
locally 0..N-1.  Inference scores a query against each class with a
weighted sum of per-branch cosine similarities; evaluation averages
per-episode accuracy and reports a normal-approximation 95% confidence
interval, the convention all few-shot results follow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .config import Config
from .data import Dataset
from .errors import ConfigError, DataError

# rng stream tags so training and evaluation never share a draw sequence
TRAIN_STREAM = 1
EVAL_STREAM = 2

# Table-style ablation grid: (sc, cc, pc) flags per row
DEFAULT_ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


@dataclass
class Episode:
    support_images: np.ndarray   # (N*K, H, W, 3), class-major
    support_labels: np.ndarray   # (N*K,) global class ids
    query_images: np.ndarray     # (N*Q, H, W, 3), class-major
    query_labels: np.ndarray     # (N*Q,)
    classes: np.ndarray          # (N,) global ids; local label = index here
    n_way: int
    k_shot: int
    n_query: int

    @property
    def support_local(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.k_shot)

    @property
    def query_local(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.n_query)


def sample_episode(ds: Dataset, split: str, n_way: int, k_shot: int,
                   n_query: int, rng: np.random.Generator) -> Episode:
    """Uniform class and image sampling without replacement."""
    by_class = ds.indices_by_class(split)
    if len(by_class) < n_way:
        raise DataError(f"split {split!r} has {len(by_class)} classes, "
                        f"need {n_way}")
    class_ids = sorted(by_class)
    chosen = [class_ids[i] for i in
              rng.choice(len(class_ids), size=n_way, replace=False)]
    sup_idx, qry_idx = [], []
    for c in chosen:
        pool = by_class[c]
        if len(pool) < k_shot + n_query:
            raise DataError(f"class {c} has {len(pool)} images in split "
                            f"{split!r}, need {k_shot + n_query}")
        pick = rng.choice(len(pool), size=k_shot + n_query, replace=False)
        sup_idx.extend(pool[pick[:k_shot]])
        qry_idx.extend(pool[pick[k_shot:]])
    sup_idx, qry_idx = np.asarray(sup_idx), np.asarray(qry_idx)
    return Episode(support_images=ds.images[sup_idx],
                   support_labels=ds.labels[sup_idx],
                   query_images=ds.images[qry_idx],
                   query_labels=ds.labels[qry_idx],
                   classes=np.asarray(chosen),
                   n_way=n_way, k_shot=k_shot, n_query=n_query)


def _safe_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def classify_query(query_views: dict, prototypes: dict, weights: dict):
    """Weighted-branch cosine scoring of one query against every class.

    query_views[b] is (C,) for a context-free branch or (N, C) when the view
    depends on the candidate class; prototypes[b] is (N, C).  Returns the
    predicted local class and the (N,) score table.  Degenerate embeddings
    score 0 instead of erroring.
    """
    if not weights:
        raise ConfigError("classification needs at least one enabled branch")
    missing = set(weights) - set(query_views) | set(weights) - set(prototypes)
    if missing:
        raise ConfigError(f"no embeddings supplied for branches {sorted(missing)}")
    n_way = None
    for b in weights:
        rows = np.asarray(prototypes[b]).shape[0]
        if n_way is None:
            n_way = rows
        elif rows != n_way:
            raise ConfigError("branch prototype tables disagree on class count")
    scores = np.zeros(n_way)
    for b in sorted(weights):
        view = np.asarray(query_views[b])
        protos = np.asarray(prototypes[b])
        for n in range(n_way):
            v = view if view.ndim == 1 else view[n]
            scores[n] += weights[b] * _safe_cosine(v, protos[n])
    return int(np.argmax(scores)), scores


@dataclass
class EvalSummary:
    """Mean accuracy (percent) with a 95% CI half-width over episodes."""

    mean_acc: float
    ci95: float
    episodes: int
    accuracies: list

    def formatted(self) -> str:
        return f"{self.mean_acc:.2f} ± {self.ci95:.2f}"


def summary_from_accuracies(accuracies) -> EvalSummary:
    """Half-width = 1.96 * sample stddev / sqrt(episodes), in percent."""
    accs = np.asarray(list(accuracies), dtype=np.float64)
    if accs.size == 0:
        raise DataError("no episode accuracies to summarize")
    mean = float(accs.mean()) * 100.0
    if accs.size < 2:
        ci = 0.0
    else:
        ci = 1.96 * float(accs.std(ddof=1)) / np.sqrt(accs.size) * 100.0
    return EvalSummary(mean_acc=mean, ci95=ci, episodes=int(accs.size),
                       accuracies=[float(a) for a in accs])


def evaluate(model, ds: Dataset, split: str, episodes: int, n_way: int,
             k_shot: int, n_query: int, seed: int) -> EvalSummary:
    """Per-episode accuracy over freshly sampled episodes, fixed seed."""
    if episodes < 1:
        raise ConfigError("need at least one evaluation episode")
    accs = []
    for i in range(episodes):
        episode = sample_episode(ds, split, n_way, k_shot, n_query,
                                 np.random.default_rng([seed, EVAL_STREAM, i, 0]))
        views, protos, weights = model_mod.episode_branch_tables(
            model, episode, np.random.default_rng([seed, EVAL_STREAM, i, 1]))
        locals_ = episode.query_local
        correct = 0
        for j in range(len(locals_)):
            views_j = {b: v[j] for b, v in views.items()}
            protos_j = {b: (p[j] if p.ndim == 3 else p) for b, p in protos.items()}
            pred, _ = classify_query(views_j, protos_j, weights)
            correct += int(pred == locals_[j])
        accs.append(correct / len(locals_))
    return summary_from_accuracies(accs)


@dataclass
class AblationRow:
    row_id: int
    flags: str
    n_way: int
    k_shot: int
    summary: EvalSummary
    seed: int


def flag_string(sc: bool, cc: bool, pc: bool) -> str:
    parts = ["ce"] + [name for name, on in
                      (("sc", sc), ("cc", cc), ("pc", pc)) if on]
    return "+".join(parts)


def run_ablation(cfg: Config, ds: Dataset, grid=None) -> list:
    """Train and evaluate one model per branch-flag row of the grid."""
    from . import trainer  # imported here: trainer drives episodes from this module
    grid = DEFAULT_ABLATION_GRID if grid is None else grid
    rows = []
    for row_id, (sc, cc, pc) in enumerate(grid):
        row_cfg = cfg.copy()
        row_cfg.set("branch.sc", sc)
        row_cfg.set("branch.cc", cc)
        row_cfg.set("branch.pc", pc)
        result = trainer.train(row_cfg, ds)
        summary = evaluate(result.model, ds, "novel", cfg["eval.episodes"],
                           cfg["episode.n_way"], cfg["episode.k_shot"],
                           cfg["episode.n_query"], cfg["run.seed"])
        rows.append(AblationRow(row_id=row_id, flags=flag_string(sc, cc, pc),
                                n_way=cfg["episode.n_way"],
                                k_shot=cfg["episode.k_shot"],
                                summary=summary, seed=cfg["run.seed"]))
    return rows


def results_csv(rows) -> str:
    """Two-decimal fixed-point results table, one line per ablation row."""
    lines = ["row_id,flags,n_way,k_shot,mean_acc,ci95,episodes,seed"]
    for r in rows:
        lines.append(f"{r.row_id},{r.flags},{r.n_way},{r.k_shot},"
                     f"{r.summary.mean_acc:.2f},{r.summary.ci95:.2f},"
                     f"{r.summary.episodes},{r.seed}")
    return "\n".join(lines) + "\n"
