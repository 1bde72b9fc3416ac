"""Command-line front end: train, eval, ablate, gradcheck, synth,
export-attention, and report.

Every command that writes artifacts records a run manifest first (command,
config digest, seed, content hashes of its file inputs), so an output
directory is always attributable to exact inputs.  Exit codes: 0 success,
2 configuration problems, 3 data problems, 4 numeric failures, 5 failed
gradient checks.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checks, crosscorr, episodic, selfcorr, trainer
from . import model as model_mod
from .backbone import episode_channel_shift, extract_features, load_checkpoint, \
    save_checkpoint
from .config import load_config
from .data import (dataset_digest, export_attention, generate_synthetic,
                   load_dataset, load_synth_spec, save_dataset)
from .errors import ConfigError, DataError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5


def _file_digest(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise DataError(f"cannot hash input {path}: {exc}") from exc


def _write_run_manifest(out_dir: Path, command: str, config_digest: str,
                        seed, inputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}",
             f"config_digest={config_digest}",
             f"seed={seed}"]
    for name in sorted(inputs):
        lines.append(f"input.{name}={inputs[name]}:{_file_digest(inputs[name])}")
    lines.append(f"out={out_dir}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _write_run_manifest(out, "train", cfg.digest(), cfg["run.seed"],
                        {"config": args.config, "data": args.data})
    ds = load_dataset(args.data)
    result = trainer.train(cfg, ds, loss_csv_path=out / "loss.csv")
    save_checkpoint(out / "checkpoint.bin", model_mod.model_state(result.model),
                    cfg.digest())
    last = result.loss_rows[-1][1] if result.loss_rows else {"l_total": float("nan")}
    print(f"trained {len(result.loss_rows)} steps, "
          f"final l_total {last['l_total']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _write_run_manifest(out, "eval", cfg.digest(), cfg["run.seed"],
                        {"config": args.config, "data": args.data,
                         "checkpoint": args.checkpoint})
    ds = load_dataset(args.data)
    ckpt_digest, state = load_checkpoint(args.checkpoint)
    if ckpt_digest != cfg.digest():
        print("warning: checkpoint was trained under a different config",
              file=sys.stderr)
    model = model_mod.model_from_state(cfg, state)
    episodes = args.episodes if args.episodes else cfg["eval.episodes"]
    summary = episodic.evaluate(model, ds, args.split, episodes,
                                cfg["episode.n_way"], cfg["episode.k_shot"],
                                cfg["episode.n_query"], cfg["run.seed"])
    (out / "eval_summary.csv").write_text(
        "mean_acc,ci95,episodes,seed\n"
        f"{summary.mean_acc:.2f},{summary.ci95:.2f},{summary.episodes},"
        f"{cfg['run.seed']}\n")
    episode_lines = ["episode,accuracy"]
    episode_lines += [f"{i},{acc!r}" for i, acc in enumerate(summary.accuracies)]
    (out / "episodes.csv").write_text("\n".join(episode_lines) + "\n")
    print(f"{args.split} {cfg['episode.n_way']}-way {cfg['episode.k_shot']}-shot: "
          f"{summary.formatted()} over {summary.episodes} episodes")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _write_run_manifest(out, "ablate", cfg.digest(), cfg["run.seed"],
                        {"config": args.config, "data": args.data})
    ds = load_dataset(args.data)
    rows = episodic.run_ablation(cfg, ds)
    (out / "results.csv").write_text(episodic.results_csv(rows))
    for row in rows:
        print(f"{row.flags:>14}: {row.summary.formatted()}")
    print(f"results: {out / 'results.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.gradcheck_suite(seed=args.seed, tolerance=args.tolerance)
    print(checks.format_results(results))
    return EXIT_OK if checks.suite_passed(results) else EXIT_GRADCHECK


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    out = Path(args.out)
    _write_run_manifest(out, "synth", _file_digest(args.spec), spec.seed,
                        {"spec": args.spec})
    ds = generate_synthetic(spec)
    manifest = save_dataset(ds, out)
    print(f"wrote {len(ds.images)} images across {spec.n_classes} classes")
    print(f"manifest: {manifest}")
    print(f"digest: {dataset_digest(ds)}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    _write_run_manifest(out, "export-attention", cfg.digest(), args.episode_seed,
                        {"config": args.config, "data": args.data,
                         "checkpoint": args.checkpoint})
    ds = load_dataset(args.data)
    _, state = load_checkpoint(args.checkpoint)
    model = model_mod.model_from_state(cfg, state)
    episode = episodic.sample_episode(
        ds, args.split, cfg["episode.n_way"], cfg["episode.k_shot"],
        cfg["episode.n_query"], np.random.default_rng(args.episode_seed))
    maps = []
    with ad.no_grad():
        images = np.concatenate([episode.support_images, episode.query_images])
        feats, _ = extract_features(images, model.backbone, training=False)
        feats = episode_channel_shift(feats)
        att = selfcorr.self_attention_map(feats, cfg["selfcorr.softmax_axis"])
        # per-image export: channel-mean of the self-attention stack
        for i in range(att.shape[0]):
            maps.append((i, "sc", att.data[i].mean(axis=2)))
        cos = crosscorr.correlation_tensor(
            feats[episode.n_way * episode.k_shot], feats[0])
        m_q, m_s = crosscorr.cross_attention_map(cos, cfg["cross.gamma"])
        maps.append((episode.n_way * episode.k_shot, "cc_query", m_q.data))
        maps.append((0, "cc_support", m_s.data))
    index = export_attention(maps, args.episode_seed, out)
    print(f"exported {len(maps)} maps, index: {index}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not (args.loss_csv or args.results_csv or args.attention_dir):
        raise ConfigError("report needs at least one of --loss-csv, "
                          "--results-csv, --attention-dir")
    from . import figures  # local import: keeps matplotlib off the other paths
    out = Path(args.out)
    inputs = {}
    if args.loss_csv:
        inputs["loss_csv"] = args.loss_csv
    if args.results_csv:
        inputs["results_csv"] = args.results_csv
    _write_run_manifest(out, "report", "-", "-", inputs)
    written = []
    if args.loss_csv:
        written.append(figures.render_loss_curves(args.loss_csv,
                                                  out / "loss_curves.png"))
    if args.results_csv:
        written.append(figures.render_ablation_chart(args.results_csv,
                                                     out / "ablation.png"))
    if args.attention_dir:
        written.append(figures.render_attention_grid(args.attention_dir,
                                                     out / "attention.png"))
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewcorr",
        description="episodic few-shot classification with correlation branches")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on the base split")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled episodes")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=0,
                   help="override eval.episodes from the config")
    p.add_argument("--split", choices=("base", "novel"), default="novel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the 5-row branch grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synth.* key = value file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-attention",
                       help="write attention maps of one episode as CSV grids")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("base", "novel"), default="novel")
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("report", help="render CSV artifacts to PNG figures")
    p.add_argument("--loss-csv")
    p.add_argument("--results-csv")
    p.add_argument("--attention-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
