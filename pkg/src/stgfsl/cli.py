"""Command line entry point.

    stgfsl <command> --config cfg [--set key=value ...] [--seed N] [--out DIR]

Commands: synth, train, adapt, eval, baseline, ablate, report. Every run
writes the resolved configuration (with the seed) next to its outputs so
results are reproducible from the artifacts alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import config as cfgmod
from .config import load_config, meta_config, model_config, resolved_text, synth_spec
from .data import split_target, synth_cities, write_city
from .errors import StgfslError
from .experiments import METHODS, ResultRow, prepare_data, run_ablations, run_method
from .meta_train import adapt_target, evaluate, train, write_log_csv
from .params import load_checkpoint, save_checkpoint
from .plots import save_heatmap, save_loss_curves, save_matrix_csv
from .stnn import stnn_forward

RESULT_COLUMNS = ("method", "city", "horizon_steps", "horizon_minutes", "mae", "rmse", "seed")


def _parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load(args) -> cfgmod.ExperimentConfig:
    cfg = load_config(args.config, _parse_overrides(args.set))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(resolved_text(cfg))
    return out


def write_results_csv(rows: list[ResultRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.method, r.city, r.horizon_steps, r.horizon_minutes, f"{r.mae:.6f}", f"{r.rmse:.6f}", r.seed]
            )
    return path


def cmd_synth(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    cities = synth_cities(synth_spec(cfg), cfg.seed)
    for city in cities:
        write_city(city, out / "cities" / city.name)
    print(f"wrote {len(cities)} cities under {out / 'cities'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    cfgmod.validate(cfg, need_sources=True, need_target=False)
    out = _outdir(cfg)
    data = prepare_data(cfg)
    result = train(data.sources, meta_config(cfg), model_config(cfg))
    save_checkpoint(result.theta, out / "checkpoint")
    write_log_csv(result.log, out / "train_log.csv")
    last = [r for r in result.log if r.episode == result.log[-1].episode]
    mean_q = sum(r.query_loss for r in last) / len(last)
    print(f"trained {cfg.episodes} episodes, final mean query loss {mean_q:.6f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load(args)
    cfgmod.validate(cfg, need_sources=False, need_target=True)
    out = _outdir(cfg)
    data = prepare_data(cfg)
    theta = load_checkpoint(args.checkpoint)
    fit = adapt_target(
        theta, data.split.adapt, data.target.graph, meta_config(cfg), model_config(cfg),
        city=data.target.name, seed=cfg.seed,
    )
    save_checkpoint(fit.theta, out / "adapted")
    with open(out / "adapt_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "loss"))
        for i, loss in enumerate(fit.losses):
            writer.writerow((i, f"{loss:.12e}"))
    print(f"adapted on {len(data.split.adapt)} windows, final loss {fit.losses[-1]:.6f}")
    print(f"checkpoint: {out / 'adapted.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    cfgmod.validate(cfg, need_sources=False, need_target=True)
    out = _outdir(cfg)
    data = prepare_data(cfg)
    theta = load_checkpoint(args.checkpoint)
    label = "stgfsl" if cfg.ablation == "none" else f"stgfsl-{cfg.ablation}"
    metrics = evaluate(
        theta, data.split.test, data.target.graph, data.split.stats, cfg.horizons,
        model_config(cfg), city=data.target.name,
    )
    rows = [
        ResultRow(label, data.target.name, h, h * data.target.series.interval_minutes,
                  m.mae, m.rmse, cfg.seed)
        for h, m in sorted(metrics.items())
    ]
    path = write_results_csv(rows, out / "results.csv")
    for r in rows:
        print(f"{r.method} horizon={r.horizon_steps} mae={r.mae:.4f} rmse={r.rmse:.4f}")
    print(f"results: {path}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load(args)
    need_sources = args.method not in ("ha", "target_only")
    cfgmod.validate(cfg, need_sources=need_sources, need_target=True)
    out = _outdir(cfg)
    outcome = run_method(cfg, args.method)
    path = write_results_csv(outcome.rows, out / "results.csv")
    for r in outcome.rows:
        print(f"{r.method} horizon={r.horizon_steps} mae={r.mae:.4f} rmse={r.rmse:.4f}")
    print(f"results: {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    cfgmod.validate(cfg, need_sources=True, need_target=True)
    out = _outdir(cfg)
    rows = run_ablations(cfg)
    path = write_results_csv(rows, out / "results.csv")
    methods = sorted({r.method for r in rows})
    print(f"ablation grid done: {', '.join(methods)}")
    print(f"results: {path}")
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    runs = Path(args.runs) if args.runs else out
    frames = []
    for path in sorted(runs.rglob("results.csv")):
        frames.append(pd.read_csv(path))
    if frames:
        table = pd.concat(frames, ignore_index=True)
        table.to_csv(out / "summary.csv", index=False)
        pivot = table.groupby(["method", "horizon_steps"])[["mae", "rmse"]].mean().reset_index()
        pivot.to_csv(out / "summary_mean.csv", index=False)
        print(f"aggregated {len(frames)} result files, {len(table)} rows")
    else:
        print("no results.csv files found")

    logs = sorted(runs.rglob("train_log.csv"))
    if logs:
        save_loss_curves(pd.read_csv(logs[0]), out / "loss_curves.png")
        print(f"loss curves: {out / 'loss_curves.png'}")

    checkpoints = sorted(runs.rglob("adapted.json")) or sorted(runs.rglob("checkpoint.json"))
    try:
        cfgmod.validate(cfg, need_sources=False, need_target=True)
        has_target = True
    except StgfslError:
        has_target = False
    if checkpoints and has_target:
        data = prepare_data(cfg)
        theta = load_checkpoint(checkpoints[0])
        x, _ = _first_window_tensor(data)
        try:
            _, a_meta = stnn_forward(
                x, data.target.graph, theta, model_config(cfg), city=data.target.name, need_meta=True
            )
        except StgfslError as exc:
            print(f"skipping heatmaps ({exc})")
            a_meta = None
        if a_meta is not None:
            save_matrix_csv(data.target.graph.adjacency, out / "adjacency.csv")
            save_heatmap(data.target.graph.adjacency, out / "adjacency.png", "adjacency")
            save_matrix_csv(a_meta.detach().numpy(), out / "meta_adjacency.csv")
            save_heatmap(a_meta.detach().numpy(), out / "meta_adjacency.png", "reconstructed adjacency")
            print(f"heatmaps: {out / 'adjacency.png'}, {out / 'meta_adjacency.png'}")
    return 0


def _first_window_tensor(data):
    w = data.split.test[0]
    x = torch.from_numpy(np.ascontiguousarray(w.x)).to(torch.float64)
    y = torch.from_numpy(np.ascontiguousarray(w.y)).to(torch.float64)
    return x, y


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgfsl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (default: out.dir)")

    p = sub.add_parser("synth", help="materialize synthetic city directories")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="meta-train on the source cities")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="few-shot adapt a checkpoint to the target")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run a reference method end to end")
    common(p)
    p.add_argument("--method", required=True, choices=[m for m in METHODS if m != "stgfsl"])
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", help="run the full model and its five ablations")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate results, render figures")
    common(p)
    p.add_argument("--runs", default=None, help="directory to scan (default: --out)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StgfslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
