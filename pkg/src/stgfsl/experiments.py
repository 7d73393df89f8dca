"""End-to-end experiment runs: data preparation, methods, result rows.

A method name picks one full pipeline against the configured target city:

    stgfsl              meta-train on sources, adapt, evaluate
    maml                same loop with the shared extractor and lam = 0
    target_only         train on the adapt set only
    fine_tuned_vanilla  pooled pretraining + target fitting, shared model
    fine_tuned_st_meta  pooled pretraining + target fitting, full model
    ha                  historical average profile of the adapt set

Ablation variants run through 'stgfsl' with meta.ablation set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .baselines import fine_tune, ha_metrics, historical_average, maml_preset, target_only
from .config import (
    ExperimentConfig,
    meta_config,
    model_config,
    synth_spec,
    uses_synth_sources,
    uses_synth_target,
)
from .data import (
    CityDataset,
    TargetSplit,
    load_city,
    pooled_stats,
    split_target,
    synth_cities,
)
from .errors import ConfigError
from .meta_train import HorizonMetrics, TrainResult, adapt_target, evaluate, train
from .params import ParamVector

METHODS = ("stgfsl", "maml", "target_only", "fine_tuned_vanilla", "fine_tuned_st_meta", "ha")


@dataclass
class ExperimentData:
    sources: list[CityDataset]
    target: CityDataset
    split: TargetSplit


@dataclass
class ResultRow:
    method: str
    city: str
    horizon_steps: int
    horizon_minutes: int
    mae: float
    rmse: float
    seed: int


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    """Load or synthesize the city family and cut the target split."""
    synth_src = uses_synth_sources(cfg)
    synth_tgt = uses_synth_target(cfg)
    if synth_src or synth_tgt:
        family = synth_cities(synth_spec(cfg), cfg.seed)
    sources = (
        list(family[:-1]) if synth_src else [load_city(d) for d in cfg.source_dirs]
    )
    target = family[-1] if synth_tgt else load_city(cfg.target_dir)
    stats = pooled_stats(sources) if cfg.target_stats == "source" else None
    split = split_target(
        target, cfg.few_shot_days, cfg.history, cfg.horizon, cfg.stride, stats=stats
    )
    return ExperimentData(sources=sources, target=target, split=split)


def _rows(method: str, city: str, metrics: dict[int, HorizonMetrics], interval: int, seed: int):
    return [
        ResultRow(
            method=method,
            city=city,
            horizon_steps=h,
            horizon_minutes=h * interval,
            mae=m.mae,
            rmse=m.rmse,
            seed=seed,
        )
        for h, m in sorted(metrics.items())
    ]


@dataclass
class MethodOutcome:
    rows: list[ResultRow]
    theta: ParamVector | None = None
    train_result: TrainResult | None = None


def run_method(cfg: ExperimentConfig, method: str, data: ExperimentData | None = None) -> MethodOutcome:
    """Run one method end to end and return its result rows."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
    if data is None:
        data = prepare_data(cfg)
    m_cfg = meta_config(cfg)
    mo_cfg = model_config(cfg)
    split = data.split
    target = data.target
    interval = target.series.interval_minutes
    label = method

    if method == "ha":
        raw_adapt = target.series.values[: split.adapt_length]
        profile = historical_average(raw_adapt, interval, t_offset=0)
        metrics = ha_metrics(profile, split.test, split.stats, cfg.horizons)
        return MethodOutcome(rows=_rows(label, target.name, metrics, interval, cfg.seed))

    if method == "maml":
        m_cfg, mo_cfg = maml_preset(m_cfg, mo_cfg)

    if method in ("stgfsl", "maml"):
        if method == "stgfsl" and mo_cfg.ablation != "none":
            label = f"stgfsl-{mo_cfg.ablation}"
        trained = train(data.sources, m_cfg, mo_cfg)
        adapted = adapt_target(
            trained.theta, split.adapt, target.graph, m_cfg, mo_cfg, city=target.name, seed=cfg.seed
        )
        theta = adapted.theta
        train_result = trained
    elif method == "target_only":
        fit = target_only(split.adapt, target.graph, m_cfg, mo_cfg, seed=cfg.seed, city=target.name)
        theta = fit.theta
        train_result = None
        m_cfg, mo_cfg = maml_preset(m_cfg, mo_cfg)  # evaluation uses the shared variant
    else:
        variant = "vanilla" if method == "fine_tuned_vanilla" else "st_meta"
        fit = fine_tune(
            data.sources,
            split.adapt,
            target.graph,
            m_cfg,
            mo_cfg,
            variant=variant,
            seed=cfg.seed,
            pretrain_steps=cfg.pretrain_steps,
            pretrain_recon=cfg.pretrain_recon,
            city=target.name,
        )
        theta = fit.theta
        train_result = None
        if variant == "vanilla":
            m_cfg, mo_cfg = maml_preset(m_cfg, mo_cfg)

    metrics = evaluate(
        theta, split.test, target.graph, split.stats, cfg.horizons, mo_cfg, city=target.name
    )
    return MethodOutcome(
        rows=_rows(label, target.name, metrics, interval, cfg.seed),
        theta=theta,
        train_result=train_result,
    )


def run_ablations(cfg: ExperimentConfig, data: ExperimentData | None = None) -> list[ResultRow]:
    """Full model plus the five ablation variants on one target."""
    if data is None:
        data = prepare_data(cfg)
    rows = []
    for ablation in ("none", "M1a", "M1b", "M1c", "M2", "M3"):
        variant_cfg = dataclasses.replace(cfg, ablation=ablation)
        outcome = run_method(variant_cfg, "stgfsl", data)
        label = "stgfsl" if ablation == "none" else f"stgfsl-{ablation}"
        for row in outcome.rows:
            row.method = label
        rows.extend(outcome.rows)
    return rows


def mean_mae(rows: list[ResultRow], method: str) -> float:
    picked = [r.mae for r in rows if r.method == method]
    if not picked:
        raise ValueError(f"no rows for method {method!r}")
    return sum(picked) / len(picked)
