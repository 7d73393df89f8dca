"""Reference methods the transfer model is compared against.

historical_average   per-slot daily profile of the adapt data
target_only          shared-extractor model trained on adapt data alone
fine_tune            pooled-source pretraining, then target fitting
maml_preset          episodic transfer with generation and the
                     reconstruction term switched off

Every method funnels its predictions through the same horizon_metrics
reduction as the main model, so numbers are directly comparable.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import DAY_MINUTES, CityDataset, CityGraph, NormStats, zscore_invert
from .errors import EmptyDatasetError, ParameterError, ValidationError
from .meta_train import (
    FitResult,
    HorizonMetrics,
    MetaConfig,
    _check_finite,
    build_pool,
    fit_windows,
    horizon_metrics,
    joint_loss,
)
from .params import AdamState, ParamVector, adam_update
from .stnn import ModelConfig, init_theta

log = logging.getLogger(__name__)


@dataclass
class DailyProfile:
    """Mean signal per time-of-day slot; values is (slots, N, d)."""

    values: np.ndarray
    interval_minutes: int

    @property
    def slots(self) -> int:
        return self.values.shape[0]

    def __post_init__(self):
        if DAY_MINUTES % self.interval_minutes != 0:
            raise ValidationError(f"interval {self.interval_minutes} does not divide a day")
        if self.values.shape[0] != DAY_MINUTES // self.interval_minutes:
            raise ValidationError(
                f"profile has {self.values.shape[0]} slots, interval implies "
                f"{DAY_MINUTES // self.interval_minutes}"
            )


def historical_average(values: np.ndarray, interval_minutes: int, t_offset: int = 0) -> DailyProfile:
    """Per-slot mean of a raw (S, N, d) series.

    ``t_offset`` is the absolute index of the first row, which fixes the
    time-of-day phase. Slots never observed fall back to the node's
    overall mean (flagged in the log).
    """
    if values.ndim != 3 or values.shape[0] == 0:
        raise EmptyDatasetError("historical average needs a nonempty (S, N, d) series")
    slots = DAY_MINUTES // interval_minutes
    profile = np.empty((slots,) + values.shape[1:], dtype=np.float64)
    node_mean = values.mean(axis=0)
    empty = []
    for s in range(slots):
        rows = values[(np.arange(values.shape[0]) + t_offset) % slots == s]
        if len(rows) == 0:
            profile[s] = node_mean
            empty.append(s)
        else:
            profile[s] = rows.mean(axis=0)
    if empty:
        log.warning("historical average: %d of %d slots unobserved, filled with node means", len(empty), slots)
    return DailyProfile(values=profile, interval_minutes=interval_minutes)


def profile_predict(profile: DailyProfile, t0s, history: int, horizon: int) -> np.ndarray:
    """Profile forecasts (B, M, N, d) for windows starting at absolute t0s."""
    t0s = np.asarray(t0s, dtype=np.int64)
    steps = t0s[:, None] + history + np.arange(horizon)[None, :]
    return profile.values[steps % profile.slots]


def ha_metrics(
    profile: DailyProfile, test_windows, stats: NormStats, horizons
) -> dict[int, HorizonMetrics]:
    """Evaluate a daily profile on z-scored test windows.

    Truth is mapped back to raw units through ``stats``; profile forecasts
    are already raw.
    """
    if not test_windows:
        raise EmptyDatasetError("empty test set")
    horizon = test_windows[0].y.shape[0]
    history = test_windows[0].x.shape[0]
    pred = profile_predict(profile, [w.t0 for w in test_windows], history, horizon)
    truth = zscore_invert(np.stack([w.y for w in test_windows]), stats)
    return horizon_metrics(pred, truth, horizons)


def _shared_variant(cfg: MetaConfig, model_cfg: ModelConfig) -> tuple[MetaConfig, ModelConfig]:
    return dataclasses.replace(cfg, lam=0.0), dataclasses.replace(model_cfg, ablation="M2")


def maml_preset(cfg: MetaConfig, model_cfg: ModelConfig) -> tuple[MetaConfig, ModelConfig]:
    """Episodic transfer without generation or reconstruction.

    Identical update rule to the full pipeline configured with the shared
    extractor (M2) and lam = 0; exposed as a named preset so the baseline
    is always exactly that configuration.
    """
    return _shared_variant(cfg, model_cfg)


def target_only(
    adapt_windows,
    graph: CityGraph,
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    seed: int,
    city: str = "target",
) -> FitResult:
    """Train the shared-extractor model from scratch on the adapt set.

    No transfer: fresh initialization, then the same optimizer settings
    adaptation uses (rate alpha, adapt_steps minibatch steps).
    """
    b_cfg, b_model = _shared_variant(cfg, model_cfg)
    theta = init_theta(b_model, seed)
    return fit_windows(theta, adapt_windows, graph, b_cfg, b_model, seed, city=city)


def fine_tune(
    sources: list[CityDataset],
    adapt_windows,
    target_graph: CityGraph,
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    variant: str = "vanilla",
    seed: int = 0,
    pretrain_steps: int = 300,
    pretrain_batch: int = 16,
    pretrain_recon: bool = True,
    city: str = "target",
) -> FitResult:
    """Pretrain on pooled source windows, then fit the target adapt set.

    variant 'vanilla' uses the shared extractor with no reconstruction
    term anywhere; 'st_meta' keeps the full generation pipeline and, with
    ``pretrain_recon``, the reconstruction term in both phases. Pretraining
    is plain supervised minibatch training with the outer optimizer (no
    episodes, no inner loop); zero pretraining steps makes the vanilla
    variant coincide with target_only.
    """
    if variant not in ("vanilla", "st_meta"):
        raise ParameterError(f"unknown fine_tune variant {variant!r}")
    if variant == "vanilla":
        eff_cfg, eff_model = _shared_variant(cfg, model_cfg)
    else:
        eff_model = model_cfg
        eff_cfg = cfg if pretrain_recon else dataclasses.replace(cfg, lam=0.0)
    theta = init_theta(eff_model, seed, cities={ds.name: ds.graph.num_nodes for ds in sources})

    if pretrain_steps > 0:
        if not sources:
            raise EmptyDatasetError("fine_tune pretraining needs source cities")
        pool = build_pool(sources, eff_model.history, eff_model.horizon)
        rng = np.random.default_rng(seed)
        state = AdamState()
        for step in range(pretrain_steps):
            c = int(rng.integers(len(pool.names)))
            avail = pool.windows[c]
            picks = rng.choice(len(avail), size=min(pretrain_batch, len(avail)), replace=False)
            batch = [avail[int(i)] for i in picks]
            loss = joint_loss(theta, batch, pool.graphs[c], eff_cfg, eff_model, pool.names[c])
            _check_finite(loss, "pretraining loss", step)
            grads = torch.autograd.grad(loss, theta.tensors(), allow_unused=True)
            lr = eff_cfg.beta * eff_cfg.lr_decay ** (step // eff_cfg.lr_decay_every)
            grads_by_name = {name: g for name, _, g in theta.zip_grads(grads)}
            theta, state = adam_update(theta, grads_by_name, state, lr)

    return fit_windows(theta, adapt_windows, target_graph, eff_cfg, eff_model, seed, city=city)
