"""Episodic training across source cities and few-shot adaptation.

Each episode samples a batch of tasks, one source city each, with disjoint
support and query window sets. Parameters take ``inner_steps`` plain
gradient steps on the support loss; the query loss of the adapted copy,
averaged over the batch, drives an adaptive outer step. With
``second_order`` the inner steps stay on the tape so the outer gradient
differentiates through them; otherwise the adapted copy is detached and
its query gradient is used directly (first-order approximation).

The training objective is joint_loss: mean squared prediction error plus
``lam`` times the adjacency reconstruction penalty of the node
embeddings, averaged over the batch windows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import CityDataset, CityGraph, NormStats, WindowSample, make_windows, zscore_invert
from .errors import (
    ContractError,
    DivergenceError,
    EmptyDatasetError,
    EvaluationError,
    ParameterError,
    SamplingError,
)
from .graph_recon import recon_loss
from .params import DTYPE, AdamState, ParamVector, adam_update
from .stnn import ModelConfig, init_theta, stnn_forward

DIVERGENCE_LIMIT = 1.0e6


@dataclass(frozen=True)
class MetaConfig:
    """Knobs of the episodic loop; window shape lives in ModelConfig."""

    alpha: float = 0.01  # inner/adaptation step size
    beta: float = 0.001  # outer step size
    lam: float = 1.5  # reconstruction weight
    inner_steps: int = 1
    support_size: int = 4
    query_size: int = 4
    task_batch: int = 5
    second_order: bool = True
    episodes: int = 500
    seed: int = 0
    recon_normalize: bool = True
    lr_decay: float = 0.99
    lr_decay_every: int = 100
    adapt_steps: int = 100
    adapt_batch: int = 16

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ParameterError("step sizes and lam must be nonnegative")
        if self.inner_steps < 0 or self.task_batch <= 0:
            raise ParameterError("inner_steps must be >= 0 and task_batch positive")
        if self.support_size <= 0 or self.query_size <= 0:
            raise ParameterError("support and query sizes must be positive")
        if self.lr_decay_every <= 0 or not (0 < self.lr_decay <= 1):
            raise ParameterError("lr decay schedule must have positive period and factor in (0, 1]")


def loss_scale(cfg: MetaConfig, model_cfg: ModelConfig) -> float:
    """Effective reconstruction weight; the M3 variant forces zero."""
    return 0.0 if model_cfg.ablation == "M3" else cfg.lam


@dataclass
class Task:
    """One episodic task: support and query windows from a single city."""

    city: str
    graph: CityGraph
    support: list[WindowSample]
    query: list[WindowSample]


@dataclass
class TaskPool:
    """Pre-windowed source cities, in z-scored units."""

    names: list[str]
    graphs: list[CityGraph]
    windows: list[list[WindowSample]]


def build_pool(sources: list[CityDataset], history: int, horizon: int, stride: int = 1) -> TaskPool:
    names, graphs, windows = [], [], []
    for ds in sources:
        norm = (ds.series.values - ds.stats.mean) / ds.stats.std
        names.append(ds.name)
        graphs.append(ds.graph)
        windows.append(make_windows(norm, history, horizon, stride))
    return TaskPool(names=names, graphs=graphs, windows=windows)


def sample_tasks(pool, cfg: MetaConfig, rng: np.random.Generator, model_cfg: ModelConfig | None = None):
    """Draw ``task_batch`` tasks; cities uniform, windows without replacement.

    ``pool`` is a TaskPool or a list of CityDatasets (windowed on the fly,
    which needs ``model_cfg`` for the window shape).
    """
    if not isinstance(pool, TaskPool):
        if model_cfg is None:
            raise ParameterError("sampling from datasets needs model_cfg for the window shape")
        pool = build_pool(pool, model_cfg.history, model_cfg.horizon)
    if not pool.names:
        raise SamplingError("no source cities to sample from")
    need = cfg.support_size + cfg.query_size
    tasks = []
    for _ in range(cfg.task_batch):
        c = int(rng.integers(len(pool.names)))
        avail = pool.windows[c]
        if len(avail) < need:
            raise SamplingError(
                f"city {pool.names[c]} has {len(avail)} windows, task needs {need}"
            )
        picks = rng.choice(len(avail), size=need, replace=False)
        chosen = [avail[int(i)] for i in picks]
        tasks.append(
            Task(
                city=pool.names[c],
                graph=pool.graphs[c],
                support=chosen[: cfg.support_size],
                query=chosen[cfg.support_size :],
            )
        )
    return tasks


def windows_to_tensors(windows, dtype=DTYPE) -> tuple[Tensor, Tensor]:
    if not windows:
        raise ContractError("empty window list")
    x = torch.from_numpy(np.stack([w.x for w in windows])).to(dtype)
    y = torch.from_numpy(np.stack([w.y for w in windows])).to(dtype)
    return x, y


def joint_loss_parts(
    theta: ParamVector,
    windows,
    graph: CityGraph,
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    city: str | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, prediction mse, reconstruction penalty) on a window batch."""
    lam = loss_scale(cfg, model_cfg)
    x, y = windows_to_tensors(windows)
    pred, a_meta = stnn_forward(x, graph, theta, model_cfg, city=city, need_meta=lam > 0)
    l_e = ((pred - y) ** 2).mean()
    if lam > 0:
        target = torch.from_numpy(graph.adjacency).to(x.dtype)
        l_g = recon_loss(a_meta, target, normalize=cfg.recon_normalize).mean()
    else:
        l_g = x.new_zeros(())
    return l_e + lam * l_g, l_e, l_g


def joint_loss(theta, windows, graph, cfg, model_cfg, city=None) -> Tensor:
    return joint_loss_parts(theta, windows, graph, cfg, model_cfg, city)[0]


def _check_finite(value: Tensor, what: str, episode: int | None = None):
    v = float(value.detach())
    if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged to {v}", episode=episode)


def inner_adapt(
    theta: ParamVector,
    task: Task,
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    episode: int | None = None,
) -> tuple[ParamVector, float]:
    """Gradient-descend the support loss; returns (theta', first support loss).

    With ``second_order`` the returned parameters carry the update graph;
    otherwise each step is detached (first-order).
    """
    current = theta
    first_loss = None
    for _ in range(cfg.inner_steps):
        loss = joint_loss(current, task.support, task.graph, cfg, model_cfg, task.city)
        _check_finite(loss, "support loss", episode)
        if first_loss is None:
            first_loss = float(loss.detach())
        grads = torch.autograd.grad(
            loss, current.tensors(), create_graph=cfg.second_order, allow_unused=True
        )
        current = current.step(grads, cfg.alpha)
        if not cfg.second_order:
            current = current.detached(requires_grad=True)
    if first_loss is None:
        first_loss = float(
            joint_loss(theta, task.support, task.graph, cfg, model_cfg, task.city).detach()
        )
        if cfg.second_order:
            current = theta
        else:
            current = theta.detached(requires_grad=True)
    return current, first_loss


@dataclass
class LogRow:
    episode: int
    city: str
    support_loss: float
    query_loss: float
    pred_loss: float
    recon_loss: float


LOG_COLUMNS = ("episode", "city", "support_loss", "query_loss", "pred_loss", "recon_loss")


def write_log_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.episode,
                    r.city,
                    f"{r.support_loss:.12e}",
                    f"{r.query_loss:.12e}",
                    f"{r.pred_loss:.12e}",
                    f"{r.recon_loss:.12e}",
                ]
            )
    return path


@dataclass
class MetaStepResult:
    theta: ParamVector
    opt_state: AdamState
    rows: list[LogRow]


def meta_step(
    theta: ParamVector,
    tasks: list[Task],
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    opt_state: AdamState | None = None,
    lr: float | None = None,
    episode: int = 0,
) -> MetaStepResult:
    """One outer update from a task batch.

    The outer objective is the mean adapted query loss over the batch; the
    update itself is an adaptive-moment step, so a fresh call with
    inner_steps = 0 reduces to a plain optimizer step on the mean query
    loss.
    """
    if opt_state is None:
        opt_state = AdamState()
    if lr is None:
        lr = cfg.beta
    rows = []
    grads_by_name: dict[str, Tensor] = {}
    if cfg.second_order:
        total = None
        for task in tasks:
            adapted, support_loss = inner_adapt(theta, task, cfg, model_cfg, episode)
            q_total, q_pred, q_recon = joint_loss_parts(
                adapted, task.query, task.graph, cfg, model_cfg, task.city
            )
            _check_finite(q_total, "query loss", episode)
            rows.append(
                LogRow(episode, task.city, support_loss, float(q_total.detach()), float(q_pred.detach()), float(q_recon.detach()))
            )
            total = q_total if total is None else total + q_total
        objective = total / len(tasks)
        grads = torch.autograd.grad(objective, theta.tensors(), allow_unused=True)
        grads_by_name = {name: g for name, _, g in theta.zip_grads(grads)}
    else:
        scale = 1.0 / len(tasks)
        for task in tasks:
            adapted, support_loss = inner_adapt(theta, task, cfg, model_cfg, episode)
            q_total, q_pred, q_recon = joint_loss_parts(
                adapted, task.query, task.graph, cfg, model_cfg, task.city
            )
            _check_finite(q_total, "query loss", episode)
            rows.append(
                LogRow(episode, task.city, support_loss, float(q_total.detach()), float(q_pred.detach()), float(q_recon.detach()))
            )
            grads = torch.autograd.grad(q_total, adapted.tensors(), allow_unused=True)
            for name, _, g in adapted.zip_grads(grads):
                if g is None:
                    continue
                g = g.detach() * scale
                grads_by_name[name] = grads_by_name.get(name, 0) + g
    new_theta, new_state = adam_update(theta, grads_by_name, opt_state, lr)
    return MetaStepResult(theta=new_theta, opt_state=new_state, rows=rows)


@dataclass
class TrainResult:
    theta: ParamVector
    log: list[LogRow]


def train(sources: list[CityDataset], cfg: MetaConfig, model_cfg: ModelConfig) -> TrainResult:
    """Full episodic run over the source cities.

    Deterministic given (sources, configs): initialization and sampling
    use dedicated generators seeded from cfg.seed. The outer step size
    decays by ``lr_decay`` every ``lr_decay_every`` episodes. Divergence
    aborts with the log collected so far attached to the error.
    """
    cities = {ds.name: ds.graph.num_nodes for ds in sources}
    theta = init_theta(model_cfg, cfg.seed, cities=cities)
    pool = build_pool(sources, model_cfg.history, model_cfg.horizon)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    log: list[LogRow] = []
    for episode in range(cfg.episodes):
        tasks = sample_tasks(pool, cfg, rng)
        lr = cfg.beta * cfg.lr_decay ** (episode // cfg.lr_decay_every)
        try:
            result = meta_step(theta, tasks, cfg, model_cfg, state, lr, episode)
        except DivergenceError as err:
            err.log = log
            raise
        theta, state = result.theta, result.opt_state
        log.extend(result.rows)
    return TrainResult(theta=theta, log=log)


@dataclass
class FitResult:
    theta: ParamVector
    losses: list[float]

    @property
    def best(self) -> float:
        return min(self.losses) if self.losses else float("nan")


def fit_windows(
    theta: ParamVector,
    windows,
    graph: CityGraph,
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    seed: int,
    city: str | None = None,
    steps: int | None = None,
    lr: float | None = None,
    batch_size: int | None = None,
) -> FitResult:
    """Plain minibatch gradient descent of joint_loss on a window set."""
    steps = cfg.adapt_steps if steps is None else steps
    lr = cfg.alpha if lr is None else lr
    batch_size = cfg.adapt_batch if batch_size is None else batch_size
    if not windows:
        raise EmptyDatasetError("no windows to fit on")
    current = theta.clone(requires_grad=True)
    rng = np.random.default_rng(seed)
    order: list[int] = []
    losses: list[float] = []
    for step in range(steps):
        if len(order) < batch_size:
            order = list(rng.permutation(len(windows)))
        take, order = order[:batch_size], order[batch_size:]
        batch = [windows[i] for i in take]
        loss = joint_loss(current, batch, graph, cfg, model_cfg, city)
        _check_finite(loss, "adaptation loss", step)
        losses.append(float(loss.detach()))
        grads = torch.autograd.grad(loss, current.tensors(), allow_unused=True)
        current = current.step(grads, lr).detached(requires_grad=True)
    return FitResult(theta=current, losses=losses)


def adapt_target(
    theta: ParamVector,
    adapt_windows,
    graph: CityGraph,
    cfg: MetaConfig,
    model_cfg: ModelConfig,
    city: str = "target",
    seed: int | None = None,
) -> FitResult:
    """Few-shot adaptation of meta-trained parameters to a target city.

    Continues the inner-loop rule: plain gradient descent at rate alpha on
    minibatches of the adapt windows. The M1c variant gets a fresh
    embedding table for the target city, everything else starts from the
    meta solution. Zero steps returns the parameters unchanged.
    """
    seed = cfg.seed if seed is None else seed
    start = theta.clone(requires_grad=True)
    key = f"embed.{city}"
    if model_cfg.ablation == "M1c" and key not in start:
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(model_cfg.meta_dim)
        table = torch.empty((graph.num_nodes, model_cfg.meta_dim), dtype=DTYPE)
        table.uniform_(-bound, bound, generator=gen)
        table.requires_grad_(True)
        start = start.with_named({key: table})
    return fit_windows(start, adapt_windows, graph, cfg, model_cfg, seed, city=city)


@dataclass(frozen=True)
class HorizonMetrics:
    mae: float
    rmse: float


def horizon_metrics(pred: np.ndarray, truth: np.ndarray, horizons) -> dict[int, HorizonMetrics]:
    """Per-horizon MAE/RMSE of raw-scale predictions (B, M, N, d)."""
    out = {}
    for h in horizons:
        err = pred[:, h - 1] - truth[:, h - 1]
        mae = float(np.abs(err).mean())
        rmse = float(np.sqrt((err**2).mean()))
        out[h] = HorizonMetrics(mae=mae, rmse=rmse)
    return out


def evaluate(
    theta: ParamVector,
    test_windows,
    graph: CityGraph,
    stats: NormStats,
    horizons,
    model_cfg: ModelConfig,
    city: str | None = None,
    batch_size: int = 256,
) -> dict[int, HorizonMetrics]:
    """Raw-scale error metrics of a model on a test window set.

    Predictions and targets are mapped back through the z-score statistics
    before the metrics, so numbers are in signal units.
    """
    if not test_windows:
        raise EvaluationError("empty test set")
    horizons = list(horizons)
    if not horizons or any(h < 1 or h > model_cfg.horizon for h in horizons):
        raise ParameterError(f"horizons must lie in 1..{model_cfg.horizon}, got {horizons}")
    preds = []
    truths = []
    with torch.no_grad():
        for i in range(0, len(test_windows), batch_size):
            chunk = test_windows[i : i + batch_size]
            x, y = windows_to_tensors(chunk)
            pred, _ = stnn_forward(x, graph, theta, model_cfg, city=city, need_meta=False)
            preds.append(pred.numpy())
            truths.append(y.numpy())
    pred = zscore_invert(np.concatenate(preds), stats)
    truth = zscore_invert(np.concatenate(truths), stats)
    return horizon_metrics(pred, truth, horizons)
