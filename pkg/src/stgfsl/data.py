"""Graph datasets and signal plumbing.

A city is a sensor graph plus a regularly sampled multivariate signal.
On disk a city is a directory:

    meta.json       {"name", "num_nodes", "interval_minutes", "feature_dim"}
    signals.csv     L rows, num_nodes * feature_dim columns (node-major:
                    columns [n*d .. n*d+d) belong to node n). Empty cells
                    mark missing observations.
    edges.csv       one "src,dst,weight" row per edge, 0-based indices.
    distances.csv   optional num_nodes x num_nodes matrix.

Directed edges are accepted on load; the binary adjacency used everywhere
downstream is the symmetrized closure. Missing values are filled by linear
interpolation along time with nearest-value extension at the ends, so the
series handed to models is always complete.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    DegenerateStatsError,
    EmptyDatasetError,
    LoadError,
    ParameterError,
    ValidationError,
)

log = logging.getLogger(__name__)

DAY_MINUTES = 1440


@dataclass(frozen=True)
class CityGraph:
    """Static sensor graph of one city.

    ``adjacency`` is binary, symmetric, zero-diagonal. ``edges`` keeps the
    (possibly directed, possibly weighted) source rows for provenance.
    """

    num_nodes: int
    edges: tuple[tuple[int, int, float], ...]
    adjacency: np.ndarray
    distances: np.ndarray | None = None

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ValidationError(f"a graph needs at least 2 nodes, got {self.num_nodes}")
        a = self.adjacency
        if a.shape != (self.num_nodes, self.num_nodes):
            raise ValidationError(f"adjacency shape {a.shape} does not match num_nodes={self.num_nodes}")
        if not np.array_equal(a, a.T):
            raise ValidationError("adjacency must be symmetric")
        if np.any((a != 0) & (a != 1)):
            raise ValidationError("adjacency must be binary")
        if np.any(np.diag(a) != 0):
            raise ValidationError("adjacency must have a zero diagonal")
        for s, d, _ in self.edges:
            if not (0 <= s < self.num_nodes and 0 <= d < self.num_nodes):
                raise ValidationError(f"edge ({s},{d}) out of range for {self.num_nodes} nodes")
        if self.distances is not None:
            if self.distances.shape != (self.num_nodes, self.num_nodes):
                raise ValidationError("distances matrix shape mismatch")


def adjacency_from_edges(num_nodes: int, edges) -> np.ndarray:
    """Symmetrized binary adjacency from (src, dst, weight) triples.

    Self loops are ignored; an entry is set when either direction appears
    with positive weight.
    """
    a = np.zeros((num_nodes, num_nodes), dtype=np.float64)
    for s, d, w in edges:
        if not (0 <= s < num_nodes and 0 <= d < num_nodes):
            raise ValidationError(f"edge ({s},{d}) out of range for {num_nodes} nodes")
        if s == d:
            continue
        if w > 0:
            a[s, d] = 1.0
            a[d, s] = 1.0
    return a


@dataclass
class SignalSeries:
    """Signal tensor (L, N, d) on a fixed sampling interval.

    ``observed_mask`` has shape (L, N); a False entry means the node had at
    least one missing feature at that timestep in the raw file.
    """

    values: np.ndarray
    interval_minutes: int
    observed_mask: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValidationError(f"series values must be (L, N, d), got shape {v.shape}")
        if self.interval_minutes <= 0 or DAY_MINUTES % self.interval_minutes != 0:
            raise ValidationError(
                f"interval_minutes={self.interval_minutes} must be positive and divide {DAY_MINUTES}"
            )
        if self.observed_mask.shape != v.shape[:2]:
            raise ValidationError("observed_mask must be (L, N)")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class NormStats:
    """Scalar z-score statistics (one mean/std for the whole city)."""

    mean: float
    std: float


@dataclass(frozen=True)
class WindowSample:
    """One supervised example: ``x`` is (T, N, d), ``y`` is (M, N, d).

    ``t0`` is the absolute index of the first input timestep in the city
    series, which keeps time-of-day alignment recoverable after splits.
    """

    x: np.ndarray
    y: np.ndarray
    t0: int


@dataclass(frozen=True)
class CityDataset:
    graph: CityGraph
    series: SignalSeries
    stats: NormStats
    name: str

    def __post_init__(self):
        if self.series.num_nodes != self.graph.num_nodes:
            raise ValidationError(
                f"series has {self.series.num_nodes} nodes but graph has {self.graph.num_nodes}"
            )


def interpolate_missing(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill unobserved timesteps by linear interpolation per node.

    Ends are extended with the nearest observed value. A node with no
    observations at all cannot be repaired and raises.
    """
    out = values.astype(np.float64, copy=True)
    length, num_nodes, _ = out.shape
    t = np.arange(length)
    for n in range(num_nodes):
        obs = mask[:, n]
        if not obs.any():
            raise ValidationError(f"node {n} has no observed values")
        if obs.all():
            continue
        for f in range(out.shape[2]):
            col = out[:, n, f]
            col[~obs] = np.interp(t[~obs], t[obs], col[obs])
    return out


def fit_zscore(series: SignalSeries) -> NormStats:
    """Population mean/std over every entry of the series."""
    mean = float(series.values.mean())
    std = float(series.values.std())
    if std == 0.0:
        raise DegenerateStatsError("series is constant, z-score statistics are degenerate")
    return NormStats(mean=mean, std=std)


def zscore_apply(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean) / stats.std


def zscore_invert(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.std + stats.mean


def apply_zscore(series: SignalSeries, stats: NormStats) -> SignalSeries:
    return dataclasses.replace(series, values=zscore_apply(series.values, stats))


def invert_zscore(series: SignalSeries, stats: NormStats) -> SignalSeries:
    return dataclasses.replace(series, values=zscore_invert(series.values, stats))


def pooled_stats(datasets) -> NormStats:
    """Z-score statistics over the concatenation of several cities."""
    total = 0
    s1 = 0.0
    s2 = 0.0
    for ds in datasets:
        v = ds.series.values
        total += v.size
        s1 += float(v.sum())
        s2 += float((v.astype(np.float64) ** 2).sum())
    if total == 0:
        raise EmptyDatasetError("no data to fit statistics on")
    mean = s1 / total
    var = s2 / total - mean * mean
    std = math.sqrt(max(var, 0.0))
    if std == 0.0:
        raise DegenerateStatsError("pooled series is constant")
    return NormStats(mean=mean, std=std)


def gaussian_adjacency(
    distances: np.ndarray, sigma: float | None = None, kappa: float = 0.1
) -> CityGraph:
    """Thresholded Gaussian kernel graph from a pairwise distance matrix.

    w_ij = exp(-(d_ij / sigma)^2); the edge (i, j) is kept iff w_ij >= kappa
    and i != j. ``sigma`` defaults to the standard deviation of all
    off-diagonal pairwise distances.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValidationError("distances must be a square matrix")
    if np.any(d < 0):
        raise ValidationError("distances must be nonnegative")
    if np.any(np.diag(d) != 0):
        raise ValidationError("distances must have a zero diagonal")
    n = d.shape[0]
    if sigma is None:
        off = d[~np.eye(n, dtype=bool)]
        sigma = float(off.std())
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    w = np.exp(-((d / sigma) ** 2))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if w[i, j] >= kappa:
                edges.append((i, j, float(w[i, j])))
    adjacency = adjacency_from_edges(n, edges)
    return CityGraph(num_nodes=n, edges=tuple(edges), adjacency=adjacency, distances=d)


def make_windows(series, history: int, horizon: int, stride: int = 1, t_offset: int = 0):
    """Cut sliding (input, target) windows out of a series.

    ``series`` may be a SignalSeries or a raw (L, N, d) array. Returns
    floor((L - history - horizon) / stride) + 1 samples; raises when the
    series is shorter than one full window.
    """
    values = series.values if isinstance(series, SignalSeries) else np.asarray(series)
    if history <= 0 or horizon <= 0 or stride <= 0:
        raise ParameterError("history, horizon and stride must be positive")
    length = values.shape[0]
    span = history + horizon
    if length < span:
        raise EmptyDatasetError(f"series of length {length} cannot fit a {span}-step window")
    out = []
    for t0 in range(0, length - span + 1, stride):
        out.append(
            WindowSample(x=values[t0 : t0 + history], y=values[t0 + history : t0 + span], t0=t0 + t_offset)
        )
    return out


@dataclass(frozen=True)
class TargetSplit:
    """Few-shot split of a target city: a small adapt set and a test set."""

    adapt: list
    test: list
    stats: NormStats
    adapt_length: int


def split_target(
    dataset: CityDataset,
    few_shot_days: int,
    history: int,
    horizon: int,
    stride: int = 1,
    stats: NormStats | None = None,
) -> TargetSplit:
    """Reserve the first ``few_shot_days`` of a city for adaptation.

    The adapt portion is the first few_shot_days * (1440 / interval)
    timesteps; everything after it is the test portion. Windows never
    cross the boundary. When ``stats`` is None the z-score statistics are
    fit on the adapt portion alone, which is all a few-shot deployment
    would have; pass pooled source stats to override.
    """
    if few_shot_days <= 0:
        raise ParameterError("few_shot_days must be positive")
    series = dataset.series
    steps = few_shot_days * (DAY_MINUTES // series.interval_minutes)
    if series.length <= steps:
        raise ValidationError(
            f"series has {series.length} steps, not more than the {steps}-step adapt portion"
        )
    adapt_values = series.values[:steps]
    test_values = series.values[steps:]
    if stats is None:
        adapt_series = SignalSeries(
            values=adapt_values,
            interval_minutes=series.interval_minutes,
            observed_mask=series.observed_mask[:steps],
        )
        stats = fit_zscore(adapt_series)
    adapt = make_windows(zscore_apply(adapt_values, stats), history, horizon, stride, t_offset=0)
    test = make_windows(zscore_apply(test_values, stats), history, horizon, stride, t_offset=steps)
    return TargetSplit(adapt=adapt, test=test, stats=stats, adapt_length=steps)


def load_city(path) -> CityDataset:
    """Load one city directory (see module docstring for the layout)."""
    root = Path(path)
    meta_path = root / "meta.json"
    signals_path = root / "signals.csv"
    edges_path = root / "edges.csv"
    if not meta_path.is_file():
        raise LoadError(f"missing {meta_path}")
    if not signals_path.is_file():
        raise LoadError(f"missing {signals_path}")
    if not edges_path.is_file():
        raise LoadError(f"missing {edges_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"unreadable {meta_path}: {exc}") from exc
    for key in ("name", "num_nodes", "interval_minutes", "feature_dim"):
        if key not in meta:
            raise ValidationError(f"{meta_path} is missing key {key!r}")
    num_nodes = int(meta["num_nodes"])
    feature_dim = int(meta["feature_dim"])

    frame = pd.read_csv(signals_path, header=None, float_precision="round_trip")
    if frame.shape[1] != num_nodes * feature_dim:
        raise ValidationError(
            f"{signals_path} has {frame.shape[1]} columns, expected "
            f"{num_nodes}*{feature_dim}={num_nodes * feature_dim}"
        )
    raw = frame.to_numpy(dtype=np.float64).reshape(len(frame), num_nodes, feature_dim)
    mask = ~np.isnan(raw).any(axis=2)
    values = interpolate_missing(np.nan_to_num(raw), mask) if not mask.all() else raw

    edge_frame = pd.read_csv(edges_path, header=None)
    if edge_frame.shape[1] != 3:
        raise ValidationError(f"{edges_path} rows must be src,dst,weight")
    edges = tuple(
        (int(s), int(d), float(w)) for s, d, w in edge_frame.to_numpy() if int(s) != int(d)
    )
    try:
        adjacency = adjacency_from_edges(num_nodes, edges)
    except ValidationError as exc:
        raise ValidationError(f"{edges_path}: {exc}") from exc

    distances = None
    distances_path = root / "distances.csv"
    if distances_path.is_file():
        distances = pd.read_csv(distances_path, header=None, float_precision="round_trip").to_numpy(
            dtype=np.float64
        )
        if distances.shape != (num_nodes, num_nodes):
            raise ValidationError(f"{distances_path} must be {num_nodes}x{num_nodes}")

    graph = CityGraph(num_nodes=num_nodes, edges=edges, adjacency=adjacency, distances=distances)
    series = SignalSeries(
        values=values,
        interval_minutes=int(meta["interval_minutes"]),
        observed_mask=mask,
    )
    return CityDataset(graph=graph, series=series, stats=fit_zscore(series), name=str(meta["name"]))


def write_city(dataset: CityDataset, path) -> Path:
    """Materialize a city as a dataset directory; inverse of load_city."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    series = dataset.series
    meta = {
        "name": dataset.name,
        "num_nodes": dataset.graph.num_nodes,
        "interval_minutes": series.interval_minutes,
        "feature_dim": series.feature_dim,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    flat = series.values.reshape(series.length, -1)
    with open(root / "signals.csv", "w") as fh:
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(root / "edges.csv", "w") as fh:
        for s, d, w in dataset.graph.edges:
            fh.write(f"{s},{d},{repr(float(w))}\n")
    if dataset.graph.distances is not None:
        with open(root / "distances.csv", "w") as fh:
            for row in dataset.graph.distances:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return root


@dataclass(frozen=True)
class SynthSpec:
    """Family of synthetic cities sharing one dynamics prior.

    Every city follows x[t+1] = rho * A_hat x[t] + s[t+1] + noise, where
    s is a per-node daily sinusoid and A_hat is the row-normalized
    adjacency. (rho, amplitude, base level, phase) are drawn per city from
    fixed ranges, so cities share structure but differ in detail. Node
    phases follow planar position, which ties graph proximity to signal
    similarity.
    """

    source_nodes: tuple[int, ...] = (20, 20, 20)
    target_nodes: int = 15
    length: int = 2016
    # 30-minute slots: one few-shot day still yields a usable window set
    # while each window spans enough of the daily cycle to identify phase.
    interval_minutes: int = 30
    feature_dim: int = 1
    mean_degree: float = 4.0
    noise: float = 0.5
    rho_range: tuple[float, float] = (0.2, 0.6)
    # Graph smoothing attenuates the node-phase field by a graph-dependent
    # factor, so without rescaling some cities come out nearly in-phase
    # while others stay diverse. Fixing the spread keeps the per-node
    # learning problem comparable across cities and seeds.
    phase_spread: float = 1.25

    def __post_init__(self):
        if self.length <= 0 or self.target_nodes < 2 or any(n < 2 for n in self.source_nodes):
            raise ParameterError("synth spec needs length > 0 and at least 2 nodes per city")
        if self.mean_degree <= 0:
            raise ParameterError("mean_degree must be positive")
        if self.phase_spread < 0:
            raise ParameterError("phase_spread must be nonnegative")
        lo, hi = self.rho_range
        if not (0.0 <= lo <= hi < 1.0):  # A_hat is row-stochastic, rho < 1 keeps it stable
            raise ParameterError("rho_range must satisfy 0 <= lo <= hi < 1")


def _geometric_graph(n: int, mean_degree: float, rng: np.random.Generator) -> CityGraph:
    # Radius set so the expected degree of a uniform point matches roughly.
    points = rng.uniform(0.0, 1.0, size=(n, 2))
    radius = math.sqrt(mean_degree / (math.pi * max(n - 1, 1)))
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] <= radius:
                edges.append((i, j, 1.0))
    adjacency = adjacency_from_edges(n, edges)
    return CityGraph(num_nodes=n, edges=tuple(edges), adjacency=adjacency, distances=dist)


def _synth_city(name: str, n: int, spec: SynthSpec, rng: np.random.Generator) -> CityDataset:
    graph = _geometric_graph(n, spec.mean_degree, rng)
    steps_per_day = DAY_MINUTES // spec.interval_minutes

    rho = rng.uniform(*spec.rho_range)
    base = rng.uniform(40.0, 60.0)
    amplitude = rng.uniform(5.0, 15.0)
    phase_city = rng.uniform(0.0, 2.0 * math.pi)
    # Per-node phases with spatial structure: smooth random phases over the
    # graph so that connected nodes peak at nearby times.
    jitter = rng.uniform(0.0, 2.0 * math.pi, size=(n, spec.feature_dim))
    a_hat = graph.adjacency.copy()
    deg = a_hat.sum(axis=1, keepdims=True)
    a_hat = np.divide(a_hat, deg, out=np.zeros_like(a_hat), where=deg > 0)
    phase = jitter
    for _ in range(4):
        phase = 0.5 * phase + 0.5 * (a_hat @ phase)
    dev = phase - phase.mean(axis=0, keepdims=True)
    scale = dev.std()
    if scale > 1e-12:
        phase = dev * (spec.phase_spread / scale)
    phase = phase + phase_city

    t = np.arange(spec.length)[:, None, None]
    sinusoid = base + amplitude * np.sin(2.0 * math.pi * t / steps_per_day + phase[None, :, :])

    values = np.empty((spec.length, n, spec.feature_dim), dtype=np.float64)
    eps = rng.normal(0.0, spec.noise, size=values.shape) if spec.noise > 0 else np.zeros_like(values)
    values[0] = sinusoid[0] + eps[0]
    for step in range(1, spec.length):
        diffused = np.einsum("ij,jf->if", a_hat * rho, values[step - 1])
        values[step] = diffused + sinusoid[step] + eps[step]

    series = SignalSeries(
        values=values,
        interval_minutes=spec.interval_minutes,
        observed_mask=np.ones((spec.length, n), dtype=bool),
    )
    return CityDataset(graph=graph, series=series, stats=fit_zscore(series), name=name)


def synth_cities(spec: SynthSpec, seed: int) -> list[CityDataset]:
    """Deterministic synthetic city family: sources first, target last."""
    rng = np.random.default_rng(seed)
    cities = [
        _synth_city(f"source_{i}", n, spec, rng) for i, n in enumerate(spec.source_nodes)
    ]
    cities.append(_synth_city("target", spec.target_nodes, spec, rng))
    return cities
