"""Shared fixtures and small builders used across the test modules."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from stgfsl.data import CityDataset, CityGraph, SignalSeries, adjacency_from_edges, fit_zscore
from stgfsl.params import DTYPE, ParamVector


def graph_from_edges(n: int, pairs) -> CityGraph:
    edges = tuple((int(a), int(b), 1.0) for a, b in pairs)
    return CityGraph(num_nodes=n, edges=edges, adjacency=adjacency_from_edges(n, edges))


def line_graph(n: int) -> CityGraph:
    return graph_from_edges(n, [(i, i + 1) for i in range(n - 1)])


def random_graph(n: int, rng: np.random.Generator, p: float = 0.5) -> CityGraph:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if not pairs:
        pairs = [(0, 1)]
    return graph_from_edges(n, pairs)


def series_from_values(values: np.ndarray, interval: int = 10) -> SignalSeries:
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.shape[:2], dtype=bool)
    return SignalSeries(values=values, interval_minutes=interval, observed_mask=mask)


def dataset_from_values(values, graph: CityGraph, name: str = "city", interval: int = 10) -> CityDataset:
    series = series_from_values(values, interval)
    return CityDataset(graph=graph, series=series, stats=fit_zscore(series), name=name)


def theta_arrays(theta: ParamVector) -> dict[str, np.ndarray]:
    """Detached numpy copies of every parameter segment, keyed by name."""
    return {name: t.detach().numpy().copy() for name, t in theta.items()}


def randomized(theta: ParamVector, rng: np.random.Generator, scale: float = 0.5) -> ParamVector:
    """Fresh standard-normal parameters with the same names and shapes."""
    named = {}
    for name, t in theta.items():
        named[name] = torch.tensor(
            rng.normal(0.0, scale, size=tuple(t.shape)), dtype=DTYPE, requires_grad=True
        )
    return ParamVector(named)


def max_abs_diff(a, b) -> float:
    a = a.detach().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    b = b.detach().numpy() if isinstance(b, torch.Tensor) else np.asarray(b)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps timings stable and results reproducible across suite runs.
    torch.set_num_threads(1)
    yield
