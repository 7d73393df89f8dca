"""Node-level embedding encoder for spatio-temporal windows.

Each node of a window gets a compact embedding that summarizes what its
local signal looks like: a bias-free GRU runs over the node's own series,
a multi-head attention layer aggregates over graph neighborhoods, and a
learned elementwise gate blends the two before a linear output map. The
encoder is size-agnostic: nothing in it depends on the number of nodes, so
the same parameters serve cities of different sizes.

All functions take explicit parameter dataclasses and accept an optional
leading batch axis on their tensor arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .data import CityGraph
from .errors import ContractError, ValidationError

LEAKY_SLOPE = 0.2


@dataclass
class TemporalEncoderParams:
    """Six bias-free GRU matrices: u_* act on inputs, w_* on the state."""

    u_z: Tensor
    w_z: Tensor
    u_r: Tensor
    w_r: Tensor
    u_c: Tensor
    w_c: Tensor


@dataclass
class SpatialEncoderParams:
    """Per-head projection matrices (d_s, d_out) and scorers (2 * d_out,)."""

    head_weights: list[Tensor]
    head_scorers: list[Tensor]

    @property
    def num_heads(self) -> int:
        return len(self.head_weights)


@dataclass
class FusionParams:
    """Elementwise gate logits plus the output projection (d_out, d_mk)."""

    gamma_raw: Tensor
    w_out: Tensor


def gru_cell(x: Tensor, h_prev: Tensor, params: TemporalEncoderParams) -> Tensor:
    """One recurrence step.

    z = sigmoid(x u_z + h w_z), r = sigmoid(x u_r + h w_r),
    c = tanh(x u_c + (h * r) w_c), h' = (1 - z) * c + z * h_prev.

    Note the update gate keeps the previous state, so zero parameters halve
    the state each step. Inputs are (..., d) and (..., hidden).
    """
    if x.shape[-1] != params.u_z.shape[0]:
        raise ContractError(f"input dim {x.shape[-1]} != u_z rows {params.u_z.shape[0]}")
    if h_prev.shape[-1] != params.w_z.shape[0]:
        raise ContractError(f"state dim {h_prev.shape[-1]} != w_z rows {params.w_z.shape[0]}")
    z = torch.sigmoid(x @ params.u_z + h_prev @ params.w_z)
    r = torch.sigmoid(x @ params.u_r + h_prev @ params.w_r)
    c = torch.tanh(x @ params.u_c + (h_prev * r) @ params.w_c)
    return (1.0 - z) * c + z * h_prev


def temporal_meta(window: Tensor, params: TemporalEncoderParams) -> Tensor:
    """Final GRU state per node; (..., T, N, d) -> (..., N, hidden)."""
    if window.dim() < 3:
        raise ContractError(f"window must be (..., T, N, d), got shape {tuple(window.shape)}")
    steps = window.shape[-3]
    hidden = params.w_z.shape[0]
    h = window.new_zeros(window.shape[:-3] + (window.shape[-2], hidden))
    for t in range(steps):
        h = gru_cell(window[..., t, :, :], h, params)
    return h


def closed_neighborhoods(graph: CityGraph, self_loops: bool = True):
    """Edge list (centers, neighbors) of the symmetrized graph.

    Every node attends over its neighbors plus itself by default. With
    self loops disabled an isolated node has nothing to attend over, which
    is a modeling error.
    """
    a = graph.adjacency.copy()
    if self_loops:
        np.fill_diagonal(a, 1.0)
    elif (a.sum(axis=1) == 0).any():
        bad = int(np.flatnonzero(a.sum(axis=1) == 0)[0])
        raise ValidationError(f"node {bad} has an empty neighborhood and self loops are disabled")
    centers, neighbors = np.nonzero(a)
    return centers.astype(np.int64), neighbors.astype(np.int64)


def attention_scores(
    h: Tensor, graph: CityGraph, params: SpatialEncoderParams, head: int, self_loops: bool = True
) -> Tensor:
    """Unnormalized leaky-relu attention logits for one head.

    Returns one score per (center, neighbor) pair in closed_neighborhoods
    order; shape (..., E).
    """
    centers, neighbors = closed_neighborhoods(graph, self_loops)
    return _edge_scores(h, centers, neighbors, params.head_weights[head], params.head_scorers[head])


def _edge_scores(h: Tensor, centers, neighbors, weight: Tensor, scorer: Tensor) -> Tensor:
    if h.shape[-1] != weight.shape[0]:
        raise ContractError(f"feature dim {h.shape[-1]} != projection rows {weight.shape[0]}")
    out_dim = weight.shape[1]
    if scorer.shape[-1] != 2 * out_dim:
        raise ContractError(f"scorer length {scorer.shape[-1]} != 2*{out_dim}")
    c_idx = torch.as_tensor(centers, dtype=torch.long)
    n_idx = torch.as_tensor(neighbors, dtype=torch.long)
    proj = h @ weight
    s_center = proj @ scorer[:out_dim]
    s_neighbor = proj @ scorer[out_dim:]
    logits = s_center[..., c_idx] + s_neighbor[..., n_idx]
    return torch.nn.functional.leaky_relu(logits, LEAKY_SLOPE)


def normalize_attention(scores: Tensor, centers, num_nodes: int) -> Tensor:
    """Softmax over each center's neighborhood, max-shifted for stability."""
    idx = torch.as_tensor(centers, dtype=torch.long)
    expand = idx.expand(scores.shape[:-1] + idx.shape)
    peak = scores.new_full(scores.shape[:-1] + (num_nodes,), float("-inf"))
    peak = peak.scatter_reduce(-1, expand, scores.detach(), reduce="amax", include_self=True)
    shifted = torch.exp(scores - peak.gather(-1, expand))
    denom = scores.new_zeros(scores.shape[:-1] + (num_nodes,)).index_add(-1, idx, shifted)
    return shifted / denom.gather(-1, expand)


def spatial_meta(
    h: Tensor, graph: CityGraph, params: SpatialEncoderParams, self_loops: bool = True
) -> Tensor:
    """Neighborhood attention embedding, (..., N, d_s) -> (..., N, d_out).

    Head outputs are averaged, then squashed with a sigmoid; entries land
    in (0, 1).
    """
    centers, neighbors = closed_neighborhoods(graph, self_loops)
    c_idx = torch.as_tensor(centers, dtype=torch.long)
    n_idx = torch.as_tensor(neighbors, dtype=torch.long)
    total = None
    for weight, scorer in zip(params.head_weights, params.head_scorers):
        scores = _edge_scores(h, centers, neighbors, weight, scorer)
        alpha = normalize_attention(scores, centers, graph.num_nodes)
        proj = h @ weight
        gathered = alpha.unsqueeze(-1) * proj.index_select(-2, n_idx)
        agg = proj.new_zeros(proj.shape).index_add(-2, c_idx, gathered)
        total = agg if total is None else total + agg
    return torch.sigmoid(total / params.num_heads)


def fuse(z_tp: Tensor, z_sp: Tensor, params: FusionParams, gate_override: Tensor | None = None) -> Tensor:
    """Gated blend of the two embeddings followed by the output map.

    gate = sigmoid(gamma_raw) weights the temporal side, (1 - gate) the
    spatial side. ``gate_override`` substitutes an explicit gate tensor
    (the temporal-only / spatial-only model variants use 1 and 0).
    """
    if z_tp.shape != z_sp.shape:
        raise ContractError(f"embedding shapes differ: {tuple(z_tp.shape)} vs {tuple(z_sp.shape)}")
    gate = torch.sigmoid(params.gamma_raw) if gate_override is None else gate_override
    blended = gate * z_tp + (1.0 - gate) * z_sp
    return blended @ params.w_out
