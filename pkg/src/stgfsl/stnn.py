"""Forecasting network with per-node generated weights.

The model reads a history window (T, N, d) and predicts the next M steps
for every node. Each node runs its own small temporal extractor (a GRU or
a dilated causal convolution stack) whose weights are generated from that
node's embedding, followed by a readout shared by all nodes. Model
variants used in ablations:

    none  full model
    M1a   embeddings from the temporal encoder only
    M1b   embeddings from the neighborhood attention encoder only
    M1c   embeddings from a trainable per-city lookup table
    M2    weight generation off, one shared extractor for every node
    M3    full model, reconstruction loss off (handled by the loss)

Parameters live in a flat ParamVector so training can hold several
adapted copies at once; the functions here build lightweight views into
it by segment name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .data import CityGraph
from .errors import ConfigError, ContractError
from .graph_recon import meta_graph
from .meta_learner import (
    FusionParams,
    SpatialEncoderParams,
    TemporalEncoderParams,
    fuse,
    spatial_meta,
    temporal_meta,
)
from .param_gen import (
    ConvGenSpec,
    GeneratedLayer,
    LinearGenSpec,
    gen_conv,
    gen_linear,
    make_conv_gen_spec,
    make_linear_gen_spec,
)
from .params import DTYPE, ParamVector

ABLATIONS = ("none", "M1a", "M1b", "M1c", "M2", "M3")

GRU_MATRICES = ("u_z", "w_z", "u_r", "w_r", "u_c", "w_c")
TCN_DEPTH = 2


@dataclass(frozen=True)
class ExtractorSpec:
    """Per-node temporal feature extractor: 'gru' or 'tcn'.

    The tcn kind runs one causal convolution branch per kernel size
    (dilations 1, 2, ..., doubling per layer) and sums the final-step
    branch outputs.
    """

    kind: str = "gru"
    hidden_dim: int = 16
    kernel_sizes: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        if self.kind not in ("gru", "tcn"):
            raise ConfigError(f"unknown extractor kind {self.kind!r}")
        if self.hidden_dim <= 0:
            raise ConfigError("extractor hidden_dim must be positive")


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 1
    history: int = 12
    horizon: int = 6
    embed_dim: int = 32
    heads: int = 2
    meta_dim: int = 16
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    ablation: str = "none"
    spatial_input: str = "window"  # 'window' or 'temporal'

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.spatial_input not in ("window", "temporal"):
            raise ConfigError(f"spatial_input must be 'window' or 'temporal', got {self.spatial_input!r}")

    @property
    def spatial_in_dim(self) -> int:
        return self.history * self.in_dim if self.spatial_input == "window" else self.embed_dim


def _uniform(shape, fan_in: int, gen: torch.Generator, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    t = torch.empty(shape, dtype=dtype)
    t.uniform_(-bound, bound, generator=gen)
    return t


def _needs_temporal(cfg: ModelConfig) -> bool:
    if cfg.ablation in ("M1a",):
        return True
    if cfg.ablation in ("M1b", "M1c"):
        return cfg.ablation == "M1b" and cfg.spatial_input == "temporal"
    return True


def _needs_spatial(cfg: ModelConfig) -> bool:
    return cfg.ablation not in ("M1a", "M1c")


def init_theta(
    cfg: ModelConfig,
    seed: int,
    cities: dict[str, int] | None = None,
    dtype=DTYPE,
) -> ParamVector:
    """Fresh trainable parameters for a model configuration.

    ``cities`` maps city name to node count and is required by the M1c
    variant, whose embeddings are a per-city table.
    """
    gen = torch.Generator().manual_seed(seed)
    named: dict[str, Tensor] = {}
    d, hid, k = cfg.in_dim, cfg.embed_dim, cfg.meta_dim
    feat = cfg.extractor.hidden_dim

    if _needs_temporal(cfg):
        for name in GRU_MATRICES:
            rows = d if name.startswith("u") else hid
            named[f"temporal.{name}"] = _uniform((rows, hid), rows, gen, dtype)
    if _needs_spatial(cfg):
        ds = cfg.spatial_in_dim
        for h in range(cfg.heads):
            named[f"spatial.w.{h}"] = _uniform((ds, hid), ds, gen, dtype)
            named[f"spatial.a.{h}"] = _uniform((2 * hid,), 2 * hid, gen, dtype)
    if cfg.ablation in ("none", "M2", "M3"):
        # Start the gate leaning temporal (sigmoid(1) ~ 0.73): the spatial
        # summary is sigmoid-squashed, so at an even blend its shared
        # positive offset dominates every embedding inner product and
        # swamps the node differences reconstruction needs.
        named["fuse.gamma_raw"] = torch.ones(hid, dtype=dtype)
    if cfg.ablation != "M1c":
        # 4x the fan-in bound: the reconstruction penalty pulls embeddings
        # toward zero (a stationary point of it), and rows born too small
        # never escape; the wider map keeps the generation channel alive.
        named["fuse.w_out"] = 4.0 * _uniform((hid, k), hid, gen, dtype)

    if cfg.ablation == "M1c":
        if not cities:
            raise ConfigError("the M1c variant needs a {city: num_nodes} table at init")
        for city, n in cities.items():
            named[f"embed.{city}"] = _uniform((n, k), k, gen, dtype)

    if cfg.ablation == "M2":
        if cfg.extractor.kind == "gru":
            for name in GRU_MATRICES:
                rows = d if name.startswith("u") else feat
                named[f"extractor.{name}"] = _uniform((rows, feat), rows, gen, dtype)
        else:
            for ks in cfg.extractor.kernel_sizes:
                for layer in range(TCN_DEPTH):
                    c_in = d if layer == 0 else feat
                    named[f"extractor.tcn{ks}.l{layer}.kernel"] = _uniform(
                        (c_in, feat, 1, ks), c_in * ks, gen, dtype
                    )
                    named[f"extractor.tcn{ks}.l{layer}.bias"] = _uniform(
                        (feat,), c_in * ks, gen, dtype
                    )
    else:
        if cfg.extractor.kind == "gru":
            for name in GRU_MATRICES:
                rows = d if name.startswith("u") else feat
                spec = make_linear_gen_spec(k, rows, feat, gen, dtype, layer_bias=False)
                named.update(spec.named_tensors(f"gen.{name}"))
        else:
            for ks in cfg.extractor.kernel_sizes:
                for layer in range(TCN_DEPTH):
                    c_in = d if layer == 0 else feat
                    spec = make_conv_gen_spec(k, c_in, feat, 1, ks, gen, dtype)
                    named.update(spec.named_tensors(f"gen.tcn{ks}.l{layer}"))

    named["predictor.w"] = _uniform((feat, cfg.horizon * d), feat, gen, dtype)
    named["predictor.b"] = _uniform((cfg.horizon * d,), feat, gen, dtype)
    for tensor in named.values():
        tensor.requires_grad_(True)
    return ParamVector(named)


def temporal_view(theta: ParamVector) -> TemporalEncoderParams:
    return TemporalEncoderParams(**{name: theta[f"temporal.{name}"] for name in GRU_MATRICES})


def spatial_view(theta: ParamVector, heads: int) -> SpatialEncoderParams:
    return SpatialEncoderParams(
        head_weights=[theta[f"spatial.w.{h}"] for h in range(heads)],
        head_scorers=[theta[f"spatial.a.{h}"] for h in range(heads)],
    )


def fusion_view(theta: ParamVector) -> FusionParams:
    w_out = theta["fuse.w_out"]
    gamma = theta["fuse.gamma_raw"] if "fuse.gamma_raw" in theta else w_out.new_zeros(())
    return FusionParams(gamma_raw=gamma, w_out=w_out)


def _linear_gen_view(theta: ParamVector, prefix: str, d_in: int, d_out: int) -> LinearGenSpec:
    return LinearGenSpec(
        d_in=d_in,
        d_out=d_out,
        step1_w=theta[f"{prefix}.step1.w"],
        step2_w=theta[f"{prefix}.step2.w"],
        step1_b=theta[f"{prefix}.step1.b"] if f"{prefix}.step1.b" in theta else None,
        step2_b=theta[f"{prefix}.step2.b"] if f"{prefix}.step2.b" in theta else None,
        bias_w=theta[f"{prefix}.bias.w"] if f"{prefix}.bias.w" in theta else None,
        bias_b=theta[f"{prefix}.bias.b"] if f"{prefix}.bias.b" in theta else None,
    )


def _conv_gen_view(theta: ParamVector, prefix: str, c_in: int, c_out: int, k_w: int) -> ConvGenSpec:
    return ConvGenSpec(
        c_in=c_in,
        c_out=c_out,
        k_h=1,
        k_w=k_w,
        step1_w=theta[f"{prefix}.step1.w"],
        step2_w=theta[f"{prefix}.step2.w"],
        step1_b=theta[f"{prefix}.step1.b"] if f"{prefix}.step1.b" in theta else None,
        step2_b=theta[f"{prefix}.step2.b"] if f"{prefix}.step2.b" in theta else None,
        bias_w=theta[f"{prefix}.bias.w"] if f"{prefix}.bias.w" in theta else None,
        bias_b=theta[f"{prefix}.bias.b"] if f"{prefix}.bias.b" in theta else None,
    )


def generator_views(theta: ParamVector, cfg: ModelConfig) -> dict:
    """Generator specs keyed by extractor weight name."""
    d, feat = cfg.in_dim, cfg.extractor.hidden_dim
    out = {}
    if cfg.extractor.kind == "gru":
        for name in GRU_MATRICES:
            rows = d if name.startswith("u") else feat
            out[name] = _linear_gen_view(theta, f"gen.{name}", rows, feat)
    else:
        for ks in cfg.extractor.kernel_sizes:
            for layer in range(TCN_DEPTH):
                c_in = d if layer == 0 else feat
                out[f"tcn{ks}.l{layer}"] = _conv_gen_view(theta, f"gen.tcn{ks}.l{layer}", c_in, feat, ks)
    return out


@dataclass
class GruWeights:
    """Extractor recurrence matrices; per-node (..., N, a, b) or shared (a, b)."""

    u_z: Tensor
    w_z: Tensor
    u_r: Tensor
    w_r: Tensor
    u_c: Tensor
    w_c: Tensor


@dataclass
class ConvLayerWeights:
    kernel: Tensor  # (..., N, C_in, C_out, 1, K) or (C_in, C_out, 1, K)
    bias: Tensor | None
    dilation: int


@dataclass
class TcnWeights:
    branches: list[list[ConvLayerWeights]]


def generate_extractor_weights(z: Tensor, theta: ParamVector, cfg: ModelConfig):
    """Instantiate per-node extractor weights from embeddings (..., N, k)."""
    views = generator_views(theta, cfg)
    if cfg.extractor.kind == "gru":
        layers = {name: gen_linear(z, views[name]) for name in GRU_MATRICES}
        return GruWeights(**{name: layers[name].weights for name in GRU_MATRICES})
    branches = []
    for ks in cfg.extractor.kernel_sizes:
        layers = []
        for layer in range(TCN_DEPTH):
            made = gen_conv(z, views[f"tcn{ks}.l{layer}"])
            layers.append(ConvLayerWeights(kernel=made.weights, bias=made.biases, dilation=2**layer))
        branches.append(layers)
    return TcnWeights(branches=branches)


def shared_extractor_weights(theta: ParamVector, cfg: ModelConfig):
    if cfg.extractor.kind == "gru":
        return GruWeights(**{name: theta[f"extractor.{name}"] for name in GRU_MATRICES})
    branches = []
    for ks in cfg.extractor.kernel_sizes:
        layers = []
        for layer in range(TCN_DEPTH):
            layers.append(
                ConvLayerWeights(
                    kernel=theta[f"extractor.tcn{ks}.l{layer}.kernel"],
                    bias=theta[f"extractor.tcn{ks}.l{layer}.bias"],
                    dilation=2**layer,
                )
            )
        branches.append(layers)
    return TcnWeights(branches=branches)


def _apply_mat(x: Tensor, w: Tensor) -> Tensor:
    """x (..., N, a) with w either shared (a, b) or per-node (..., N, a, b)."""
    if w.dim() == 2:
        return x @ w
    return (x.unsqueeze(-2) @ w).squeeze(-2)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None, dilation: int) -> Tensor:
    """Length-preserving causal convolution along the trailing time axis.

    x is (..., N, C_in, T); the kernel is (..., N, C_in, C_out, 1, K) for
    per-node weights or (C_in, C_out, 1, K) shared. Output timestep t sees
    inputs t, t - dilation, ..., t - (K-1) * dilation, with zeros before
    the series start.
    """
    taps = kernel.shape[-1]
    length = x.shape[-1]
    pad = (taps - 1) * dilation
    xp = torch.nn.functional.pad(x, (pad, 0))
    out = None
    for tap in range(taps):
        xs = xp[..., tap * dilation : tap * dilation + length]
        wk = kernel[..., 0, tap]
        if wk.dim() == 2:
            contrib = torch.einsum("...it,io->...ot", xs, wk)
        else:
            contrib = torch.einsum("...nit,...nio->...not", xs, wk)
        out = contrib if out is None else out + contrib
    if bias is not None:
        out = out + bias.unsqueeze(-1)
    return out


def extract_features(window: Tensor, spec: ExtractorSpec, weights) -> Tensor:
    """Per-node temporal features; (..., T, N, d) -> (..., N, hidden)."""
    if window.dim() < 3:
        raise ContractError(f"window must be (..., T, N, d), got shape {tuple(window.shape)}")
    if isinstance(weights, GruWeights):
        steps = window.shape[-3]
        h = window.new_zeros(window.shape[:-3] + (window.shape[-2], spec.hidden_dim))
        for t in range(steps):
            x_t = window[..., t, :, :]
            z = torch.sigmoid(_apply_mat(x_t, weights.u_z) + _apply_mat(h, weights.w_z))
            r = torch.sigmoid(_apply_mat(x_t, weights.u_r) + _apply_mat(h, weights.w_r))
            c = torch.tanh(_apply_mat(x_t, weights.u_c) + _apply_mat(h * r, weights.w_c))
            h = (1.0 - z) * c + z * h
        return h
    if isinstance(weights, TcnWeights):
        x = window.transpose(-3, -2).transpose(-2, -1)  # (..., N, d, T)
        total = None
        for layers in weights.branches:
            y = x
            for i, layer in enumerate(layers):
                y = causal_conv1d(y, layer.kernel, layer.bias, layer.dilation)
                if i + 1 < len(layers):
                    y = torch.relu(y)
            last = y[..., -1]
            total = last if total is None else total + last
        return total
    raise ContractError(f"unsupported extractor weights {type(weights).__name__}")


@dataclass
class PredictorParams:
    weight: Tensor  # (hidden, M * d)
    bias: Tensor  # (M * d,)


def predictor_view(theta: ParamVector) -> PredictorParams:
    return PredictorParams(weight=theta["predictor.w"], bias=theta["predictor.b"])


def predict(features: Tensor, params: PredictorParams, horizon: int, out_dim: int) -> Tensor:
    """Shared affine readout; (..., N, hidden) -> (..., M, N, d)."""
    flat = features @ params.weight + params.bias
    shaped = flat.reshape(flat.shape[:-1] + (horizon, out_dim))
    return shaped.transpose(-3, -2)


def meta_knowledge(
    window: Tensor, graph: CityGraph, theta: ParamVector, cfg: ModelConfig, city: str | None = None
) -> Tensor:
    """Node embeddings (..., N, meta_dim) for one window batch."""
    if cfg.ablation == "M1c":
        key = f"embed.{city}"
        if city is None or key not in theta:
            raise ConfigError(f"M1c needs a per-city embedding table, missing {key!r}")
        table = theta[key]
        if table.shape[0] != graph.num_nodes:
            raise ContractError(
                f"embedding table {key} has {table.shape[0]} rows, graph has {graph.num_nodes} nodes"
            )
        return table.expand(window.shape[:-3] + table.shape)
    fusion = fusion_view(theta)
    if cfg.ablation == "M1a":
        z_tp = temporal_meta(window, temporal_view(theta))
        return fuse(z_tp, z_tp, fusion, gate_override=z_tp.new_ones(()))
    spatial_h = None
    z_tp = None
    if _needs_temporal(cfg):
        z_tp = temporal_meta(window, temporal_view(theta))
    if cfg.spatial_input == "window":
        spatial_h = window.transpose(-3, -2).reshape(window.shape[:-3] + (window.shape[-2], -1))
    else:
        spatial_h = z_tp
    z_sp = spatial_meta(spatial_h, graph, spatial_view(theta, cfg.heads))
    if cfg.ablation == "M1b":
        return fuse(z_sp, z_sp, fusion, gate_override=z_sp.new_zeros(()))
    return fuse(z_tp, z_sp, fusion)


def stnn_forward(
    window: Tensor,
    graph: CityGraph,
    theta: ParamVector,
    cfg: ModelConfig,
    city: str | None = None,
    need_meta: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Forecast a window batch.

    window is (..., T, N, d); returns predictions (..., M, N, d) and the
    reconstructed adjacency (..., N, N) built from the node embeddings
    (None when ``need_meta`` is off and the variant does not use
    embeddings for prediction).
    """
    if window.shape[-1] != cfg.in_dim or window.shape[-3] != cfg.history:
        raise ContractError(
            f"window shape {tuple(window.shape)} does not match history={cfg.history}, in_dim={cfg.in_dim}"
        )
    if window.shape[-2] != graph.num_nodes:
        raise ContractError(f"window has {window.shape[-2]} nodes, graph has {graph.num_nodes}")
    if cfg.ablation == "M2":
        weights = shared_extractor_weights(theta, cfg)
        z_mk = meta_knowledge(window, graph, theta, cfg, city) if need_meta else None
    else:
        z_mk = meta_knowledge(window, graph, theta, cfg, city)
        weights = generate_extractor_weights(z_mk, theta, cfg)
    features = extract_features(window, cfg.extractor, weights)
    pred = predict(features, predictor_view(theta), cfg.horizon, cfg.in_dim)
    a_meta = meta_graph(z_mk) if (need_meta and z_mk is not None) else None
    return pred, a_meta
