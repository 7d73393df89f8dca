"""Two-step weight generation conditioned on node embeddings.

A naive hypernetwork mapping an embedding z in R^k straight to a
d_in x d_out weight matrix needs k * d_in * d_out generator weights. The
two-step factorization first lifts z to a d_in x k matrix (step 1), then
maps the last axis to d_out with a shared k x d_out matrix (step 2), for
k * (d_in * k + d_out) generator weights. ``count_params`` reports both
counts; the saving is real whenever d_out exceeds roughly k * d_in / (1 -
k / d_out), e.g. (k=16, d_in=8, d_out=32) gives 2560 vs 4096 weights.

Counts are weight-only by convention. The generator's own linear maps
carry bias terms by default (so a zero embedding does not force zero
generated weights); those biases are excluded from the reported counts.
Generated layers can also carry a per-node bias produced by a separate
head when ``bias_gen`` weights are present.

Convolution kernels are generated the same way: step 1 lifts z to
C_in x k, step 2 maps to C_out * K_h * K_w per input channel, and the
result is reshaped to (C_in, C_out, K_h, K_w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ContractError, ParameterError


@dataclass
class LinearGenSpec:
    """Generator for per-node (d_in, d_out) weight matrices."""

    d_in: int
    d_out: int
    step1_w: Tensor  # (k, d_in * k)
    step2_w: Tensor  # (k, d_out)
    step1_b: Tensor | None = None
    step2_b: Tensor | None = None
    bias_w: Tensor | None = None  # (k, d_out), optional generated-layer bias
    bias_b: Tensor | None = None

    @property
    def meta_dim(self) -> int:
        return self.step1_w.shape[0]

    def weight_count(self) -> int:
        """Trainable generator weights, excluding bias terms by convention."""
        return self.step1_w.numel() + self.step2_w.numel()

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.step1.w": self.step1_w, f"{prefix}.step2.w": self.step2_w}
        if self.step1_b is not None:
            out[f"{prefix}.step1.b"] = self.step1_b
        if self.step2_b is not None:
            out[f"{prefix}.step2.b"] = self.step2_b
        if self.bias_w is not None:
            out[f"{prefix}.bias.w"] = self.bias_w
        if self.bias_b is not None:
            out[f"{prefix}.bias.b"] = self.bias_b
        return out


@dataclass
class ConvGenSpec:
    """Generator for per-node (C_in, C_out, K_h, K_w) convolution kernels."""

    c_in: int
    c_out: int
    k_h: int
    k_w: int
    step1_w: Tensor  # (k, C_in * k)
    step2_w: Tensor  # (k, C_out * K_h * K_w)
    step1_b: Tensor | None = None
    step2_b: Tensor | None = None
    bias_w: Tensor | None = None  # (k, C_out)
    bias_b: Tensor | None = None

    @property
    def meta_dim(self) -> int:
        return self.step1_w.shape[0]

    def weight_count(self) -> int:
        return self.step1_w.numel() + self.step2_w.numel()

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.step1.w": self.step1_w, f"{prefix}.step2.w": self.step2_w}
        if self.step1_b is not None:
            out[f"{prefix}.step1.b"] = self.step1_b
        if self.step2_b is not None:
            out[f"{prefix}.step2.b"] = self.step2_b
        if self.bias_w is not None:
            out[f"{prefix}.bias.w"] = self.bias_w
        if self.bias_b is not None:
            out[f"{prefix}.bias.b"] = self.bias_b
        return out


@dataclass
class GeneratedLayer:
    """Per-node weights (..., N, d_in, d_out) plus optional biases."""

    weights: Tensor
    biases: Tensor | None = None


def count_params(meta_dim: int, d_in: int, d_out: int) -> tuple[int, int, float]:
    """(two_step, one_step, reduction) generator weight counts.

    reduction = 1 - two_step / one_step; negative when the factorization
    is more expensive than the direct map.
    """
    if meta_dim <= 0 or d_in <= 0 or d_out <= 0:
        raise ParameterError("count_params needs positive dimensions")
    two_step = meta_dim * (d_in * meta_dim + d_out)
    one_step = meta_dim * d_in * d_out
    return two_step, one_step, 1.0 - two_step / one_step


def gen_linear(z: Tensor, spec: LinearGenSpec) -> GeneratedLayer:
    """Generate per-node weight matrices from embeddings (..., N, k)."""
    k = spec.meta_dim
    if z.shape[-1] != k:
        raise ContractError(f"embedding dim {z.shape[-1]} != generator meta_dim {k}")
    lifted = z @ spec.step1_w
    if spec.step1_b is not None:
        lifted = lifted + spec.step1_b
    lifted = lifted.reshape(z.shape[:-1] + (spec.d_in, k))
    weights = lifted @ spec.step2_w
    if spec.step2_b is not None:
        weights = weights + spec.step2_b
    biases = None
    if spec.bias_w is not None:
        biases = z @ spec.bias_w
        if spec.bias_b is not None:
            biases = biases + spec.bias_b
    return GeneratedLayer(weights=weights, biases=biases)


def gen_conv(z: Tensor, spec: ConvGenSpec) -> GeneratedLayer:
    """Generate per-node conv kernels (..., N, C_in, C_out, K_h, K_w)."""
    k = spec.meta_dim
    if z.shape[-1] != k:
        raise ContractError(f"embedding dim {z.shape[-1]} != generator meta_dim {k}")
    lifted = z @ spec.step1_w
    if spec.step1_b is not None:
        lifted = lifted + spec.step1_b
    lifted = lifted.reshape(z.shape[:-1] + (spec.c_in, k))
    flat = lifted @ spec.step2_w
    if spec.step2_b is not None:
        flat = flat + spec.step2_b
    kernels = flat.reshape(z.shape[:-1] + (spec.c_in, spec.c_out, spec.k_h, spec.k_w))
    biases = None
    if spec.bias_w is not None:
        biases = z @ spec.bias_w
        if spec.bias_b is not None:
            biases = biases + spec.bias_b
    return GeneratedLayer(weights=kernels, biases=biases)


def apply_generated_linear(x: Tensor, layer: GeneratedLayer) -> Tensor:
    """Per-node affine map: (..., N, d_in) with (..., N, d_in, d_out)."""
    if x.shape[-1] != layer.weights.shape[-2]:
        raise ContractError(
            f"input dim {x.shape[-1]} != generated weight rows {layer.weights.shape[-2]}"
        )
    out = (x.unsqueeze(-2) @ layer.weights).squeeze(-2)
    if layer.biases is not None:
        out = out + layer.biases
    return out


def _uniform(shape, fan_in: int, gen: torch.Generator, dtype, scale: float = 1.0) -> Tensor:
    bound = scale / math.sqrt(fan_in) if fan_in > 0 else scale
    t = torch.empty(shape, dtype=dtype)
    t.uniform_(-bound, bound, generator=gen)
    return t


GEN_INIT_SCALE = 0.1


def make_linear_gen_spec(
    meta_dim: int,
    d_in: int,
    d_out: int,
    gen: torch.Generator,
    dtype=torch.float64,
    generator_bias: bool = True,
    layer_bias: bool = True,
) -> LinearGenSpec:
    """Fresh generator with small uniform init (fan-in rule scaled by 0.1)."""
    return LinearGenSpec(
        d_in=d_in,
        d_out=d_out,
        step1_w=_uniform((meta_dim, d_in * meta_dim), meta_dim, gen, dtype, GEN_INIT_SCALE),
        step2_w=_uniform((meta_dim, d_out), meta_dim, gen, dtype, GEN_INIT_SCALE),
        step1_b=_uniform((d_in * meta_dim,), meta_dim, gen, dtype, GEN_INIT_SCALE)
        if generator_bias
        else None,
        step2_b=_uniform((d_out,), meta_dim, gen, dtype, GEN_INIT_SCALE) if generator_bias else None,
        bias_w=_uniform((meta_dim, d_out), meta_dim, gen, dtype, GEN_INIT_SCALE) if layer_bias else None,
        bias_b=_uniform((d_out,), meta_dim, gen, dtype, GEN_INIT_SCALE)
        if layer_bias and generator_bias
        else None,
    )


def make_conv_gen_spec(
    meta_dim: int,
    c_in: int,
    c_out: int,
    k_h: int,
    k_w: int,
    gen: torch.Generator,
    dtype=torch.float64,
    generator_bias: bool = True,
    layer_bias: bool = True,
) -> ConvGenSpec:
    return ConvGenSpec(
        c_in=c_in,
        c_out=c_out,
        k_h=k_h,
        k_w=k_w,
        step1_w=_uniform((meta_dim, c_in * meta_dim), meta_dim, gen, dtype, GEN_INIT_SCALE),
        step2_w=_uniform((meta_dim, c_out * k_h * k_w), meta_dim, gen, dtype, GEN_INIT_SCALE),
        step1_b=_uniform((c_in * meta_dim,), meta_dim, gen, dtype, GEN_INIT_SCALE)
        if generator_bias
        else None,
        step2_b=_uniform((c_out * k_h * k_w,), meta_dim, gen, dtype, GEN_INIT_SCALE)
        if generator_bias
        else None,
        bias_w=_uniform((meta_dim, c_out), meta_dim, gen, dtype, GEN_INIT_SCALE) if layer_bias else None,
        bias_b=_uniform((c_out,), meta_dim, gen, dtype, GEN_INIT_SCALE)
        if layer_bias and generator_bias
        else None,
    )
