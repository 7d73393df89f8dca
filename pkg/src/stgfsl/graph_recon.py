"""Structure-aware regularization of node embeddings.

Node embeddings are pushed to reproduce the city's adjacency: inner
products between embedding rows, squashed through a sigmoid, should look
like the binary adjacency matrix. The squared Frobenius distance between
the two is the regularizer.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import ContractError


def meta_graph(z: Tensor) -> Tensor:
    """sigmoid(z z^T) over the node axis; (..., N, k) -> (..., N, N).

    Entries lie in (0, 1) and the diagonal is at least 0.5 because every
    row's self inner product is nonnegative.
    """
    if z.dim() < 2:
        raise ContractError(f"embeddings must be (..., N, k), got shape {tuple(z.shape)}")
    return torch.sigmoid(z @ z.transpose(-1, -2))


def recon_loss(a_meta: Tensor, a_target: Tensor, normalize: bool = False) -> Tensor:
    """Squared Frobenius distance between reconstruction and adjacency.

    With ``normalize`` the sum is divided by N^2 (a mean over entries),
    which keeps the magnitude comparable across city sizes; the raw sum is
    the default. Reduces over the last two axes, so batched inputs return
    one loss per instance.
    """
    if a_meta.shape[-2:] != a_target.shape[-2:]:
        raise ContractError(
            f"matrix shapes differ: {tuple(a_meta.shape[-2:])} vs {tuple(a_target.shape[-2:])}"
        )
    diff = a_meta - a_target
    total = (diff * diff).sum(dim=(-2, -1))
    if normalize:
        total = total / (a_meta.shape[-1] * a_meta.shape[-2])
    return total
