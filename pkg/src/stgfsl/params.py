"""Named parameter collections with functional update semantics.

Meta-learning needs adapted parameter copies whose update step stays on the
autograd tape, so parameters are kept in a plain name -> tensor mapping
instead of inside modules. ``step`` builds theta - lr * grad without
touching the originals; whether the result carries graph history depends
only on the gradients passed in.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ContractError, LoadError

DTYPE = torch.float64


class ParamVector:
    """Ordered name -> tensor map of trainable parameters."""

    def __init__(self, named: dict[str, Tensor]):
        self._items: dict[str, Tensor] = dict(named)

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def items(self):
        return self._items.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def numel(self) -> int:
        return sum(t.numel() for t in self._items.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._items.items()}

    def clone(self, requires_grad: bool = True) -> "ParamVector":
        """Detached leaf copies of every tensor."""
        out = {}
        for k, v in self._items.items():
            t = v.detach().clone()
            t.requires_grad_(requires_grad)
            out[k] = t
        return ParamVector(out)

    def detached(self, requires_grad: bool = True) -> "ParamVector":
        out = {}
        for k, v in self._items.items():
            t = v.detach()
            if requires_grad:
                t = t.clone().requires_grad_(True)
            out[k] = t
        return ParamVector(out)

    def step(self, grads, lr: float) -> "ParamVector":
        """theta - lr * grad per tensor; a None gradient leaves it as is.

        When the gradients carry graph history (create_graph inner steps)
        the returned tensors do too.
        """
        if len(grads) != len(self._items):
            raise ContractError(f"{len(grads)} gradients for {len(self._items)} parameters")
        out = {}
        for (k, v), g in zip(self._items.items(), grads):
            if g is None:
                out[k] = v
            else:
                if g.shape != v.shape:
                    raise ContractError(f"gradient shape {tuple(g.shape)} != {tuple(v.shape)} for {k}")
                out[k] = v - lr * g
        return ParamVector(out)

    def zip_grads(self, grads):
        """Iterate (name, tensor, gradient) aligned by position."""
        if len(grads) != len(self._items):
            raise ContractError(f"{len(grads)} gradients for {len(self._items)} parameters")
        for (k, v), g in zip(self._items.items(), grads):
            yield k, v, g

    def with_named(self, extra: dict[str, Tensor]) -> "ParamVector":
        merged = dict(self._items)
        merged.update(extra)
        return ParamVector(merged)


@dataclass
class AdamState:
    """First/second moment accumulators for the adaptive outer step."""

    count: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adam_update(
    theta: ParamVector,
    grads: dict[str, Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamVector, AdamState]:
    """One adaptive-moment step; missing/None gradients count as zero."""
    t = state.count + 1
    new_m: dict[str, Tensor] = {}
    new_v: dict[str, Tensor] = {}
    out: dict[str, Tensor] = {}
    for name, p in theta.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        g = g.detach()
        m_prev = state.m.get(name)
        v_prev = state.v.get(name)
        m = beta1 * m_prev + (1 - beta1) * g if m_prev is not None else (1 - beta1) * g
        v = beta2 * v_prev + (1 - beta2) * g * g if v_prev is not None else (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new = p.detach() - lr * m_hat / (torch.sqrt(v_hat) + eps)
        new.requires_grad_(True)
        new_m[name] = m
        new_v[name] = v
        out[name] = new
    return ParamVector(out), AdamState(count=t, m=new_m, v=new_v)


def save_checkpoint(theta: ParamVector, path) -> tuple[Path, Path]:
    """Write parameters as a flat float64 little-endian binary + manifest.

    ``path`` is a stem; <stem>.bin holds the concatenated segments and
    <stem>.json lists (name, shape, offset) with offsets in bytes.
    """
    stem = Path(path)
    bin_path = stem.with_suffix(".bin")
    manifest_path = stem.with_suffix(".json")
    segments = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, tensor in theta.items():
            arr = tensor.detach().cpu().numpy().astype("<f8")
            raw = arr.tobytes()
            segments.append({"name": name, "shape": list(arr.shape), "offset": offset})
            fh.write(raw)
            offset += len(raw)
    manifest = {"dtype": "<f8", "segments": segments, "total_bytes": offset}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return bin_path, manifest_path


def load_checkpoint(path) -> ParamVector:
    """Inverse of save_checkpoint; accepts the stem or either file path."""
    stem = Path(path)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    bin_path = stem.with_suffix(".bin")
    manifest_path = stem.with_suffix(".json")
    if not bin_path.is_file() or not manifest_path.is_file():
        raise LoadError(f"checkpoint {stem} is missing {bin_path.name} or {manifest_path.name}")
    manifest = json.loads(manifest_path.read_text())
    raw = bin_path.read_bytes()
    if len(raw) != manifest.get("total_bytes", len(raw)):
        raise LoadError(f"checkpoint {bin_path} has {len(raw)} bytes, manifest disagrees")
    out: dict[str, Tensor] = {}
    itemsize = struct.calcsize("<d")
    for seg in manifest["segments"]:
        shape = tuple(seg["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = seg["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        t = torch.from_numpy(arr.copy()).to(DTYPE)
        t.requires_grad_(True)
        out[seg["name"]] = t
    return ParamVector(out)
