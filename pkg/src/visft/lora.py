"""Low-rank adapters on the frozen query/value projections.

The adapted projection is ``h = W x + B (A x)`` with no extra scale factor.
Adapters live in their own ParameterStore keyed ``lora.blocks.{i}.{q|v}.{A|B}``
so they can be checkpointed and shipped without the backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch

from .core import ParameterStore, ViTConfig, trunc_normal

PROJECTIONS = ("q", "v")


@dataclass
class LoraMatrices:
    A: torch.Tensor  # [r, k]
    B: torch.Tensor  # [d, r]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> torch.Tensor:
        return self.B @ self.A


def lora_name(layer: int, proj: str, which: str) -> str:
    return f"lora.blocks.{layer}.{proj}.{which}"


class LoraSet:
    """Adapter pairs for every (layer, projection) of one backbone, uniform rank."""

    def __init__(self, store: ParameterStore, layers: int, rank: int):
        self.store = store
        self.layers = layers
        self.rank = rank
        expected = {lora_name(i, p, w) for i in range(layers) for p in PROJECTIONS for w in "AB"}
        if set(store) != expected:
            missing = sorted(expected - set(store))
            extra = sorted(set(store) - expected)
            raise ValueError(f"LoraSet store mismatch: missing={missing[:4]} extra={extra[:4]}")

    @classmethod
    def from_store(cls, store: ParameterStore) -> "LoraSet":
        layers = 1 + max(int(n.split(".")[2]) for n in store)
        rank = store[lora_name(0, "q", "A")].shape[0]
        return cls(store, layers, rank)

    def __getitem__(self, key: tuple[int, str]) -> LoraMatrices:
        layer, proj = key
        return LoraMatrices(self.store[lora_name(layer, proj, "A")], self.store[lora_name(layer, proj, "B")])

    def __iter__(self) -> Iterator[tuple[int, str]]:
        return ((i, p) for i in range(self.layers) for p in PROJECTIONS)

    def numel(self) -> int:
        return self.store.numel()

    def copy(self) -> "LoraSet":
        return LoraSet(self.store.copy(), self.layers, self.rank)

    def to(self, dtype: torch.dtype) -> "LoraSet":
        return LoraSet(self.store.to(dtype), self.layers, self.rank)

    def __repr__(self) -> str:
        return f"LoraSet(layers={self.layers}, rank={self.rank}, params={self.numel()})"


def init_lora(cfg: ViTConfig, rank: int, rng: np.random.Generator, std: float = 0.02) -> LoraSet:
    """A ~ normal(0, std), B = 0, so the adapted model starts equal to the base model."""
    d = k = cfg.hidden_size
    if not 0 < rank < min(d, k):
        raise ValueError(f"LoRA rank must satisfy 0 < r < min(d, k) = {min(d, k)}, got {rank}")
    store = ParameterStore()
    for i in range(cfg.layers):
        for p in PROJECTIONS:
            store.add(lora_name(i, p, "A"), trunc_normal(rng, (rank, k), std))
            store.add(lora_name(i, p, "B"), torch.zeros(d, rank))
    return LoraSet(store, cfg.layers, rank)


def apply(x: torch.Tensor, W: torch.Tensor, lora: LoraMatrices | None) -> torch.Tensor:
    """``W x + B (A x)`` over the last axis of ``x``; the product BA is never formed."""
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match W {tuple(W.shape)}")
    out = x @ W.T
    if lora is None:
        return out
    if lora.A.shape[1] != W.shape[1] or lora.B.shape[0] != W.shape[0] or lora.B.shape[1] != lora.A.shape[0]:
        raise ValueError(
            f"adapter shapes A{tuple(lora.A.shape)} B{tuple(lora.B.shape)} do not conform to W{tuple(W.shape)}"
        )
    return out + (x @ lora.A.T) @ lora.B.T


def merge(W: torch.Tensor, lora: LoraMatrices) -> torch.Tensor:
    return W + lora.B @ lora.A


def merge_into_backbone(store: ParameterStore, lora: LoraSet) -> ParameterStore:
    """Copy of the backbone store with every ``W_q``/``W_v`` replaced by ``W + BA``."""
    merged = store.copy()
    for layer, proj in lora:
        name = f"blocks.{layer}.attn.w{proj}"
        merged[name] = merge(store[name], lora[layer, proj])
    return merged


def lora_param_count(cfg: ViTConfig, rank: int) -> int:
    """2 projections x layers x (r*k + d*r) with d = k = hidden size."""
    d = cfg.hidden_size
    return 2 * cfg.layers * rank * (d + d)


def lora_shapes(cfg: ViTConfig, rank: int) -> dict[str, tuple[int, int]]:
    d = cfg.hidden_size
    out = {}
    for i in range(cfg.layers):
        for p in PROJECTIONS:
            out[lora_name(i, p, "A")] = (rank, d)
            out[lora_name(i, p, "B")] = (d, rank)
    return out
