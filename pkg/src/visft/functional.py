"""Functional transformer building blocks that read weights from a ParameterStore.

Every layer is a plain function ``f(store, prefix, x, ...)``; the weight names a
layer reads are produced by the matching ``*_shapes`` helper so builders and
forward passes cannot drift apart.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .core import ParameterStore, trunc_normal

Shapes = dict[str, tuple[int, ...]]

_WEIGHT_LEAVES = {"weight", "wq", "wk", "wv", "wo"}
_ZERO_LEAVES = {"bias", "beta", "bq", "bk", "bv", "bo"}


def init_from_shapes(shapes: Shapes, rng: np.random.Generator, std: float | str = 0.02) -> ParameterStore:
    """Weights ~ trunc normal(0, std); biases 0; norm gains 1.

    Bias-like leaves (``bias``, ``beta``, ``b{q,k,v,o}``) are zeroed, ``gain`` is one;
    everything else is drawn in sorted-name order for determinism. ``std="fan_in"``
    scales weight matrices by ``1/sqrt(fan_in)`` and draws embeddings at unit std.
    """
    store = ParameterStore()
    for name in sorted(shapes):
        shape = shapes[name]
        leaf = name.rsplit(".", 1)[-1]
        if leaf in _ZERO_LEAVES:
            t = torch.zeros(shape, dtype=torch.float32)
        elif name.endswith(".gain"):
            t = torch.ones(shape, dtype=torch.float32)
        else:
            t = trunc_normal(rng, shape, _std_for(leaf, shape, std))
        store.add(name, t)
    return store


def _std_for(leaf: str, shape, std) -> float:
    if std != "fan_in":
        return float(std)
    if leaf in _WEIGHT_LEAVES:
        return 1.0 / math.sqrt(math.prod(shape[1:]))
    return 1.0


# ---------------------------------------------------------------------------
# shape helpers


def linear_shapes(prefix: str, d_in: int, d_out: int) -> Shapes:
    return {f"{prefix}.weight": (d_out, d_in), f"{prefix}.bias": (d_out,)}


def norm_shapes(prefix: str, d: int) -> Shapes:
    return {f"{prefix}.gain": (d,), f"{prefix}.beta": (d,)}


def mlp_shapes(prefix: str, dims: list[int]) -> Shapes:
    out: Shapes = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out.update(linear_shapes(f"{prefix}.{i}", a, b))
    return out


def attention_shapes(prefix: str, d: int) -> Shapes:
    out: Shapes = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.w{p}"] = (d, d)
        out[f"{prefix}.b{p}"] = (d,)
    return out


def encoder_layer_shapes(prefix: str, d: int, mlp_dim: int) -> Shapes:
    out = norm_shapes(f"{prefix}.norm1", d)
    out.update(attention_shapes(f"{prefix}.attn", d))
    out.update(norm_shapes(f"{prefix}.norm2", d))
    out.update(mlp_shapes(f"{prefix}.mlp", [d, mlp_dim, d]))
    return out


def decoder_layer_shapes(prefix: str, d: int, mlp_dim: int) -> Shapes:
    out = norm_shapes(f"{prefix}.norm1", d)
    out.update(attention_shapes(f"{prefix}.self_attn", d))
    out.update(norm_shapes(f"{prefix}.norm2", d))
    out.update(attention_shapes(f"{prefix}.cross_attn", d))
    out.update(norm_shapes(f"{prefix}.norm3", d))
    out.update(mlp_shapes(f"{prefix}.mlp", [d, mlp_dim, d]))
    return out


# ---------------------------------------------------------------------------
# layers


def linear(store: ParameterStore, prefix: str, x: torch.Tensor) -> torch.Tensor:
    w = store[f"{prefix}.weight"]
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"{prefix}.weight expects input dim {w.shape[1]}, got {x.shape[-1]}")
    return x @ w.T + store[f"{prefix}.bias"]


def layer_norm(store: ParameterStore, prefix: str, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], store[f"{prefix}.gain"], store[f"{prefix}.beta"], eps)


def mlp(store: ParameterStore, prefix: str, x: torch.Tensor, n_layers: int, act=F.relu) -> torch.Tensor:
    for i in range(n_layers):
        x = linear(store, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = act(x)
    return x


def attention_weights(q: torch.Tensor, k: torch.Tensor, num_heads: int) -> torch.Tensor:
    """Scaled dot-product weights. q: [..., Tq, d], k: [..., Tk, d] -> [..., h, Tq, Tk]."""
    dh = q.shape[-1] // num_heads
    qh = q.unflatten(-1, (num_heads, dh)).transpose(-3, -2)
    kh = k.unflatten(-1, (num_heads, dh)).transpose(-3, -2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    return scores.softmax(dim=-1)


def attend(weights: torch.Tensor, v: torch.Tensor, num_heads: int) -> torch.Tensor:
    dh = v.shape[-1] // num_heads
    vh = v.unflatten(-1, (num_heads, dh)).transpose(-3, -2)
    return (weights @ vh).transpose(-3, -2).flatten(-2)


def multi_head_attention(
    store: ParameterStore,
    prefix: str,
    xq: torch.Tensor,
    xkv: torch.Tensor,
    num_heads: int,
    q_proj=None,
    v_proj=None,
    return_weights: bool = False,
    xk: torch.Tensor | None = None,
):
    """Multi-head attention with weights ``{prefix}.w{q,k,v,o}``.

    ``q_proj``/``v_proj`` override the query/value projections (used by the
    backbone to route through LoRA adapters). ``xk`` replaces ``xkv`` as the
    key input only (positional keys in cross-attention).
    """
    if q_proj is None:
        q = xq @ store[f"{prefix}.wq"].T + store[f"{prefix}.bq"]
    else:
        q = q_proj(xq)
    k = (xkv if xk is None else xk) @ store[f"{prefix}.wk"].T + store[f"{prefix}.bk"]
    if v_proj is None:
        v = xkv @ store[f"{prefix}.wv"].T + store[f"{prefix}.bv"]
    else:
        v = v_proj(xkv)
    w = attention_weights(q, k, num_heads)
    out = attend(w, v, num_heads) @ store[f"{prefix}.wo"].T + store[f"{prefix}.bo"]
    return (out, w) if return_weights else out


def encoder_layer(store: ParameterStore, prefix: str, x: torch.Tensor, num_heads: int, pos=None) -> torch.Tensor:
    h = layer_norm(store, f"{prefix}.norm1", x)
    hq = h if pos is None else h + pos
    x = x + multi_head_attention(store, f"{prefix}.attn", hq, hq, num_heads)
    h = layer_norm(store, f"{prefix}.norm2", x)
    return x + mlp(store, f"{prefix}.mlp", h, 2)


def decoder_layer(
    store: ParameterStore,
    prefix: str,
    tgt: torch.Tensor,
    memory: torch.Tensor,
    num_heads: int,
    query_pos=None,
    memory_pos=None,
) -> torch.Tensor:
    h = layer_norm(store, f"{prefix}.norm1", tgt)
    hq = h if query_pos is None else h + query_pos
    tgt = tgt + multi_head_attention(store, f"{prefix}.self_attn", hq, hq, num_heads)
    h = layer_norm(store, f"{prefix}.norm2", tgt)
    hq = h if query_pos is None else h + query_pos
    mk = None if memory_pos is None else memory + memory_pos
    tgt = tgt + multi_head_attention(store, f"{prefix}.cross_attn", hq, memory, num_heads, xk=mk)
    h = layer_norm(store, f"{prefix}.norm3", tgt)
    return tgt + mlp(store, f"{prefix}.mlp", h, 2)


def conv2d(store: ParameterStore, prefix: str, x: torch.Tensor, padding: int = 0) -> torch.Tensor:
    w = store[f"{prefix}.weight"]
    if x.shape[-3] != w.shape[1]:
        raise ValueError(f"{prefix}.weight expects {w.shape[1]} channels, got {x.shape[-3]}")
    return F.conv2d(x, w, store[f"{prefix}.bias"], padding=padding)


def conv_shapes(prefix: str, c_in: int, c_out: int, kernel: int) -> Shapes:
    return {f"{prefix}.weight": (c_out, c_in, kernel, kernel), f"{prefix}.bias": (c_out,)}


def gn_groups(channels: int) -> int:
    return 8 if channels >= 8 and channels % 8 == 0 else channels


def group_norm(store: ParameterStore, prefix: str, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # all-zero input normalizes to zeros: (0 - 0) / sqrt(0 + eps)
    c = x.shape[-3]
    return F.group_norm(x, gn_groups(c), store[f"{prefix}.gain"], store[f"{prefix}.beta"], eps)


def upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
