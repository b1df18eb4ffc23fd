"""Miniature pre-norm ViT encoder with a CLS token and learned positional embeddings.

Tensor names (stable; checkpoints and the LoRA module depend on them)::

    patch_embed.weight [d, 3*p*p]   patch_embed.bias [d]
    cls_token [d]                   pos_embed [n_tokens, d]
    blocks.{i}.norm1.{gain,beta}    blocks.{i}.attn.{wq,bq,wk,bk,wv,bv,wo,bo}
    blocks.{i}.norm2.{gain,beta}    blocks.{i}.mlp.{0,1}.{weight,bias}
    norm.{gain,beta}
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import torch
import torch.nn.functional as F

from . import functional as fn
from .core import ParameterStore, ViTConfig
from .lora import LoraSet, apply as lora_apply


@dataclass
class BackboneOutput:
    cls_feature: torch.Tensor  # [..., d]
    patch_features: torch.Tensor  # [..., n_patches, d]
    attention_last: torch.Tensor | None = None  # [..., heads, n_tokens, n_tokens]


def backbone_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, p = cfg.hidden_size, cfg.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, 3 * p * p),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.n_tokens, d),
    }
    for i in range(cfg.layers):
        shapes.update(fn.encoder_layer_shapes(f"blocks.{i}", d, cfg.mlp_size))
    shapes.update(fn.norm_shapes("norm", d))
    return shapes


def build_backbone(cfg: ViTConfig, rng: np.random.Generator) -> ParameterStore:
    store = fn.init_from_shapes(backbone_shapes(cfg), rng)
    store.meta["vit"] = cfg
    return store


def _config(store: ParameterStore) -> ViTConfig:
    try:
        return store.meta["vit"]
    except KeyError:
        raise ValueError("backbone store has no 'vit' config in its meta; build it with build_backbone") from None


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, 3, H, W] -> [B, n_patches, 3*p*p], row-major over the patch grid."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


def embed(store: ParameterStore, images: torch.Tensor) -> torch.Tensor:
    """Patch embedding, CLS prepend and positional embedding: [B,3,H,W] -> [B, n_tokens, d]."""
    cfg = _config(store)
    if images.shape[-3:] != (3, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"image shape {tuple(images.shape[-3:])} does not match patch_embed.weight/pos_embed "
            f"for image_size {cfg.image_size}"
        )
    x = fn.linear(store, "patch_embed", patchify(images, cfg.patch_size))
    cls = store["cls_token"].expand(x.shape[0], 1, -1)
    return torch.cat([cls, x], dim=1) + store["pos_embed"]


def encode(
    store: ParameterStore,
    tokens: torch.Tensor,
    lora: LoraSet | None = None,
    capture_attention: bool = False,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Run the transformer blocks and final norm over an already-embedded token sequence."""
    cfg = _config(store)
    x = tokens
    attn = None
    for i in range(cfg.layers):
        pre = f"blocks.{i}"
        q_proj = v_proj = None
        if lora is not None:
            q_proj = partial(_adapted, store[f"{pre}.attn.wq"], store[f"{pre}.attn.bq"], lora[i, "q"])
            v_proj = partial(_adapted, store[f"{pre}.attn.wv"], store[f"{pre}.attn.bv"], lora[i, "v"])
        h = fn.layer_norm(store, f"{pre}.norm1", x)
        want = capture_attention and i == cfg.layers - 1
        out = fn.multi_head_attention(
            store, f"{pre}.attn", h, h, cfg.num_heads, q_proj=q_proj, v_proj=v_proj, return_weights=want
        )
        if want:
            out, attn = out
        x = x + out
        h = fn.layer_norm(store, f"{pre}.norm2", x)
        x = x + fn.mlp(store, f"{pre}.mlp", h, 2, act=F.gelu)
    return fn.layer_norm(store, "norm", x), attn


def _adapted(W, b, lora, x):
    return lora_apply(x, W, lora) + b


def forward(
    store: ParameterStore,
    image: torch.Tensor,
    lora: LoraSet | None = None,
    capture_attention: bool = False,
) -> BackboneOutput:
    """Encode one image [3,H,W] or a batch [B,3,H,W].

    With ``lora=None`` this is the base model; otherwise q/v projections go
    through the adapters.
    """
    single = image.dim() == 3
    images = image[None] if single else image
    tokens, attn = encode(store, embed(store, images), lora, capture_attention)
    out = BackboneOutput(tokens[:, 0], tokens[:, 1:], attn)
    if single:
        out = BackboneOutput(out.cls_feature[0], out.patch_features[0], None if attn is None else attn[0])
    return out


def param_count(cfg: ViTConfig) -> int:
    return int(sum(np.prod(s) for s in backbone_shapes(cfg).values()))
