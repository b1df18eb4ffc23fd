"""Single-level query-based instance segmentation head.

Per-pixel map::

    F0     = input_proj(backbone patch grid)               [enc_dim, g, g]
    F1enc  = encoder(F0 tokens)                            [enc_dim, g, g]
    map    = R( up(G(F0)) + H(F1enc) )                     [dec_dim, 2g, 2g]

with ``G`` = 1x1 conv + GroupNorm, ``H`` = 1x1 conv + GroupNorm + bilinear 2x,
``R`` = 3x3 conv + GroupNorm + ReLU + 1x1 conv. ``G(F0)`` is resized to the
size of ``H``'s output before the sum. The mask logit of query ``i`` at a pixel
is the channelwise dot product of ``MLP(q_i)`` with the map there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import functional as fn
from .core import ConfigError, ParameterStore
from .matching import Assignment, hungarian_match

DEFAULT_WEIGHTS = {"w_class": 2.0, "w_bce": 5.0, "w_dice": 5.0}


@dataclass(frozen=True)
class SegConfig:
    enc_layers: int = 6
    dec_layers: int = 9
    enc_dim: int = 256
    enc_mlp_dim: int = 512
    dec_dim: int = 256
    dec_mlp_dim: int = 1024
    num_heads: int = 8
    num_queries: int = 100
    num_classes: int = 80

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if int(v) < 1:
                raise ConfigError(f"SegConfig.{k} must be >= 1")
        if self.enc_dim % self.num_heads or self.dec_dim % self.num_heads:
            raise ConfigError("enc_dim and dec_dim must be divisible by num_heads")


@dataclass
class PixelMaps:
    F0: torch.Tensor  # [B, c0, g, g]
    F1enc: torch.Tensor  # [B, c1, g, g]


@dataclass
class MaskPrediction:
    mask_logits: torch.Tensor  # [..., Q, Hm, Wm]
    class_logits: torch.Tensor  # [..., Q, C+1]


def segmentation_shapes(cfg: SegConfig, feature_dim: int, n_patches: int) -> dict[str, tuple[int, ...]]:
    e, dd = cfg.enc_dim, cfg.dec_dim
    s = fn.linear_shapes("seg.input_proj", feature_dim, e)
    s["seg.enc_pos"] = (n_patches, e)
    for i in range(cfg.enc_layers):
        s.update(fn.encoder_layer_shapes(f"seg.enc.{i}", e, cfg.enc_mlp_dim))
    s.update(fn.norm_shapes("seg.enc_norm", e))
    s.update(fn.conv_shapes("seg.pix.G.conv", e, dd, 1))
    s.update(fn.norm_shapes("seg.pix.G.gn", dd))
    s.update(fn.conv_shapes("seg.pix.H.conv", e, dd, 1))
    s.update(fn.norm_shapes("seg.pix.H.gn", dd))
    s.update(fn.conv_shapes("seg.pix.R.conv3", dd, dd, 3))
    s.update(fn.norm_shapes("seg.pix.R.gn", dd))
    s.update(fn.conv_shapes("seg.pix.R.conv1", dd, dd, 1))
    s.update(fn.linear_shapes("seg.mem_proj", e, dd))
    s["seg.query_embed"] = (cfg.num_queries, dd)
    for i in range(cfg.dec_layers):
        s.update(fn.decoder_layer_shapes(f"seg.dec.{i}", dd, cfg.dec_mlp_dim))
    s.update(fn.norm_shapes("seg.dec_norm", dd))
    s.update(fn.linear_shapes("seg.class_head", dd, cfg.num_classes + 1))
    s.update(fn.mlp_shapes("seg.mask_mlp", [dd, dd, dd, dd]))
    return s


def build_segmentation_head(
    cfg: SegConfig, feature_dim: int, n_patches: int, rng: np.random.Generator
) -> ParameterStore:
    store = fn.init_from_shapes(segmentation_shapes(cfg, feature_dim, n_patches), rng, std="fan_in")
    store.meta["seg"] = cfg
    return store


def _to_grid(tokens: torch.Tensor) -> torch.Tensor:
    b, p, c = tokens.shape
    g = int(round(p**0.5))
    if g * g != p:
        raise ValueError(f"{p} patch tokens do not form a square grid")
    return tokens.transpose(1, 2).reshape(b, c, g, g)


def encode_pixels(patch_features: torch.Tensor, head_store: ParameterStore) -> tuple[PixelMaps, torch.Tensor]:
    """Return the two pixel maps and the encoder tokens [B, P, enc_dim]."""
    cfg: SegConfig = head_store.meta["seg"]
    f0 = fn.linear(head_store, "seg.input_proj", patch_features)
    x = f0
    for i in range(cfg.enc_layers):
        x = fn.encoder_layer(head_store, f"seg.enc.{i}", x, cfg.num_heads, pos=head_store["seg.enc_pos"])
    x = fn.layer_norm(head_store, "seg.enc_norm", x)
    return PixelMaps(_to_grid(f0), _to_grid(x)), x


def pixel_decode(F0: torch.Tensor, F1enc: torch.Tensor, head_store: ParameterStore) -> torch.Tensor:
    """``R(up(G(F0)) + H(F1enc))`` for maps shaped [C, h, w] or [B, C, h, w]."""
    single = F0.dim() == 3
    if single:
        F0, F1enc = F0[None], F1enc[None]
    if F0.shape[-2:] != F1enc.shape[-2:]:
        raise ValueError(f"F0 grid {tuple(F0.shape[-2:])} != F1enc grid {tuple(F1enc.shape[-2:])}")
    h, w = F1enc.shape[-2:]
    size = (2 * h, 2 * w)
    g = fn.group_norm(head_store, "seg.pix.G.gn", fn.conv2d(head_store, "seg.pix.G.conv", F0))
    hh = fn.group_norm(head_store, "seg.pix.H.gn", fn.conv2d(head_store, "seg.pix.H.conv", F1enc))
    hh = fn.upsample(hh, size)
    x = fn.upsample(g, size) + hh
    x = fn.conv2d(head_store, "seg.pix.R.conv3", x, padding=1)
    x = F.relu(fn.group_norm(head_store, "seg.pix.R.gn", x))
    out = fn.conv2d(head_store, "seg.pix.R.conv1", x)
    return out[0] if single else out


def mask_embed(q_hidden: torch.Tensor, head_store: ParameterStore) -> torch.Tensor:
    return fn.mlp(head_store, "seg.mask_mlp", q_hidden, 3)


def project_masks(embedding: torch.Tensor, per_pixel_map: torch.Tensor, size=None) -> torch.Tensor:
    """Channelwise dot product of query embeddings with the per-pixel map, then resize.

    embedding: [C] / [Q, C] / [B, Q, C]; map: [C, H, W] / [B, C, H, W].
    """
    if embedding.shape[-1] != per_pixel_map.shape[-3]:
        raise ValueError(
            f"mask embedding has {embedding.shape[-1]} channels, map has {per_pixel_map.shape[-3]}"
        )
    if per_pixel_map.dim() == 3:
        out = torch.einsum("...c,chw->...hw", embedding, per_pixel_map)
    else:
        out = torch.einsum("bqc,bchw->bqhw", embedding, per_pixel_map)
    if size is None or tuple(out.shape[-2:]) == tuple(size):
        return out
    lead = out.shape[:-2]
    flat = out.reshape(-1, 1, *out.shape[-2:])
    return fn.upsample(flat, size).reshape(*lead, *size)


def mask_project(q_hidden: torch.Tensor, per_pixel_map: torch.Tensor, head_store: ParameterStore, size=None):
    return project_masks(mask_embed(q_hidden, head_store), per_pixel_map, size)


def seg_forward(patch_features: torch.Tensor, head_store: ParameterStore) -> MaskPrediction:
    cfg: SegConfig = head_store.meta["seg"]
    single = patch_features.dim() == 2
    feats = patch_features[None] if single else patch_features
    maps, enc_tokens = encode_pixels(feats, head_store)
    per_pixel = pixel_decode(maps.F0, maps.F1enc, head_store)
    memory = fn.linear(head_store, "seg.mem_proj", enc_tokens)
    q = head_store["seg.query_embed"]
    tgt = q.expand(feats.shape[0], -1, -1)
    for i in range(cfg.dec_layers):
        tgt = fn.decoder_layer(head_store, f"seg.dec.{i}", tgt, memory, cfg.num_heads, query_pos=q)
    hs = fn.layer_norm(head_store, "seg.dec_norm", tgt)
    masks = mask_project(hs, per_pixel, head_store)
    logits = fn.linear(head_store, "seg.class_head", hs)
    if single:
        return MaskPrediction(masks[0], logits[0])
    return MaskPrediction(masks, logits)


# ---------------------------------------------------------------------------
# loss


def dice_loss(pred_prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - 2 sum(p*g) / (sum(p) + sum(g))`` over the trailing pixel axes; 0 when both are empty."""
    p = pred_prob.flatten(-2)
    g = target.flatten(-2)
    num = 2 * (p * g).sum(-1)
    den = p.sum(-1) + g.sum(-1)
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, 1 - num / safe, torch.zeros_like(den))


def pairwise_mask_costs(mask_logits: torch.Tensor, gt_masks: torch.Tensor):
    """Mean per-pixel BCE and dice between every query mask and every target: two [Q, T] matrices."""
    x = mask_logits.flatten(1)
    y = gt_masks.flatten(1).to(x.dtype)
    n = x.shape[1]
    bce = (F.softplus(-x) @ y.T + F.softplus(x) @ (1 - y).T) / n
    p = x.sigmoid()
    num = 2 * p @ y.T
    den = p.sum(1)[:, None] + y.sum(1)[None, :]
    dice = torch.where(den > 0, 1 - num / torch.where(den > 0, den, torch.ones_like(den)), torch.zeros_like(den))
    return bce, dice


def resample_masks(masks, size) -> torch.Tensor:
    """Area-resample binary masks [T, H, W] to ``size``; returns soft targets in [0, 1]."""
    m = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    if m.numel() == 0:
        return torch.zeros((0, *size))
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    return F.interpolate(m[:, None], size=size, mode="area")[:, 0]


def _single_loss(mask_logits, logits, target, w):
    labels = torch.as_tensor(target["labels"], dtype=torch.long)
    num_classes = logits.shape[-1] - 1
    cls_target = torch.full((logits.shape[0],), num_classes, dtype=torch.long)
    zero = mask_logits.sum() * 0
    if len(labels) == 0:
        return F.cross_entropy(logits, cls_target), zero, zero, Assignment(())
    gt = torch.as_tensor(target["masks"], dtype=mask_logits.dtype)
    if gt.shape[-2:] != mask_logits.shape[-2:]:
        gt = resample_masks(gt, tuple(mask_logits.shape[-2:])).to(mask_logits.dtype)
    with torch.no_grad():
        bce_c, dice_c = pairwise_mask_costs(mask_logits, gt)
        prob = logits.softmax(-1)[:, labels]
        cost = -w["w_class"] * prob + w["w_bce"] * bce_c + w["w_dice"] * dice_c
    assignment = hungarian_match(cost.cpu().numpy())
    qi = torch.tensor(assignment.queries, dtype=torch.long)
    ti = torch.tensor(assignment.targets, dtype=torch.long)
    cls_target[qi] = labels[ti]
    ce = F.cross_entropy(logits, cls_target)
    matched = mask_logits[qi]
    bce = F.binary_cross_entropy_with_logits(matched, gt[ti], reduction="none").flatten(1).mean(1).mean()
    dice = dice_loss(matched.sigmoid(), gt[ti]).mean()
    return ce, bce, dice, assignment


def seg_loss(pred: MaskPrediction, targets, weights=None) -> dict:
    """Matched mask loss: CE over all queries + per-pixel BCE + dice over matched pairs.

    ``targets``: ``{"labels", "masks"}`` or a list of them; masks at any
    resolution are area-resampled to the prediction's mask size.
    """
    w = dict(DEFAULT_WEIGHTS, **(weights or {}))
    masks, logits = pred.mask_logits, pred.class_logits
    if masks.dim() == 3:
        masks, logits, targets = masks[None], logits[None], [targets]
    parts = [_single_loss(m, lg, t, w) for m, lg, t in zip(masks, logits, targets)]
    ce = torch.stack([p[0] for p in parts]).mean()
    bce = torch.stack([p[1] for p in parts]).mean()
    dice = torch.stack([p[2] for p in parts]).mean()
    total = w["w_class"] * ce + w["w_bce"] * bce + w["w_dice"] * dice
    return {
        "total": total,
        "components": {"class": ce, "bce": bce, "dice": dice},
        "assignments": [p[3] for p in parts],
    }


def targets_from_record(record, size=None) -> dict:
    masks = np.stack([inst.mask for inst in record.instances]) if record.instances else np.zeros((0, 1, 1))
    m = resample_masks(masks, size) if size is not None and len(record.instances) else torch.as_tensor(masks)
    return {"labels": [inst.category for inst in record.instances], "masks": m}
