"""Set-prediction detection head: learnable queries decoded against patch features.

Patch features are projected to ``enc_dim``, refined by a small encoder, then
projected to ``dec_dim`` to serve as decoder memory. Each query self-attends,
cross-attends to the memory, and is read out by a linear class head and a
3-layer MLP box head with sigmoid output (boxes are ``(cx, cy, w, h)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import functional as fn
from .core import ConfigError, ParameterStore
from .matching import Assignment, hungarian_match

DEFAULT_WEIGHTS = {"w_class": 1.0, "w_l1": 5.0, "w_giou": 2.0, "no_object": 1.0}


@dataclass(frozen=True)
class DetectionConfig:
    enc_layers: int = 6
    dec_layers: int = 6
    enc_dim: int = 128
    dec_dim: int = 256
    mlp_dim: int = 1024
    num_heads: int = 8
    num_queries: int = 100
    num_classes: int = 80

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if int(v) < 1:
                raise ConfigError(f"DetectionConfig.{k} must be >= 1")
        if self.enc_dim % self.num_heads or self.dec_dim % self.num_heads:
            raise ConfigError("enc_dim and dec_dim must be divisible by num_heads")


@dataclass
class DetPrediction:
    boxes: torch.Tensor  # [..., Q, 4]
    class_logits: torch.Tensor  # [..., Q, C+1]


# ---------------------------------------------------------------------------
# boxes


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor, pairwise: bool = True) -> torch.Tensor:
    """GIoU between xyxy boxes: pairwise [N, M], or elementwise for equal-length inputs."""
    if pairwise:
        a, b = a[:, None, :], b[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a + area_b - inter
    iou = inter / union
    hull = (torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])).prod(-1)
    return iou - (hull - union) / hull


# ---------------------------------------------------------------------------
# parameters and forward


def detection_shapes(cfg: DetectionConfig, feature_dim: int, n_patches: int) -> dict[str, tuple[int, ...]]:
    s = fn.linear_shapes("det.input_proj", feature_dim, cfg.enc_dim)
    s["det.enc_pos"] = (n_patches, cfg.enc_dim)
    for i in range(cfg.enc_layers):
        s.update(fn.encoder_layer_shapes(f"det.enc.{i}", cfg.enc_dim, cfg.mlp_dim))
    s.update(fn.norm_shapes("det.enc_norm", cfg.enc_dim))
    s.update(fn.linear_shapes("det.enc_to_dec", cfg.enc_dim, cfg.dec_dim))
    s["det.mem_pos"] = (n_patches, cfg.dec_dim)
    s["det.query_embed"] = (cfg.num_queries, cfg.dec_dim)
    for i in range(cfg.dec_layers):
        s.update(fn.decoder_layer_shapes(f"det.dec.{i}", cfg.dec_dim, cfg.mlp_dim))
    s.update(fn.norm_shapes("det.dec_norm", cfg.dec_dim))
    s.update(fn.linear_shapes("det.class_head", cfg.dec_dim, cfg.num_classes + 1))
    s.update(fn.mlp_shapes("det.box_head", [cfg.dec_dim, cfg.dec_dim, cfg.dec_dim, 4]))
    return s


def build_detection_head(
    cfg: DetectionConfig, feature_dim: int, n_patches: int, rng: np.random.Generator
) -> ParameterStore:
    store = fn.init_from_shapes(detection_shapes(cfg, feature_dim, n_patches), rng, std="fan_in")
    store.meta["det"] = cfg
    return store


def decode_queries(patch_features: torch.Tensor, head_store: ParameterStore) -> torch.Tensor:
    """Final-layer decoder hidden states, [B, Q, dec_dim]."""
    cfg: DetectionConfig = head_store.meta["det"]
    x = fn.linear(head_store, "det.input_proj", patch_features) + head_store["det.enc_pos"]
    for i in range(cfg.enc_layers):
        x = fn.encoder_layer(head_store, f"det.enc.{i}", x, cfg.num_heads)
    memory = fn.linear(head_store, "det.enc_to_dec", fn.layer_norm(head_store, "det.enc_norm", x))
    mem_pos = head_store["det.mem_pos"]
    q = head_store["det.query_embed"]
    tgt = q.expand(x.shape[0], -1, -1)
    for i in range(cfg.dec_layers):
        tgt = fn.decoder_layer(
            head_store, f"det.dec.{i}", tgt, memory, cfg.num_heads, query_pos=q, memory_pos=mem_pos
        )
    return fn.layer_norm(head_store, "det.dec_norm", tgt)


def det_forward(patch_features: torch.Tensor, head_store: ParameterStore) -> DetPrediction:
    single = patch_features.dim() == 2
    feats = patch_features[None] if single else patch_features
    hs = decode_queries(feats, head_store)
    logits = fn.linear(head_store, "det.class_head", hs)
    boxes = fn.mlp(head_store, "det.box_head", hs, 3).sigmoid()
    if single:
        return DetPrediction(boxes[0], logits[0])
    return DetPrediction(boxes, logits)


# ---------------------------------------------------------------------------
# loss


def match_cost(boxes, logits, labels, gt_boxes, weights=DEFAULT_WEIGHTS) -> torch.Tensor:
    """[Q, T] matching cost: -w_class p(class) + w_l1 |box - gt|_1 + w_giou (1 - GIoU)."""
    prob = logits.softmax(-1)[:, labels]
    l1 = torch.cdist(boxes, gt_boxes, p=1)
    giou = generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return -weights["w_class"] * prob + weights["w_l1"] * l1 + weights["w_giou"] * (1 - giou)


def _single_loss(boxes, logits, target, weights):
    labels = torch.as_tensor(target["labels"], dtype=torch.long)
    gt = torch.as_tensor(target["boxes"], dtype=boxes.dtype)
    num_classes = logits.shape[-1] - 1
    cls_target = torch.full((logits.shape[0],), num_classes, dtype=torch.long)
    class_weight = torch.ones(num_classes + 1, dtype=logits.dtype)
    class_weight[-1] = weights["no_object"]
    zero = boxes.sum() * 0
    if len(labels) == 0:
        return F.cross_entropy(logits, cls_target, class_weight), zero, zero, Assignment(())
    with torch.no_grad():
        cost = match_cost(boxes, logits, labels, gt, weights)
    assignment = hungarian_match(cost.cpu().numpy())
    qi = torch.tensor(assignment.queries, dtype=torch.long)
    ti = torch.tensor(assignment.targets, dtype=torch.long)
    cls_target[qi] = labels[ti]
    ce = F.cross_entropy(logits, cls_target, class_weight)
    n = len(labels)
    l1 = (boxes[qi] - gt[ti]).abs().sum() / n
    giou = generalized_box_iou(box_cxcywh_to_xyxy(boxes[qi]), box_cxcywh_to_xyxy(gt[ti]), pairwise=False)
    return ce, l1, (1 - giou).sum() / n, assignment


def det_set_loss(pred: DetPrediction, targets, weights=None) -> dict:
    """Matched set loss averaged over the batch.

    ``targets`` is one ``{"labels", "boxes"}`` mapping or a list of them (one
    per image). Returns ``{"total", "components": {"class", "l1", "giou"},
    "assignments"}``; components are unweighted.
    """
    w = dict(DEFAULT_WEIGHTS, **(weights or {}))
    boxes, logits = pred.boxes, pred.class_logits
    if boxes.dim() == 2:
        boxes, logits, targets = boxes[None], logits[None], [targets]
    parts = [_single_loss(b, lg, t, w) for b, lg, t in zip(boxes, logits, targets)]
    ce = torch.stack([p[0] for p in parts]).mean()
    l1 = torch.stack([p[1] for p in parts]).mean()
    giou = torch.stack([p[2] for p in parts]).mean()
    total = w["w_class"] * ce + w["w_l1"] * l1 + w["w_giou"] * giou
    return {
        "total": total,
        "components": {"class": ce, "l1": l1, "giou": giou},
        "assignments": [p[3] for p in parts],
    }


def targets_from_record(record) -> dict:
    return {
        "labels": [inst.category for inst in record.instances],
        "boxes": [list(inst.bbox) for inst in record.instances],
    }
