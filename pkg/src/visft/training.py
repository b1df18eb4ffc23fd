"""Two-stage fine-tuning: per-task head training on a frozen backbone, then joint LoRA training.

Stage 1 (heads): the backbone is frozen, so patch features are extracted once
and each head is fit on them independently. Stage 2 (lora): every iteration
draws one task with probability ``alpha``, fills a batch for it, runs the
LoRA-augmented backbone and steps only the adapter factors. The one-stage
baseline runs the stage-2 loop with the heads trainable too.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import backbone as bb
from .captioning import caption_loss, pad_captions
from .checkpoint import Checkpoint, save_checkpoint
from .core import FrozenTensorMutated, OptimizerConfig, ParameterStore, RunConfig, make_rng_stream, snapshot
from .detection import det_forward, det_set_loss
from .detection import targets_from_record as det_targets
from .lora import LoraSet
from .segmentation import resample_masks, seg_forward, seg_loss

log = logging.getLogger(__name__)

TASKS = ("detection", "segmentation", "captioning")


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(iteration: int, cfg: OptimizerConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_iters``."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration < cfg.warmup_iters:
        return cfg.peak_lr * iteration / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    progress = (iteration - cfg.warmup_iters) / span if span else 1.0
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over the trainable tensors of one or more stores.

    Per step ``t`` with learning rate ``lr``::

        p <- p * (1 - lr * wd)                       (decayed tensors only)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

    By default 1-D tensors (biases, norm gains) are not decayed.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05, decay_1d=False):
        self.params: list[tuple[str, torch.Tensor]] = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_1d = decay_1d
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and (p.dim() > 1 or self.decay_1d):
                p.mul_(1 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m.mul_(self.b1).add_(g, alpha=1 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_store(self) -> ParameterStore:
        out = ParameterStore()
        for n, _ in self.params:
            out.add(f"optim.m.{n}", self.m[n].clone(), trainable=False)
            out.add(f"optim.v.{n}", self.v[n].clone(), trainable=False)
        out.add("optim.step", torch.tensor([self.t], dtype=torch.int64), trainable=False)
        return out


class FreezeGuard:
    """Records digests of frozen stores and fails hard if any of them changes."""

    def __init__(self, **stores: ParameterStore):
        self.stores = stores
        self.digests = {k: snapshot(s, "frozen") for k, s in stores.items()}

    def check(self, iteration: int | None = None) -> None:
        for k, s in self.stores.items():
            if snapshot(s, "frozen") != self.digests[k]:
                at = "" if iteration is None else f" at iteration {iteration}"
                raise FrozenTensorMutated(f"frozen tensors of {k!r} changed{at}")


def _require_grad(stores: Sequence[ParameterStore]) -> list[tuple[str, torch.Tensor]]:
    params = []
    for store in stores:
        for name in store.names("trainable"):
            t = store[name]
            if not t.is_floating_point():
                continue
            t.requires_grad_(True)
            params.append((name, t))
    return params


def _release(params) -> None:
    for _, p in params:
        p.grad = None
        p.requires_grad_(False)


# ---------------------------------------------------------------------------
# tasks and data


@dataclass
class TaskSpec:
    name: str
    head_store: ParameterStore
    loss_fn: Callable
    alpha: float = 1.0


class TrainingData:
    """Images and per-task targets prepared once from a list of SceneRecords."""

    def __init__(self, records, mask_size: tuple[int, int] | None = None):
        if not records:
            raise ValueError("no training records")
        self.records = list(records)
        self.images = torch.from_numpy(np.stack([r.image for r in self.records])).float()
        self.det = [det_targets(r) for r in self.records]
        self.mask_size = mask_size
        self.seg = []
        for r in self.records:
            masks = np.stack([i.mask for i in r.instances])
            m = resample_masks(masks, mask_size) if mask_size else torch.as_tensor(masks, dtype=torch.float32)
            self.seg.append({"labels": [i.category for i in r.instances], "masks": m})
        self.captions = [list(r.caption) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


def detection_loss(head_store, patch_features, idx, data: TrainingData) -> dict:
    pred = det_forward(patch_features, head_store)
    return det_set_loss(pred, [data.det[i] for i in idx])


def segmentation_loss(head_store, patch_features, idx, data: TrainingData) -> dict:
    pred = seg_forward(patch_features, head_store)
    return seg_loss(pred, [data.seg[i] for i in idx])


def captioning_loss(head_store, patch_features, idx, data: TrainingData) -> dict:
    tokens = pad_captions([data.captions[i] for i in idx])
    loss = caption_loss(tokens, patch_features, head_store)
    return {"total": loss, "components": {"ce": loss}}


LOSSES = {"detection": detection_loss, "segmentation": segmentation_loss, "captioning": captioning_loss}


def sample_task(rng: np.random.Generator, tasks: Sequence[TaskSpec]) -> TaskSpec:
    if not tasks:
        raise ValueError("no tasks to sample from")
    alphas = np.array([t.alpha for t in tasks], dtype=np.float64)
    if (alphas <= 0).any() or abs(alphas.sum() - 1.0) > 1e-9:
        raise ValueError(f"task probabilities must be positive and sum to 1, got {alphas.tolist()}")
    return tasks[int(rng.choice(len(tasks), p=alphas))]


def smoothed(losses: Sequence[float], window: int = 25) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` losses."""
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    lora: LoraSet | None = None
    heads: dict[str, ParameterStore] = field(default_factory=dict)

    def task_losses(self, name: str) -> list[float]:
        return [l for l, t in zip(self.losses, self.tasks) if t == name]

    def joint_smoothed(self, alphas: dict[str, float], window: int = 25) -> tuple[float, float]:
        """Alpha-weighted sum of each task's first and last smoothed windows.

        The raw joint trace interleaves tasks with very different loss scales,
        so its windows mostly measure which tasks happened to be sampled.
        """
        first = last = 0.0
        for name, a in alphas.items():
            f, l = smoothed(self.task_losses(name), window)
            first += a * f
            last += a * l
        return first, last


@torch.no_grad()
def extract_patch_features(backbone_store, images: torch.Tensor, lora=None, chunk: int = 64) -> torch.Tensor:
    out = [bb.forward(backbone_store, images[i : i + chunk], lora).patch_features for i in range(0, len(images), chunk)]
    return torch.cat(out)


def _clip(params, max_norm):
    if max_norm:
        torch.nn.utils.clip_grad_norm_([p for _, p in params], max_norm)


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(
    task: TaskSpec,
    backbone_store: ParameterStore,
    data: TrainingData,
    cfg: RunConfig,
    features: torch.Tensor | None = None,
) -> TrainResult:
    """Fit one head on frozen backbone features. Tasks are independent and may run in parallel."""
    if backbone_store.names("trainable"):
        raise ValueError("stage 1 needs a fully frozen backbone")
    head = task.head_store
    guard = FreezeGuard(backbone=backbone_store, head=head)
    if features is None:
        features = extract_patch_features(backbone_store, data.images)
    rng = make_rng_stream(cfg.seed, f"batches:stage1:{task.name}")
    params = _require_grad([head])
    opt = AdamW(params, weight_decay=cfg.optimizer.weight_decay)
    result = TrainResult(heads={task.name: head})
    try:
        for it in range(1, cfg.optimizer.total_iters + 1):
            idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
            out = task.loss_fn(head, features[idx], idx, data)
            opt.zero_grad()
            out["total"].backward()
            _clip(params, cfg.clip_norm)
            opt.step(lr_at(it, cfg.optimizer))
            guard.check(it)
            result.losses.append(float(out["total"].detach()))
            result.tasks.append(task.name)
    finally:
        _release(params)
    return result


# ---------------------------------------------------------------------------
# stage 2 and the one-stage baseline


def _joint_loop(
    tasks: Sequence[TaskSpec],
    backbone_store: ParameterStore,
    lora: LoraSet,
    data: TrainingData,
    cfg: RunConfig,
    trainable_stores: Sequence[ParameterStore],
    out_dir=None,
    meta: dict | None = None,
    label: str = "stage2",
) -> TrainResult:
    frozen = {"backbone": backbone_store, **{f"head:{t.name}": t.head_store for t in tasks}, "lora": lora.store}
    guard = FreezeGuard(**frozen)
    sampler = make_rng_stream(cfg.seed, "sampler")
    batch_rngs = {t.name: make_rng_stream(cfg.seed, f"batches:{label}:{t.name}") for t in tasks}
    params = _require_grad(trainable_stores)
    opt = AdamW(params, weight_decay=cfg.optimizer.weight_decay)
    result = TrainResult(lora=lora, heads={t.name: t.head_store for t in tasks})
    try:
        for it in range(1, cfg.optimizer.total_iters + 1):
            task = sample_task(sampler, tasks)
            idx = batch_rngs[task.name].choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
            feats = bb.forward(backbone_store, data.images[idx], lora).patch_features
            out = task.loss_fn(task.head_store, feats, idx, data)
            opt.zero_grad()
            out["total"].backward()
            _clip(params, cfg.clip_norm)
            opt.step(lr_at(it, cfg.optimizer))
            guard.check(it)
            result.losses.append(float(out["total"].detach()))
            result.tasks.append(task.name)
            if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                path = Path(out_dir) / f"lora_{it:06d}.vsft"
                m = dict(meta or {}, iteration=it, seed=cfg.seed, stage=label)
                sections = {"lora": lora.store}
                if label == "onestage":
                    heads = ParameterStore()
                    for t in tasks:
                        heads.update(t.head_store)
                    sections["heads"] = heads
                save_checkpoint(path, Checkpoint(sections, m))
                result.checkpoints.append(path)
    finally:
        _release(params)
    return result


def train_stage2(
    tasks: Sequence[TaskSpec],
    backbone_store: ParameterStore,
    lora: LoraSet,
    data: TrainingData,
    cfg: RunConfig,
    out_dir=None,
    meta: dict | None = None,
) -> TrainResult:
    """Joint multi-task training of the LoRA factors only; backbone and heads stay frozen."""
    if backbone_store.names("trainable"):
        raise ValueError("stage 2 needs a fully frozen backbone")
    for t in tasks:
        if t.head_store.names("trainable"):
            raise ValueError(f"stage 2 needs frozen heads; {t.name!r} has trainable tensors")
    lora.store.unfreeze()
    return _joint_loop(tasks, backbone_store, lora, data, cfg, [lora.store], out_dir, meta, "stage2")


def train_one_stage(
    tasks: Sequence[TaskSpec],
    backbone_store: ParameterStore,
    lora: LoraSet,
    data: TrainingData,
    cfg: RunConfig,
    out_dir=None,
    meta: dict | None = None,
) -> TrainResult:
    """Baseline: heads (freshly initialized) and LoRA updated together in the joint loop."""
    if backbone_store.names("trainable"):
        raise ValueError("the backbone stays frozen in the one-stage baseline too")
    lora.store.unfreeze()
    for t in tasks:
        t.head_store.unfreeze()
    stores = [lora.store] + [t.head_store for t in tasks]
    return _joint_loop(tasks, backbone_store, lora, data, cfg, stores, out_dir, meta, "onestage")
