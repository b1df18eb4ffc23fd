"""Shared types: configs, deterministic RNG streams and the named parameter store."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Any, Iterator, Mapping

import numpy as np
import torch

EMPTY_DIGEST = "empty"

_FILTERS = ("frozen", "trainable", "all")


class ConfigError(ValueError):
    """Raised when a configuration document or dataclass fails validation."""


class FrozenTensorMutated(AssertionError):
    """A tensor flagged frozen changed during an optimizer step."""


# ---------------------------------------------------------------------------
# RNG streams


def make_rng_stream(seed: int, label: str) -> np.random.Generator:
    """Return a generator that depends only on ``(seed, label)``.

    The label is hashed with sha256 (not ``hash()``, which is salted per
    process) so streams survive process restarts.
    """
    if not label:
        raise ValueError("rng stream label must be nonempty")
    words = np.frombuffer(hashlib.sha256(label.encode("utf-8")).digest(), dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words.tolist()]))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> torch.Tensor:
    """Normal(0, std) truncated at two standard deviations, as float32."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return torch.from_numpy((out * std).astype(np.float32))


# ---------------------------------------------------------------------------
# Parameter store


@dataclass
class Entry:
    tensor: torch.Tensor
    trainable: bool = True


class ParameterStore:
    """Map of tensor name to ``Entry`` with a frozen/trainable flag per tensor.

    Iteration is always in sorted-name order so digests and serialization
    do not depend on insertion order. ``meta`` carries non-tensor context
    (e.g. the architecture config a backbone was built from); it is copied
    along with the store but never hashed.
    """

    def __init__(self, entries: Mapping[str, torch.Tensor] | None = None, trainable: bool = True):
        self._entries: dict[str, Entry] = {}
        self.meta: dict[str, Any] = {}
        for name, tensor in (entries or {}).items():
            self.add(name, tensor, trainable=trainable)

    def add(self, name: str, tensor: torch.Tensor, trainable: bool = True) -> None:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, torch.Tensor):
            tensor = torch.as_tensor(tensor)
        self._entries[name] = Entry(tensor.detach().contiguous(), bool(trainable))

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._entries[name].tensor
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __setitem__(self, name: str, tensor: torch.Tensor) -> None:
        entry = self._entries[name]
        if tuple(tensor.shape) != tuple(entry.tensor.shape):
            raise ValueError(
                f"shape mismatch for {name!r}: {tuple(tensor.shape)} vs {tuple(entry.tensor.shape)}"
            )
        entry.tensor = tensor

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def names(self, filter: str = "all") -> list[str]:
        if filter not in _FILTERS:
            raise ValueError(f"filter must be one of {_FILTERS}, got {filter!r}")
        return [
            n
            for n in sorted(self._entries)
            if filter == "all" or (self._entries[n].trainable == (filter == "trainable"))
        ]

    def items(self, filter: str = "all"):
        return [(n, self._entries[n].tensor) for n in self.names(filter)]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def set_trainable(self, flag: bool, prefix: str = "") -> "ParameterStore":
        for name, entry in self._entries.items():
            if name.startswith(prefix):
                entry.trainable = bool(flag)
        return self

    def freeze(self) -> "ParameterStore":
        return self.set_trainable(False)

    def unfreeze(self) -> "ParameterStore":
        return self.set_trainable(True)

    def numel(self, filter: str = "all") -> int:
        return sum(t.numel() for _, t in self.items(filter))

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name in self:
            e = self._entries[name]
            out.add(name, e.tensor.clone(), e.trainable)
        out.meta = dict(self.meta)
        return out

    def to(self, dtype: torch.dtype) -> "ParameterStore":
        out = ParameterStore()
        for name in self:
            e = self._entries[name]
            out.add(name, e.tensor.to(dtype).clone(), e.trainable)
        out.meta = dict(self.meta)
        return out

    def subset(self, prefix: str) -> "ParameterStore":
        out = ParameterStore()
        for name in self:
            if name.startswith(prefix):
                e = self._entries[name]
                out.add(name, e.tensor, e.trainable)
        out.meta = dict(self.meta)
        return out

    def update(self, other: "ParameterStore") -> "ParameterStore":
        for name in other:
            self.add(name, other[name], other.is_trainable(name))
        return self

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(self[n].shape) for n in self}

    def __repr__(self) -> str:
        return f"ParameterStore({len(self)} tensors, {self.numel()} params, {self.numel('trainable')} trainable)"


def snapshot(store: ParameterStore, filter: str = "all") -> str:
    """sha256 over (name, dtype, shape, bytes) of the selected tensors in sorted order.

    Returns ``EMPTY_DIGEST`` when nothing is selected.
    """
    names = store.names(filter)
    if not names:
        return EMPTY_DIGEST
    h = hashlib.sha256()
    for name in names:
        t = store[name].detach().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(t.dtype).encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Configs


@dataclass(frozen=True)
class ViTConfig:
    layers: int
    hidden_size: int
    patch_size: int
    mlp_size: int
    num_heads: int
    image_size: int

    def __post_init__(self):
        for name in ("layers", "hidden_size", "patch_size", "mlp_size", "num_heads", "image_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"ViTConfig.{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1


# Architecture rows of the EVA-ViT variants; image size 224 (16x16 patches of 14px).
EVA_VIT_G = ViTConfig(layers=40, hidden_size=1408, patch_size=14, mlp_size=6144, num_heads=16, image_size=224)
EVA_VIT_E = ViTConfig(layers=64, hidden_size=1792, patch_size=14, mlp_size=15360, num_heads=16, image_size=224)


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float
    warmup_iters: int
    total_iters: int
    weight_decay: float = 0.05

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be > 0")
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.total_iters > 0 and not self.warmup_iters < self.total_iters:
            raise ConfigError(
                f"warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})"
            )


@dataclass(frozen=True)
class RunConfig:
    seed: int
    stage: str
    optimizer: OptimizerConfig
    checkpoint_every: int = 0
    batch_size: int = 4
    clip_norm: float | None = None

    def __post_init__(self):
        if self.stage not in ("heads", "lora", "onestage"):
            raise ConfigError(f"stage must be 'heads', 'lora' or 'onestage', got {self.stage!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


# ---------------------------------------------------------------------------
# Configuration document

DEFAULT_CONFIG: dict[str, Any] = {
    "model": {
        "layers": 2,
        "hidden_size": 64,
        "patch_size": 8,
        "mlp_size": 128,
        "num_heads": 2,
        "image_size": 32,
    },
    "lora": {"rank": 4},
    "heads": {
        "detection": {
            "enc_layers": 1,
            "dec_layers": 2,
            "enc_dim": 32,
            "dec_dim": 48,
            "mlp_dim": 64,
            "num_heads": 2,
            "num_queries": 8,
        },
        "segmentation": {
            "enc_layers": 1,
            "dec_layers": 2,
            "enc_dim": 32,
            "enc_mlp_dim": 64,
            "dec_dim": 32,
            "dec_mlp_dim": 64,
            "num_heads": 2,
            "num_queries": 8,
        },
        "captioning": {
            "embed_dim": 16,
            "lstm_dim": 32,
            "feature_dim": 32,
            "attn_dim": 32,
            "max_len": 16,
        },
    },
    "data": {
        "n_records": 500,
        "n_probe_records": 200,
        "max_instances": 3,
        "num_categories": 8,
        "fractions": [0.8, 0.1, 0.1],
    },
    "train": {
        "seed": 0,
        "batch_size": 32,
        "checkpoint_every": 500,
        "weight_decay": 0.05,
        "clip_norm": 1.0,
        "stage1": {
            "detection": {"peak_lr": 2e-3, "warmup_iters": 25, "total_iters": 500},
            "segmentation": {"peak_lr": 1e-3, "warmup_iters": 25, "total_iters": 500},
            "captioning": {"peak_lr": 8e-3, "warmup_iters": 25, "total_iters": 333},
        },
        "stage2": {
            "peak_lr": 5e-3,
            "warmup_iters": 100,
            "total_iters": 2000,
            "alphas": {"captioning": 0.4, "detection": 0.3, "segmentation": 0.3},
        },
    },
    "eval": {
        "probe_tasks": ["count", "ood_shape"],
        "probe": {"max_epochs": 3000, "l2": 1e-3, "tol": 1e-5, "train_fraction": 0.5},
        "per_head_attention": False,
    },
}

# Full-size reference schedule; the desk-scale defaults above keep its relative budgets.
FULL_SCALE_TRAIN = {
    "stage1": {
        "detection": {"peak_lr": 5e-5, "warmup_iters": 2000, "total_iters": 150_000},
        "segmentation": {"peak_lr": 5e-5, "warmup_iters": 2000, "total_iters": 150_000},
        "captioning": {"peak_lr": 4e-4, "warmup_iters": 2000, "total_iters": 100_000},
    },
    "stage2": {
        "peak_lr": 1e-5,
        "warmup_iters": 2000,
        "total_iters": 50_000,
        "alphas": {"captioning": 0.4, "detection": 0.3, "segmentation": 0.3},
    },
    "checkpoint_every": 5000,
}


def _check_keys(doc: Mapping, schema: Mapping, path: str) -> None:
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(schema[key], dict) and schema[key]:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            _check_keys(value, schema[key], path + key + ".")


def _deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(doc: Mapping | None = None, overrides: list[str] | None = None) -> dict:
    """Validate ``doc`` against the known key tree and merge it onto the defaults.

    ``overrides`` are ``dotted.path=value`` strings; values are parsed as JSON
    when possible and applied in order (last writer wins).
    """
    doc = dict(doc or {})
    _check_keys(doc, DEFAULT_CONFIG, "")
    cfg = _deep_merge(DEFAULT_CONFIG, doc)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = cfg
        schema: Any = DEFAULT_CONFIG
        for i, part in enumerate(parts):
            if not isinstance(schema, dict) or part not in schema:
                raise ConfigError(f"unknown config key {key!r}")
            schema = schema[part]
            if i == len(parts) - 1:
                node[part] = value
            else:
                node = node[part]
    validate_config(cfg)
    return cfg


def validate_config(cfg: Mapping) -> None:
    vit_config(cfg)
    for task, tcfg in cfg["train"]["stage1"].items():
        OptimizerConfig(**tcfg)
    s2 = cfg["train"]["stage2"]
    OptimizerConfig(s2["peak_lr"], s2["warmup_iters"], s2["total_iters"])
    alphas = s2["alphas"]
    if any(a <= 0 for a in alphas.values()) or abs(sum(alphas.values()) - 1.0) > 1e-9:
        raise ConfigError(f"stage2 alphas must be positive and sum to 1, got {alphas}")
    rank = cfg["lora"]["rank"]
    if not 0 <= rank < cfg["model"]["hidden_size"]:
        raise ConfigError(f"lora rank {rank} must be < hidden_size")
    if cfg["data"]["max_instances"] > min(
        cfg["heads"]["detection"]["num_queries"], cfg["heads"]["segmentation"]["num_queries"]
    ):
        raise ConfigError("data.max_instances exceeds the number of head queries")
    fr = cfg["data"]["fractions"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
        raise ConfigError(f"data.fractions must be three non-negative numbers summing to 1, got {fr}")


def vit_config(cfg: Mapping) -> ViTConfig:
    return ViTConfig(**cfg["model"])


def run_config(cfg: Mapping, stage: str, task: str | None = None) -> RunConfig:
    train = cfg["train"]
    if stage == "heads":
        o = train["stage1"][task]
        clip = train["clip_norm"] if task in ("detection", "segmentation") else None
    else:
        o = train["stage2"]
        clip = train["clip_norm"]
    opt = OptimizerConfig(o["peak_lr"], o["warmup_iters"], o["total_iters"], train["weight_decay"])
    return RunConfig(
        seed=train["seed"],
        stage=stage,
        optimizer=opt,
        checkpoint_every=train["checkpoint_every"],
        batch_size=train["batch_size"],
        clip_norm=clip,
    )


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_digest(cfg: Any) -> str:
    if hasattr(cfg, "__dataclass_fields__"):
        cfg = asdict(cfg)
    return hashlib.sha256(canonical_json(cfg).encode("ascii")).hexdigest()
