"""Out-of-domain evaluation: CLS features, linear probes, and CLS attention maps.

Every probe compares two arms on the same records and the same fold split:
the frozen backbone alone (baseline) and the backbone with learned LoRA
factors. The only thing that differs between the arms is the adapter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from . import backbone as bb
from .core import ConfigError, make_rng_stream
from .data import probe_labels


@dataclass(frozen=True)
class ProbeConfig:
    max_epochs: int = 3000
    l2: float = 1e-3
    tol: float = 1e-5
    train_fraction: float = 0.5

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("probe max_epochs must be >= 1")
        if self.l2 < 0 or self.tol <= 0:
            raise ConfigError("probe l2 must be >= 0 and tol > 0")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("probe train_fraction must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, doc: Mapping | None) -> "ProbeConfig":
        return cls(**dict(doc or {}))


@dataclass
class ProbeReport:
    task: str
    accuracy: float
    n_eval: int
    baseline_accuracy: float | None = None
    n_train: int = 0
    epochs: int = 0
    converged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# features


@torch.no_grad()
def extract_features(backbone_store, lora, records, chunk: int = 64) -> np.ndarray:
    """CLS feature per record, float64 [N, d]; ``lora=None`` gives the baseline arm."""
    images = torch.from_numpy(np.stack([r.image for r in records])).float()
    rows = [bb.forward(backbone_store, images[i : i + chunk], lora).cls_feature for i in range(0, len(images), chunk)]
    return torch.cat(rows).double().numpy()


# ---------------------------------------------------------------------------
# linear probe


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax_regression(X: np.ndarray, y: np.ndarray, n_classes: int, l2: float, tol: float, max_epochs: int):
    """Full-batch gradient descent on mean cross-entropy + (l2/2)|W|^2.

    The step is 1/L with L = |[X, 1]|_2^2 / (2n) + l2, an upper bound on the
    curvature of the multinomial loss, so every step decreases the objective.
    Returns ``(W [d, K], b [K], epochs, converged)``.
    """
    n, d = X.shape
    Y = np.eye(n_classes)[y]
    Xa = np.hstack([X, np.ones((n, 1))])
    L = np.linalg.norm(Xa, 2) ** 2 / (2 * n) + l2
    step = 1.0 / L
    theta = np.zeros((d + 1, n_classes))
    reg = np.ones((d + 1, 1))
    reg[-1] = 0.0  # bias is not penalized
    for epoch in range(1, max_epochs + 1):
        grad = Xa.T @ (_softmax(Xa @ theta) - Y) / n + l2 * reg * theta
        if np.linalg.norm(grad) <= tol:
            return theta[:-1], theta[-1], epoch - 1, True
        theta -= step * grad
    return theta[:-1], theta[-1], max_epochs, False


def _fold(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(fraction * n))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _probe_one(features, labels, train, test, classes, cfg: ProbeConfig):
    X = np.asarray(features, dtype=np.float64)
    mu = X[train].mean(0)
    sd = X[train].std(0)
    sd[sd == 0] = 1.0
    X = (X - mu) / sd
    W, b, epochs, converged = fit_softmax_regression(X[train], labels[train], len(classes), cfg.l2, cfg.tol, cfg.max_epochs)
    pred = np.argmax(X[test] @ W + b, axis=1)
    return float(np.mean(pred == labels[test])), epochs, converged


def linear_probe(
    features,
    labels,
    probe_cfg: ProbeConfig | Mapping | None,
    rng: np.random.Generator,
    baseline_features=None,
    task: str = "probe",
) -> ProbeReport:
    """Train and score a softmax probe; with ``baseline_features`` the second arm reuses the same split."""
    cfg = probe_cfg if isinstance(probe_cfg, ProbeConfig) else ProbeConfig.from_mapping(probe_cfg)
    labels = np.asarray(labels)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError(f"features {features.shape} do not match {len(labels)} labels")
    classes, y = np.unique(labels, return_inverse=True)
    train, test = _fold(len(y), cfg.train_fraction, rng)
    for name, fold in (("train", train), ("eval", test)):
        if len(np.unique(y[fold])) < 2:
            raise ValueError(f"probe {task!r}: the {name} fold holds fewer than two classes")
    acc, epochs, converged = _probe_one(features, y, train, test, classes, cfg)
    base = None
    if baseline_features is not None:
        base, _, _ = _probe_one(baseline_features, y, train, test, classes, cfg)
    return ProbeReport(task, acc, len(test), base, len(train), epochs, converged)


def evaluate_probes(
    backbone_store,
    lora,
    records,
    tasks: Sequence[str],
    probe_cfg,
    seed: int,
    baseline_features: np.ndarray | None = None,
) -> dict[str, ProbeReport]:
    """Probe every task for the adapted arm and the baseline arm on identical records and splits."""
    base = extract_features(backbone_store, None, records) if baseline_features is None else baseline_features
    adapted = extract_features(backbone_store, lora, records) if lora is not None else base
    out = {}
    for task in tasks:
        rng = make_rng_stream(seed, f"probe:{task}")
        out[task] = linear_probe(adapted, probe_labels(records, task), probe_cfg, rng, base, task)
    return out


# ---------------------------------------------------------------------------
# attention maps


@torch.no_grad()
def cls_attention_map(backbone_store, lora, image, per_head: bool = False) -> np.ndarray:
    """Last-layer CLS attention over patches, [g, g] (or [heads, g, g] with ``per_head``).

    The CLS->CLS weight is dropped and the rest renormalized to sum to one.
    """
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    out = bb.forward(backbone_store, x, lora, capture_attention=True)
    att = out.attention_last
    if att.dim() == 4:
        att = att[0]
    row = att[:, 0, 1:].double()
    g = int(round(row.shape[-1] ** 0.5))
    if per_head:
        row = row / row.sum(-1, keepdim=True)
        return row.reshape(-1, g, g).numpy()
    row = row.mean(0)
    return (row / row.sum()).reshape(g, g).numpy()


def overlay(heatmap: np.ndarray, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a max-normalized, nearest-upsampled heatmap (red) over an image; uint8 [H, W, 3]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    H, W = img.shape[:2]
    h = np.asarray(heatmap, dtype=np.float64)
    if (h < 0).any():
        raise ValueError("heatmap must be non-negative")
    peak = h.max()
    h = h / peak if peak > 0 else h
    up = np.kron(h, np.ones((H // h.shape[0], W // h.shape[1])))
    heat = np.stack([up, np.zeros_like(up), np.zeros_like(up)], axis=-1)
    out = (1 - alpha) * img + alpha * heat
    return np.clip(np.round(out * 255), 0, 255).astype(np.uint8)


def render_heatmap(heatmap: np.ndarray, image: np.ndarray, path, alpha: float = 0.5) -> Path:
    """Write the overlay as a binary PPM with the image's dimensions."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(heatmap, image, alpha)).save(path, format="PPM")
    return path
