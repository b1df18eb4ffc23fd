"""Soft-attention LSTM caption decoder over patch features.

Each step concatenates ``[E[:, y_prev]; h_prev; z]`` (length m + n + D), maps
it through one affine layer to 4n pre-activations split as (i, f, o, g) with
activations (sigmoid, sigmoid, sigmoid, tanh), then::

    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import functional as fn
from .core import ConfigError, ParameterStore

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Closed vocabulary; ids are list positions and the four special tokens come first."""

    def __init__(self, words: Sequence[str]):
        tokens = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [BOS] + [self.index.get(w, UNK) for w in text.lower().split()] + [EOS]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (PAD, BOS, EOS))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIAL_TOKENS}")
        return cls(lines[len(SPECIAL_TOKENS) :])


@dataclass(frozen=True)
class CaptionConfig:
    embed_dim: int = 384
    lstm_dim: int = 384
    feature_dim: int = 384
    vocab_size: int = 1000
    max_len: int = 20
    attn_dim: int = 384

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if int(v) < 1:
                raise ConfigError(f"CaptionConfig.{k} must be >= 1")
        if self.vocab_size <= EOS:
            raise ConfigError("vocab_size must include the PAD, BOS and EOS ids")


@dataclass
class LSTMState:
    c: torch.Tensor  # [..., n]
    h: torch.Tensor  # [..., n]


def caption_shapes(cfg: CaptionConfig, backbone_dim: int) -> dict[str, tuple[int, ...]]:
    m, n, D, K, a = cfg.embed_dim, cfg.lstm_dim, cfg.feature_dim, cfg.vocab_size, cfg.attn_dim
    s = fn.linear_shapes("cap.feat_proj", backbone_dim, D)
    s.update(fn.linear_shapes("cap.att.feat", D, a))
    s.update(fn.linear_shapes("cap.att.hid", n, a))
    s.update(fn.linear_shapes("cap.att.score", a, 1))
    s["cap.embed"] = (m, K)
    s.update(fn.linear_shapes("cap.lstm", m + n + D, 4 * n))
    s.update(fn.linear_shapes("cap.init_c", D, n))
    s.update(fn.linear_shapes("cap.init_h", D, n))
    s.update(fn.linear_shapes("cap.out", n, K))
    return s


def build_caption_head(cfg: CaptionConfig, backbone_dim: int, rng: np.random.Generator) -> ParameterStore:
    store = fn.init_from_shapes(caption_shapes(cfg, backbone_dim), rng, std=0.1)
    store.meta["cap"] = cfg
    return store


def project_features(patch_features: torch.Tensor, store: ParameterStore) -> torch.Tensor:
    return fn.linear(store, "cap.feat_proj", patch_features)


def soft_attention(features: torch.Tensor, h_prev: torch.Tensor, store: ParameterStore):
    """Attention over P projected features [..., P, D] given h_prev [..., n].

    Returns ``(z [..., D], alpha [..., P])`` with alpha a softmax over P.
    """
    e = torch.tanh(fn.linear(store, "cap.att.feat", features) + fn.linear(store, "cap.att.hid", h_prev)[..., None, :])
    alpha = fn.linear(store, "cap.att.score", e)[..., 0].softmax(-1)
    z = (alpha[..., None] * features).sum(-2)
    return z, alpha


def lstm_step(y_prev, state: LSTMState, z: torch.Tensor, store: ParameterStore, return_gates: bool = False):
    """One recurrence step; returns ``(state', logits)`` (plus the gates if asked)."""
    E = store["cap.embed"]
    K = E.shape[1]
    y = torch.as_tensor(y_prev, dtype=torch.long)
    if bool(((y < 0) | (y >= K)).any()):
        raise ValueError(f"token id {y.tolist()} out of range [0, {K})")
    emb = E[:, y].T if y.dim() else E[:, y]
    x = torch.cat([emb, state.h, z], dim=-1)
    pre = fn.linear(store, "cap.lstm", x)
    i, f, o, g = pre.chunk(4, dim=-1)
    i, f, o, g = i.sigmoid(), f.sigmoid(), o.sigmoid(), g.tanh()
    c = f * state.c + i * g
    h = o * torch.tanh(c)
    logits = fn.linear(store, "cap.out", h)
    new = LSTMState(c, h)
    if return_gates:
        return new, logits, {"i": i, "f": f, "o": o, "g": g}
    return new, logits


def init_state(features: torch.Tensor, store: ParameterStore) -> LSTMState:
    mean = features.mean(-2)
    return LSTMState(fn.linear(store, "cap.init_c", mean), fn.linear(store, "cap.init_h", mean))


def pad_captions(captions: Sequence[Sequence[int]]) -> torch.Tensor:
    L = max(len(c) for c in captions)
    out = torch.full((len(captions), L), PAD, dtype=torch.long)
    for i, c in enumerate(captions):
        out[i, : len(c)] = torch.as_tensor(list(c), dtype=torch.long)
    return out


def caption_logits(patch_features: torch.Tensor, tokens: torch.Tensor, store: ParameterStore):
    """Teacher-forced logits [B, L-1, K] and attention weights [B, L-1, P]."""
    feats = project_features(patch_features, store)
    state = init_state(feats, store)
    logits, alphas = [], []
    for t in range(tokens.shape[1] - 1):
        z, alpha = soft_attention(feats, state.h, store)
        state, lg = lstm_step(tokens[:, t], state, z, store)
        logits.append(lg)
        alphas.append(alpha)
    return torch.stack(logits, 1), torch.stack(alphas, 1)


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean CE over positions whose target is not PAD."""
    ce = F.cross_entropy(logits.flatten(0, 1), targets.flatten(), reduction="none")
    mask = (targets.flatten() != PAD).to(ce.dtype)
    return (ce * mask).sum() / mask.sum()


def caption_loss(captions, patch_features: torch.Tensor, store: ParameterStore, attn_reg: float = 0.0):
    """Teacher-forced mean cross-entropy over non-PAD positions.

    ``captions`` are BOS-prefixed token lists (or an already padded [B, L]
    tensor); ``patch_features`` is [B, P, d]. ``attn_reg`` weights the optional
    doubly-stochastic penalty ``sum_p (1 - sum_t alpha_tp)^2``; it is off by default.
    """
    tokens = captions if isinstance(captions, torch.Tensor) else pad_captions(captions)
    if patch_features.dim() == 2:
        patch_features = patch_features[None]
    logits, alphas = caption_logits(patch_features, tokens, store)
    loss = masked_cross_entropy(logits, tokens[:, 1:])
    if attn_reg:
        valid = (tokens[:, 1:] != PAD).to(alphas.dtype)[..., None]
        loss = loss + attn_reg * ((1 - (alphas * valid).sum(1)) ** 2).sum(-1).mean()
    return loss


@torch.no_grad()
def decode_greedy(patch_features: torch.Tensor, store: ParameterStore, max_len: int) -> list[int]:
    """Argmax decoding from BOS; stops after emitting EOS or ``max_len`` tokens (EOS included)."""
    feats = project_features(patch_features[None] if patch_features.dim() == 2 else patch_features, store)
    state = init_state(feats, store)
    token = torch.tensor([BOS])
    out: list[int] = []
    for _ in range(max_len):
        z, _ = soft_attention(feats, state.h, store)
        state, logits = lstm_step(token, state, z, store)
        token = logits.argmax(-1)
        out.append(int(token[0]))
        if out[-1] == EOS:
            break
    return out
