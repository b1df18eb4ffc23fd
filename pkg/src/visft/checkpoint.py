"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"VSFT"  version:u32  meta_len:u32  meta:utf-8 canonical JSON
    repeated until EOF:
        name_len:u32  name:utf-8  rank:u32  dims:u64*rank  dtype:u8  payload (row-major)

dtype tags: 0 = float32, 1 = float64, 2 = int64. Tensors are written in sorted
name order across all sections, so equal contents give byte-identical files.
Section membership is recovered from the name prefix: ``lora.`` -> lora,
``det.``/``seg.``/``cap.`` -> heads, ``optim.`` -> optimizer, anything else ->
backbone.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .core import ParameterStore, ViTConfig, canonical_json

MAGIC = b"VSFT"
VERSION = 1
SECTIONS = ("backbone", "lora", "heads", "optimizer")

_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_NP = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TORCH = {0: torch.float32, 1: torch.float64, 2: torch.int64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    sections: dict[str, ParameterStore] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.sections) - set(SECTIONS)
        if unknown:
            raise CheckpointError(f"unknown checkpoint sections {sorted(unknown)}")

    def tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for sec, store in self.sections.items():
            for name in store:
                if _section_of(name) != sec:
                    raise CheckpointError(f"tensor {name!r} cannot live in section {sec!r}")
                if name in out:
                    raise CheckpointError(f"duplicate tensor {name!r}")
                out[name] = store[name]
        return out


def _section_of(name: str) -> str:
    if name.startswith("lora."):
        return "lora"
    if name.startswith(("det.", "seg.", "cap.")):
        return "heads"
    if name.startswith("optim."):
        return "optimizer"
    return "backbone"


def _jsonable(value):
    if hasattr(value, "__dataclass_fields__"):
        return {"__type__": type(value).__name__, **asdict(value)}
    return value


def store_meta(store: ParameterStore) -> dict:
    out = {}
    for k, v in store.meta.items():
        if k == "vocab":
            out[k] = list(v.tokens)
        else:
            out[k] = _jsonable(v)
    return out


def restore_meta(doc: dict) -> dict:
    from .captioning import CaptionConfig, Vocabulary
    from .detection import DetectionConfig
    from .segmentation import SegConfig

    types = {c.__name__: c for c in (ViTConfig, DetectionConfig, SegConfig, CaptionConfig)}
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict) and v.get("__type__") in types:
            fields = {kk: vv for kk, vv in v.items() if kk != "__type__"}
            out[k] = types[v["__type__"]](**fields)
        elif k == "vocab":
            out[k] = Vocabulary(v[4:])
        else:
            out[k] = v
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    meta = dict(ckpt.meta)
    meta["sections"] = sorted(ckpt.sections)
    meta["trainable"] = sorted(
        n for store in ckpt.sections.values() for n in store.names("trainable")
    )
    meta["store_meta"] = {sec: store_meta(store) for sec, store in sorted(ckpt.sections.items()) if store.meta}
    meta_bytes = canonical_json(meta).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        tag = _DTYPES[t.dtype]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(t.numpy().astype(_NP[tag], copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    trainable = set(meta.pop("trainable", []))
    sections_present = meta.pop("sections", [])
    store_metas = meta.pop("store_meta", {})
    sections = {sec: ParameterStore() for sec in sections_present}
    while r.pos < len(data):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        (tag,) = r.unpack("<B", f"dtype of {name!r}")
        if tag not in _NP:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r} at offset {r.pos - 1}")
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(n * _NP[tag].itemsize, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype=_NP[tag]).reshape(dims).copy()
        sec = _section_of(name)
        if sec not in sections:
            raise CheckpointError(f"tensor {name!r} belongs to undeclared section {sec!r}")
        sections[sec].add(name, torch.from_numpy(arr).to(_TORCH[tag]), trainable=name in trainable)
    for sec, m in store_metas.items():
        sections[sec].meta = restore_meta(m)
    return Checkpoint(sections, meta)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_digest`` a config mismatch is rejected."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = decode_checkpoint(path.read_bytes())
    if expected_digest is not None and ckpt.meta.get("config_digest") != expected_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint has {ckpt.meta.get('config_digest')!r}, "
            f"expected {expected_digest!r}"
        )
    return ckpt
