"""Synthetic multi-annotation scenes and a COCO-subset reader/writer.

Every record carries boxes, masks, category ids and a caption, mirroring the
detection / instance segmentation / captioning triple used for joint training.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .captioning import EOS, Vocabulary
from .core import make_rng_stream

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring", "bar", "ellipse")

BASE_COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.15),
}
SHIFTED_COLORS = {
    "cyan": (0.10, 0.90, 0.90),
    "magenta": (0.90, 0.10, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}

BACKGROUND = 0.08
MIN_RADIUS, MAX_RADIUS = 4, 7


@dataclass(frozen=True)
class ToyGrammar:
    """Shape categories, a color palette, and the caption template.

    Captions read ``a <color> <shape> and a <color> <shape> ...`` with
    instances ordered left to right by center x.
    """

    categories: tuple[str, ...] = SHAPES
    colors: tuple[tuple[str, tuple[float, float, float]], ...] = tuple(BASE_COLORS.items())
    name: str = "base"

    @classmethod
    def default(cls, num_categories: int = 8) -> "ToyGrammar":
        if not 1 <= num_categories <= len(SHAPES):
            raise ValueError(f"num_categories must be in [1, {len(SHAPES)}]")
        return cls(categories=SHAPES[:num_categories])

    def shifted(self) -> "ToyGrammar":
        """Same shapes, disjoint (unseen) colors."""
        return replace(self, colors=tuple(SHIFTED_COLORS.items()), name="shifted")

    @property
    def color_names(self) -> list[str]:
        return [c for c, _ in self.colors]

    def vocabulary(self) -> Vocabulary:
        colors = list(BASE_COLORS) + list(SHIFTED_COLORS)
        return Vocabulary(["a", "and", *colors, *self.categories])

    def caption(self, instances: Sequence["Instance"]) -> str:
        return " and ".join(f"a {inst.color} {self.categories[inst.category]}" for inst in instances)

    def parse(self, tokens: Sequence[int], vocab: Vocabulary) -> Counter:
        """Category multiset named by a caption; raises ValueError if it does not fit the template."""
        words = vocab.decode(tokens).split()
        colors = set(BASE_COLORS) | set(SHIFTED_COLORS)
        out: Counter = Counter()
        i = 0
        while i < len(words):
            if i and words[i] == "and":
                i += 1
            if i + 3 > len(words):
                raise ValueError(f"truncated caption {' '.join(words)!r}")
            a, color, shape = words[i : i + 3]
            if a != "a" or color not in colors or shape not in self.categories:
                raise ValueError(f"caption does not match template at {words[i:i + 3]}")
            out[self.categories.index(shape)] += 1
            i += 3
        return out


@dataclass
class Instance:
    category: int
    bbox: tuple[float, float, float, float]  # normalized (cx, cy, w, h)
    mask: np.ndarray  # bool [H, W]
    color: str | None = None


@dataclass
class SceneRecord:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    instances: list[Instance]
    caption: list[int]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# ---------------------------------------------------------------------------
# geometry


def mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight normalized (cx, cy, w, h) of a binary mask (pixel-edge bounds)."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return (float((x0 + x1) / 2 / w), float((y0 + y1) / 2 / h), float((x1 - x0) / w), float((y1 - y0) / h))


def rasterize_shape(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Hard (non anti-aliased) mask sampled at pixel centers."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        m = dx**2 + dy**2 <= r**2
    elif shape == "square":
        m = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif shape == "triangle":
        m = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape == "cross":
        t = r / 3
        m = ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    elif shape == "ring":
        d2 = dx**2 + dy**2
        m = (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    elif shape == "bar":
        m = (np.abs(dx) <= r) & (np.abs(dy) <= r * 0.4)
    elif shape == "ellipse":
        m = (dx / (0.55 * r)) ** 2 + (dy / r) ** 2 <= 1
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


# ---------------------------------------------------------------------------
# generation


def generate_record(
    grammar: ToyGrammar, vocab: Vocabulary, index: int, image_size: int, max_instances: int, seed: int
) -> SceneRecord:
    rng = make_rng_stream(seed, f"record:{index}")
    n_target = int(rng.integers(1, max_instances + 1))
    colors = grammar.colors
    placed: list[Instance] = []
    occupied = np.zeros((image_size, image_size), dtype=bool)
    for _ in range(60 * n_target):
        if len(placed) == n_target:
            break
        cat = int(rng.integers(len(grammar.categories)))
        color = colors[int(rng.integers(len(colors)))][0]
        r = float(rng.uniform(MIN_RADIUS, MAX_RADIUS))
        lo, hi = r + 1, image_size - r - 1
        cx, cy = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
        mask = rasterize_shape(grammar.categories[cat], cx, cy, r, image_size)
        if mask.sum() < 6 or (mask & occupied).any():
            continue
        occupied |= mask
        placed.append(Instance(cat, mask_bbox(mask), mask, color))
    if not placed:
        raise RuntimeError(f"could not place any shape for record {index}")
    placed.sort(key=lambda inst: (inst.bbox[0], inst.bbox[1], inst.category))

    noise = rng.uniform(-0.03, 0.03, size=(3, image_size, image_size))
    image = np.clip(BACKGROUND + noise, 0.0, 1.0)
    palette = dict(colors)
    for inst in placed:
        image[:, inst.mask] = np.asarray(palette[inst.color])[:, None]
    # quantize to the 8-bit grid so image files round-trip exactly
    image = (np.round(image * 255) / 255).astype(np.float32)
    caption = vocab.encode(grammar.caption(placed))
    meta = {
        "index": index,
        "seed": seed,
        "image_size": image_size,
        "max_instances": max_instances,
        "grammar": grammar.name,
    }
    return SceneRecord(image, placed, caption, meta)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("VISFT_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(
    grammar: ToyGrammar,
    n_records: int,
    image_size: int,
    max_instances: int,
    seed: int,
    vocab: Vocabulary | None = None,
    workers: int | None = None,
    start: int = 0,
) -> list[SceneRecord]:
    """Records are seeded per index, so the output does not depend on ``workers``.

    ``start`` offsets the indices, e.g. to draw a probe set disjoint from the training indices.
    """
    vocab = vocab or grammar.vocabulary()
    args = [(grammar, vocab, i, image_size, max_instances, seed) for i in range(start, start + n_records)]
    workers = workers or _workers()
    if workers == 1:
        return [generate_record(*a) for a in args]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda a: generate_record(*a), args))


def split(
    dataset: Sequence[SceneRecord],
    fractions: Sequence[float],
    seed: int,
    grammar: ToyGrammar | None = None,
    vocab: Vocabulary | None = None,
) -> dict[str, list[SceneRecord]]:
    """Deterministic partition into ``train`` / ``val`` / ``ood_probe``.

    Records landing in ``ood_probe`` are re-rendered from the shifted grammar
    (unseen colors) with their original index and seed, so partition identity
    is kept by ``meta["index"]``. Records without generator metadata (e.g.
    COCO imports) are passed through unchanged.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = make_rng_stream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    parts = {
        "train": [dataset[i] for i in sorted(order[:n_train])],
        "val": [dataset[i] for i in sorted(order[n_train : n_train + n_val])],
        "ood_probe": [dataset[i] for i in sorted(order[n_train + n_val :])],
    }
    shifted = (grammar or ToyGrammar.default()).shifted()
    vocab = vocab or shifted.vocabulary()
    ood = []
    for rec in parts["ood_probe"]:
        m = rec.meta
        if {"index", "seed", "image_size", "max_instances"} <= m.keys():
            ood.append(generate_record(shifted, vocab, m["index"], m["image_size"], m["max_instances"], m["seed"]))
        else:
            ood.append(rec)
    parts["ood_probe"] = ood
    return parts


def probe_labels(records: Sequence[SceneRecord], task: str) -> np.ndarray:
    """Labels for the held-out probe tasks: ``count`` (instances) or ``ood_shape`` (leftmost category)."""
    if task == "count":
        return np.array([len(r.instances) for r in records])
    if task == "ood_shape":
        return np.array([r.instances[0].category for r in records])
    raise ValueError(f"unknown probe task {task!r}")


def validate_record(record: SceneRecord) -> None:
    img = record.image
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"image must be [3, H, W], got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    h, w = img.shape[1:]
    for k, inst in enumerate(record.instances):
        cx, cy, bw, bh = inst.bbox
        if bw <= 0 or bh <= 0:
            raise ValueError(f"instance {k}: degenerate box {inst.bbox}")
        if cx - bw / 2 < -1e-9 or cy - bh / 2 < -1e-9 or cx + bw / 2 > 1 + 1e-9 or cy + bh / 2 > 1 + 1e-9:
            raise ValueError(f"instance {k}: box {inst.bbox} leaves the unit square")
        if inst.mask.shape != (h, w):
            raise ValueError(f"instance {k}: mask shape {inst.mask.shape} != image {(h, w)}")
        if inst.mask.any():
            tight = np.asarray(mask_bbox(inst.mask))
            edges = lambda b: np.array([b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2])
            diff = np.abs(edges(tight) - edges(np.asarray(inst.bbox))) * np.array([w, h, w, h])
            if (diff > 1 + 1e-6).any():
                raise ValueError(f"instance {k}: box disagrees with mask bounds by {diff.max():.2f}px")
    if not record.caption or record.caption[-1] != EOS:
        raise ValueError("caption must be nonempty and end with EOS")


# ---------------------------------------------------------------------------
# COCO subset


def mask_to_polygons(mask: np.ndarray) -> list[list[float]]:
    """Exact polygon cover of a binary mask: one rectangle per maximal vertical stack of equal row runs.

    Rasterizing the union of these rectangles at pixel centers reproduces the
    mask bit-exactly.
    """
    rects: list[list[int]] = []  # [x0, y0, x1, y1]
    open_runs: dict[tuple[int, int], list[int]] = {}
    h, w = mask.shape
    for y in range(h + 1):
        row = mask[y] if y < h else np.zeros(w, dtype=bool)
        padded = np.concatenate([[False], row, [False]])
        d = np.diff(padded.astype(np.int8))
        runs = set(zip(np.nonzero(d == 1)[0].tolist(), np.nonzero(d == -1)[0].tolist()))
        for key in list(open_runs):
            if key not in runs:
                r = open_runs.pop(key)
                r[3] = y
                rects.append(r)
        for key in sorted(runs):
            if key not in open_runs:
                open_runs[key] = [key[0], y, key[1], y + 1]
    rects.sort(key=lambda r: (r[1], r[0]))
    return [[float(x0), float(y0), float(x1), float(y0), float(x1), float(y1), float(x0), float(y1)] for x0, y0, x1, y1 in rects]


def rasterize_polygons(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Union of polygons, each filled by the even-odd rule sampled at pixel centers."""
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            continue
        x0 = max(int(np.floor(pts[:, 0].min())), 0)
        x1 = min(int(np.ceil(pts[:, 0].max())), width)
        y0 = max(int(np.floor(pts[:, 1].min())), 0)
        y1 = min(int(np.ceil(pts[:, 1].max())), height)
        if x1 <= x0 or y1 <= y0:
            continue
        py, px = np.mgrid[y0:y1, x0:x1] + 0.5
        inside = np.zeros(px.shape, dtype=bool)
        for (xi, yi), (xj, yj) in zip(pts, np.roll(pts, -1, axis=0)):
            if yi == yj:
                continue
            crosses = (yi > py) != (yj > py)
            x_int = xi + (py - yi) * (xj - xi) / (yj - yi)
            inside ^= crosses & (px < x_int)
        out[y0:y1, x0:x1] |= inside
    return out


def export_coco(records: Sequence[SceneRecord], out_dir, grammar: ToyGrammar, vocab: Vocabulary) -> dict:
    """Write ``images/``, ``instances.json`` and ``captions.json``; returns both documents."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, anns, caps = [], [], []
    ann_id = 1
    for image_id, rec in enumerate(records, start=1):
        h, w = rec.image_size
        name = f"{image_id:06d}.png"
        pixels = np.round(rec.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(out / "images" / name)
        images.append({"id": image_id, "file_name": name, "width": w, "height": h})
        for inst in rec.instances:
            cx, cy, bw, bh = inst.bbox
            anns.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": inst.category + 1,
                    "bbox": [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h],
                    "segmentation": mask_to_polygons(inst.mask),
                    "area": int(inst.mask.sum()),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
        caps.append({"id": image_id, "image_id": image_id, "caption": vocab.decode(rec.caption)})
    categories = [{"id": i + 1, "name": n} for i, n in enumerate(grammar.categories)]
    instances_doc = {"images": images, "annotations": anns, "categories": categories}
    captions_doc = {"images": images, "annotations": caps}
    (out / "instances.json").write_text(json.dumps(instances_doc, sort_keys=True), encoding="utf-8")
    (out / "captions.json").write_text(json.dumps(captions_doc, sort_keys=True), encoding="utf-8")
    return {"instances": instances_doc, "captions": captions_doc}


@dataclass
class CocoDataset:
    """Records plus counts of what the reader skipped or repaired."""

    records: list[SceneRecord]
    skipped_images: int = 0
    skipped_annotations: int = 0
    clamped_boxes: int = 0
    category_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _read_doc(doc) -> dict:
    if isinstance(doc, (str, os.PathLike)):
        return json.loads(Path(doc).read_text(encoding="utf-8"))
    return doc


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_coco_annotations(images_path, annotations_document, captions_document=None, vocab=None) -> CocoDataset:
    """Read the COCO subset (polygon instances + captions) into SceneRecords.

    Pixel ``[x, y, w, h]`` boxes are clamped to the image and normalized to
    ``(cx, cy, w, h)``. Crowd / RLE annotations are skipped. Images missing any
    of boxes, masks or a caption are skipped; counts are reported on the result.
    """
    inst_doc = _read_doc(annotations_document)
    cap_doc = _read_doc(captions_document) if captions_document is not None else None
    for key in ("images", "annotations"):
        if not isinstance(inst_doc.get(key), list):
            raise ValueError(f"annotation document lacks a {key!r} list")
    cats = sorted(inst_doc.get("categories", []), key=lambda c: c["id"])
    cat_index = {c["id"]: i for i, c in enumerate(cats)}

    captions: dict[int, str] = {}
    if cap_doc is not None:
        for c in cap_doc.get("annotations", []):
            if "image_id" not in c or not isinstance(c.get("caption"), str):
                raise ValueError(f"caption record {c.get('id', '?')}: needs image_id and a caption string")
            captions.setdefault(c["image_id"], c["caption"])
    if vocab is None:
        words = sorted({w for text in captions.values() for w in text.lower().split()})
        vocab = Vocabulary(words)

    images = {}
    for im in inst_doc["images"]:
        for key in ("id", "file_name", "width", "height"):
            if key not in im:
                raise ValueError(f"image record {im.get('id', '?')}: missing field {key!r}")
        images[im["id"]] = im

    by_image: dict[int, list[dict]] = {}
    result = CocoDataset([], category_names=[c["name"] for c in cats])
    for ann in inst_doc["annotations"]:
        aid = ann.get("id", "?")
        for key in ("image_id", "category_id", "bbox", "segmentation"):
            if key not in ann:
                raise ValueError(f"annotation {aid}: missing field {key!r}")
        if ann["image_id"] not in images:
            raise ValueError(f"annotation {aid}: unknown image_id {ann['image_id']}")
        if ann["category_id"] not in cat_index:
            raise ValueError(f"annotation {aid}: unknown category_id {ann['category_id']}")
        bbox = ann["bbox"]
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
            raise ValueError(f"annotation {aid}: bbox must be [x, y, w, h]")
        if ann.get("iscrowd", 0) or not isinstance(ann["segmentation"], list):
            result.skipped_annotations += 1
            continue
        by_image.setdefault(ann["image_id"], []).append(ann)

    for image_id in sorted(images):
        im = images[image_id]
        anns = by_image.get(image_id, [])
        if not anns or image_id not in captions:
            result.skipped_images += 1
            continue
        path = Path(images_path) / im["file_name"]
        if not path.exists():
            raise FileNotFoundError(f"image {image_id}: file {path} not found")
        image = load_image(path)
        H, W = int(im["height"]), int(im["width"])
        if image.shape[1:] != (H, W):
            raise ValueError(f"image {image_id}: file is {image.shape[1:]}, document says {(H, W)}")
        instances = []
        for ann in anns:
            x, y, w, h = (float(v) for v in ann["bbox"])
            x0, y0 = min(max(x, 0.0), W), min(max(y, 0.0), H)
            x1, y1 = min(max(x + w, 0.0), W), min(max(y + h, 0.0), H)
            if (x0, y0, x1, y1) != (x, y, x + w, y + h):
                result.clamped_boxes += 1
            if x1 - x0 <= 0 or y1 - y0 <= 0:
                raise ValueError(f"annotation {ann.get('id', '?')}: degenerate box after clamping")
            bbox = ((x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H)
            mask = rasterize_polygons(ann["segmentation"], H, W)
            instances.append(Instance(cat_index[ann["category_id"]], bbox, mask))
        caption = vocab.encode(captions[image_id])
        result.records.append(SceneRecord(image, instances, caption, {"coco_id": image_id}))
    if result.skipped_images or result.clamped_boxes or result.skipped_annotations:
        log.warning(
            "COCO load: skipped %d images, %d annotations; clamped %d boxes",
            result.skipped_images,
            result.skipped_annotations,
            result.clamped_boxes,
        )
    return result
