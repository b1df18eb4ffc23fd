"""End-to-end wiring: config -> data -> stage 1 -> stage 2 -> probes.

Everything random is drawn from named streams of the configured seed, so a
run is a pure function of its config document. The CLI, the estimator
wrappers and the strategy comparison all go through this module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import torch

from . import backbone as bb
from .captioning import CaptionConfig, Vocabulary, build_caption_head
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .core import ParameterStore, config_digest, make_rng_stream, run_config, vit_config
from .data import SceneRecord, ToyGrammar, export_coco, generate_dataset, load_coco_annotations, split
from .detection import DetectionConfig, build_detection_head
from .evaluation import ProbeConfig, evaluate_probes, extract_features
from .lora import LoraSet, init_lora
from .segmentation import SegConfig, build_segmentation_head
from .training import (
    LOSSES,
    TASKS,
    TaskSpec,
    TrainingData,
    TrainResult,
    extract_patch_features,
    train_one_stage,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

HEAD_FILE = "heads_{task}.vsft"
LORA_FILE = "lora_final.vsft"


def seed_of(cfg: Mapping) -> int:
    return int(cfg["train"]["seed"])


def meta_for(cfg: Mapping, stage: str, **extra) -> dict:
    return {"config_digest": config_digest(cfg), "seed": seed_of(cfg), "stage": stage, **extra}


# ---------------------------------------------------------------------------
# data


@dataclass
class DataBundle:
    grammar: ToyGrammar
    vocab: Vocabulary
    parts: dict[str, list[SceneRecord]]
    probe: list[SceneRecord]

    @property
    def train(self) -> list[SceneRecord]:
        return self.parts["train"]


def generate_data(cfg: Mapping) -> DataBundle:
    """Training partition plus a probe set of unseen-color scenes at fresh indices."""
    d, seed = cfg["data"], seed_of(cfg)
    size = cfg["model"]["image_size"]
    grammar = ToyGrammar.default(d["num_categories"])
    vocab = grammar.vocabulary()
    records = generate_dataset(grammar, d["n_records"], size, d["max_instances"], seed, vocab)
    parts = split(records, d["fractions"], seed, grammar, vocab)
    probe = generate_dataset(
        grammar.shifted(), d["n_probe_records"], size, d["max_instances"], seed, vocab, start=d["n_records"]
    )
    return DataBundle(grammar, vocab, parts, probe)


def write_data(bundle: DataBundle, out_dir) -> dict[str, dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(out / "vocab.txt")
    docs = {}
    for name, records in [*bundle.parts.items(), ("probe", bundle.probe)]:
        docs[name] = export_coco(records, out / name, bundle.grammar, bundle.vocab)
    return docs


def read_data(cfg: Mapping, data_dir) -> DataBundle:
    """Load a ``write_data`` directory back into records."""
    root = Path(data_dir)
    if not (root / "vocab.txt").exists():
        raise FileNotFoundError(f"{root} has no vocab.txt; run gen-data first")
    vocab = Vocabulary.load(root / "vocab.txt")
    grammar = ToyGrammar.default(cfg["data"]["num_categories"])

    def part(name):
        sub = root / name
        if not (sub / "instances.json").exists():
            return []
        return load_coco_annotations(sub / "images", sub / "instances.json", sub / "captions.json", vocab).records

    parts = {name: part(name) for name in ("train", "val", "ood_probe")}
    return DataBundle(grammar, vocab, parts, part("probe"))


# ---------------------------------------------------------------------------
# models


def build_frozen_backbone(cfg: Mapping) -> ParameterStore:
    store = bb.build_backbone(vit_config(cfg), make_rng_stream(seed_of(cfg), "backbone"))
    return store.freeze()


def build_head(task: str, cfg: Mapping, vocab: Vocabulary, label: str = "head") -> ParameterStore:
    vit = vit_config(cfg)
    heads, ncat = cfg["heads"], cfg["data"]["num_categories"]
    rng = make_rng_stream(seed_of(cfg), f"{label}:{task}")
    if task == "detection":
        return build_detection_head(DetectionConfig(**heads["detection"], num_classes=ncat), vit.hidden_size, vit.n_patches, rng)
    if task == "segmentation":
        return build_segmentation_head(SegConfig(**heads["segmentation"], num_classes=ncat), vit.hidden_size, vit.n_patches, rng)
    if task == "captioning":
        return build_caption_head(CaptionConfig(**heads["captioning"], vocab_size=len(vocab)), vit.hidden_size, rng)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def fresh_lora(cfg: Mapping) -> LoraSet:
    return init_lora(vit_config(cfg), cfg["lora"]["rank"], make_rng_stream(seed_of(cfg), "lora"))


def training_data(cfg: Mapping, records) -> TrainingData:
    g = vit_config(cfg).grid
    return TrainingData(records, mask_size=(2 * g, 2 * g))


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageOneOutput:
    heads: dict[str, ParameterStore]
    results: dict[str, TrainResult] = field(default_factory=dict)


def run_stage1(cfg: Mapping, backbone: ParameterStore, data: TrainingData, vocab, tasks: Sequence[str] = TASKS, out_dir=None):
    """Fit each requested head on cached frozen features; heads come back frozen."""
    feats = extract_patch_features(backbone, data.images)
    out = StageOneOutput({})
    for task in tasks:
        head = build_head(task, cfg, vocab)
        res = train_stage1(TaskSpec(task, head, LOSSES[task]), backbone, data, run_config(cfg, "heads", task), features=feats)
        head.freeze()
        out.heads[task] = head
        out.results[task] = res
        log.info("stage 1 %s: %d iterations, last loss %.4f", task, len(res.losses), res.losses[-1] if res.losses else float("nan"))
        if out_dir is not None:
            save_head(head, task, out_dir, meta_for(cfg, "heads", task=task, iteration=len(res.losses)))
    return out


def stage2_tasks(cfg: Mapping, heads: Mapping[str, ParameterStore]) -> list[TaskSpec]:
    alphas = cfg["train"]["stage2"]["alphas"]
    return [TaskSpec(t, heads[t], LOSSES[t], alphas[t]) for t in TASKS if t in heads]


def run_stage2(cfg: Mapping, backbone, heads: Mapping[str, ParameterStore], data: TrainingData, out_dir=None) -> TrainResult:
    lora = fresh_lora(cfg)
    result = train_stage2(
        stage2_tasks(cfg, heads), backbone, lora, data, run_config(cfg, "lora"), out_dir, meta_for(cfg, "lora")
    )
    if out_dir is not None:
        save_lora(result.lora, Path(out_dir) / LORA_FILE, meta_for(cfg, "lora", iteration=len(result.losses)))
    return result


def one_stage_budget(cfg: Mapping) -> int:
    """Stage-1 iterations of every task plus the stage-2 iterations."""
    t = cfg["train"]
    return sum(t["stage1"][k]["total_iters"] for k in TASKS) + t["stage2"]["total_iters"]


def run_one_stage(cfg: Mapping, backbone, data: TrainingData, vocab, out_dir=None) -> TrainResult:
    heads = {t: build_head(t, cfg, vocab) for t in TASKS}
    rc = run_config(cfg, "lora")
    rc = replace(rc, stage="onestage", optimizer=replace(rc.optimizer, total_iters=one_stage_budget(cfg)))
    result = train_one_stage(stage2_tasks(cfg, heads), backbone, fresh_lora(cfg), data, rc, out_dir, meta_for(cfg, "onestage"))
    for h in heads.values():
        h.freeze()
    return result


# ---------------------------------------------------------------------------
# persistence


def save_head(head: ParameterStore, task: str, out_dir, meta: dict) -> Path:
    return save_checkpoint(Path(out_dir) / HEAD_FILE.format(task=task), Checkpoint({"heads": head}, meta))


def load_heads(head_dir, tasks: Sequence[str] = TASKS, expected_digest: str | None = None) -> dict[str, ParameterStore]:
    heads = {}
    for task in tasks:
        path = Path(head_dir) / HEAD_FILE.format(task=task)
        heads[task] = load_checkpoint(path, expected_digest).sections["heads"].freeze()
    return heads


def save_lora(lora: LoraSet, path, meta: dict) -> Path:
    return save_checkpoint(path, Checkpoint({"lora": lora.store}, meta))


def load_lora(path, expected_digest: str | None = None) -> LoraSet:
    ckpt = load_checkpoint(path, expected_digest)
    if "lora" not in ckpt.sections:
        raise ValueError(f"{path} holds no LoRA section")
    return LoraSet.from_store(ckpt.sections["lora"])


def lora_checkpoints(directory) -> list[Path]:
    return sorted(Path(directory).glob("lora_*.vsft"))


# ---------------------------------------------------------------------------
# strategy comparison


def probe_cfg(cfg: Mapping) -> ProbeConfig:
    return ProbeConfig.from_mapping(cfg["eval"]["probe"])


def compare_strategies(cfg: Mapping, bundle: DataBundle | None = None) -> dict:
    """Two-stage vs one-stage under equal iteration budgets, plus the frozen baseline.

    Returns a JSON-compatible report; it holds no timings, so equal seeds give
    equal reports.
    """
    bundle = bundle or generate_data(cfg)
    backbone = build_frozen_backbone(cfg)
    data = training_data(cfg, bundle.train)
    tasks, pc, seed = cfg["eval"]["probe_tasks"], probe_cfg(cfg), seed_of(cfg)
    base = extract_features(backbone, None, bundle.probe)

    s1 = run_stage1(cfg, backbone, data, bundle.vocab)
    s2 = run_stage2(cfg, backbone, s1.heads, data)
    one = run_one_stage(cfg, backbone, data, bundle.vocab)

    two_r = evaluate_probes(backbone, s2.lora, bundle.probe, tasks, pc, seed, base)
    one_r = evaluate_probes(backbone, one.lora, bundle.probe, tasks, pc, seed, base)
    stage1_iters = sum(len(r.losses) for r in s1.results.values())
    return {
        "config_digest": config_digest(cfg),
        "seed": seed,
        "n_probe_records": len(bundle.probe),
        "iterations": {
            "two_stage": {"stage1": stage1_iters, "stage2": len(s2.losses), "total": stage1_iters + len(s2.losses)},
            "one_stage": {"total": len(one.losses)},
        },
        "arms": {
            "baseline": {t: two_r[t].baseline_accuracy for t in tasks},
            "two_stage": {t: two_r[t].accuracy for t in tasks},
            "one_stage": {t: one_r[t].accuracy for t in tasks},
        },
        "reports": {
            "two_stage": {t: r.to_dict() for t, r in two_r.items()},
            "one_stage": {t: r.to_dict() for t, r in one_r.items()},
        },
    }


@torch.no_grad()
def replay_forward(cfg: Mapping, lora_path, images: torch.Tensor) -> torch.Tensor:
    """Rebuild the backbone from the config seed, attach a saved LoRA, and return CLS features."""
    backbone = build_frozen_backbone(cfg)
    return bb.forward(backbone, images, load_lora(lora_path, config_digest(cfg))).cls_feature
