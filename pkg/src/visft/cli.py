"""Command-line entry point: ``visft <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, config, missing or
mismatched files), 2 runtime failure. Every command appends itself and the
digests of what it wrote to ``<out>/manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .core import ConfigError, canonical_json, config_digest, load_config, snapshot, validate_config
from .evaluation import cls_attention_map, evaluate_probes, extract_features, render_heatmap
from .lora import LoraSet
from .pipeline import (
    build_frozen_backbone,
    compare_strategies,
    generate_data,
    load_heads,
    load_lora,
    lora_checkpoints,
    probe_cfg,
    read_data,
    run_one_stage,
    run_stage1,
    run_stage2,
    meta_for,
    save_head,
    seed_of,
    training_data,
    write_data,
)
from .training import TASKS

log = logging.getLogger("visft")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config document")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, JSON value")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="visft", description="Two-stage head + LoRA fine-tuning on a toy vision backbone.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the toy dataset and its COCO-style export")
    _common(p)

    p = sub.add_parser("train-heads", help="stage 1: fit task heads on the frozen backbone")
    _common(p)
    p.add_argument("--task", choices=(*TASKS, "all"), default="all")
    p.add_argument("--data", type=Path, help="gen-data output (default: regenerate from config)")

    p = sub.add_parser("train-lora", help="stage 2: fit LoRA factors against frozen heads")
    _common(p)
    p.add_argument("--heads", type=Path, required=True, help="directory holding heads_<task>.vsft")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("train-onestage", help="baseline: heads and LoRA trained together")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("eval", help="probe the baseline and every LoRA checkpoint in a directory")
    _common(p)
    p.add_argument("--checkpoints", type=Path, required=True)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("visualize", help="CLS attention heatmaps, baseline vs LoRA")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--count", type=int, default=4, help="number of probe images")
    p.add_argument("--per-head", action="store_true", help="also dump one map per attention head")

    p = sub.add_parser("inspect-checkpoint", help="print tensor names, shapes and digests")
    p.add_argument("path", type=Path)
    p.add_argument("--out", type=Path, default=None, help="also write the listing as JSON here")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("compare", help="two-stage vs one-stage report with the frozen baseline")
    _common(p)
    p.add_argument("--data", type=Path)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> dict:
    doc = {}
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        try:
            doc = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from e
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(doc, overrides)
    validate_config(cfg)
    return cfg


def _bundle(cfg, args):
    return read_data(cfg, args.data) if getattr(args, "data", None) else generate_data(cfg)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _record(out: Path, argv: Sequence[str], cfg, before: set[Path]) -> None:
    """Append this command and digests of the files it wrote to the run manifest."""
    manifest = out / "manifest.json"
    doc = json.loads(manifest.read_text(encoding="utf-8")) if manifest.exists() else {"commands": []}
    written = sorted(p for p in out.rglob("*") if p.is_file() and p != manifest and p not in before)
    doc["commands"].append(
        {
            "argv": _portable(argv),
            "config_digest": config_digest(cfg) if cfg is not None else None,
            "config": cfg,
            "outputs": {str(p.relative_to(out)): _sha(p) for p in written},
        }
    )
    _write_json(manifest, doc)


def _portable(argv: Sequence[str]) -> list[str]:
    """argv without the --out value, so replays into any directory record the same entry."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


def _losses(result) -> dict:
    return {"losses": result.losses, "tasks": result.tasks}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    bundle = generate_data(cfg)
    write_data(bundle, args.out)
    counts = {k: len(v) for k, v in bundle.parts.items()}
    counts["probe"] = len(bundle.probe)
    _write_json(args.out / "dataset.json", {"counts": counts, "seed": seed_of(cfg), "config_digest": config_digest(cfg)})
    print(json.dumps(counts, sort_keys=True))


def cmd_train_heads(args, cfg):
    bundle = _bundle(cfg, args)
    tasks = TASKS if args.task == "all" else (args.task,)
    backbone = build_frozen_backbone(cfg)
    out = run_stage1(cfg, backbone, training_data(cfg, bundle.train), bundle.vocab, tasks, args.out)
    for task, res in out.results.items():
        _write_json(args.out / f"losses_heads_{task}.json", _losses(res))
        print(f"{task}: {len(res.losses)} iterations, final loss {res.losses[-1]:.4f}")


def cmd_train_lora(args, cfg):
    heads = load_heads(args.heads, TASKS, config_digest(cfg))
    bundle = _bundle(cfg, args)
    backbone = build_frozen_backbone(cfg)
    res = run_stage2(cfg, backbone, heads, training_data(cfg, bundle.train), args.out)
    _write_json(args.out / "losses_lora.json", _losses(res))
    first, last = res.joint_smoothed(cfg["train"]["stage2"]["alphas"])
    print(f"stage 2: {len(res.losses)} iterations, smoothed joint loss {first:.4f} -> {last:.4f}")


def cmd_train_onestage(args, cfg):
    bundle = _bundle(cfg, args)
    backbone = build_frozen_backbone(cfg)
    res = run_one_stage(cfg, backbone, training_data(cfg, bundle.train), bundle.vocab, args.out)
    for task, head in res.heads.items():
        save_head(head, task, args.out, meta_for(cfg, "onestage", task=task, iteration=len(res.losses)))
    _write_json(args.out / "losses_onestage.json", _losses(res))
    print(f"one-stage: {len(res.losses)} iterations")


def cmd_eval(args, cfg):
    paths = lora_checkpoints(args.checkpoints)
    if not paths:
        raise FileNotFoundError(f"no lora_*.vsft checkpoints in {args.checkpoints}")
    bundle = _bundle(cfg, args)
    backbone = build_frozen_backbone(cfg)
    tasks, pc, seed = cfg["eval"]["probe_tasks"], probe_cfg(cfg), seed_of(cfg)
    base = extract_features(backbone, None, bundle.probe)
    doc = {"config_digest": config_digest(cfg), "n_probe_records": len(bundle.probe), "checkpoints": []}
    for path in paths:
        ckpt = load_checkpoint(path, config_digest(cfg))
        lora = LoraSet.from_store(ckpt.sections["lora"])
        reports = evaluate_probes(backbone, lora, bundle.probe, tasks, pc, seed, base)
        doc["baseline"] = {t: r.baseline_accuracy for t, r in reports.items()}
        doc["checkpoints"].append(
            {
                "file": path.name,
                "iteration": ckpt.meta.get("iteration"),
                "stage": ckpt.meta.get("stage"),
                "reports": {t: r.to_dict() for t, r in reports.items()},
            }
        )
        accs = ", ".join(f"{t} {r.accuracy:.3f} (baseline {r.baseline_accuracy:.3f})" for t, r in reports.items())
        print(f"{path.name}: {accs}")
    _write_json(args.out / "eval.json", doc)


def cmd_visualize(args, cfg):
    lora = load_lora(args.checkpoint, config_digest(cfg))
    bundle = _bundle(cfg, args)
    backbone = build_frozen_backbone(cfg)
    records = bundle.probe[: args.count]
    summary = []
    for i, rec in enumerate(records):
        entry = {"index": i}
        for arm, ad in (("baseline", None), ("lora", lora)):
            heat = cls_attention_map(backbone, ad, rec.image)
            render_heatmap(heat, rec.image, args.out / f"heatmap_{i:03d}_{arm}.ppm")
            entry[arm] = heat.tolist()
            if args.per_head or cfg["eval"]["per_head_attention"]:
                for h, hm in enumerate(cls_attention_map(backbone, ad, rec.image, per_head=True)):
                    render_heatmap(hm, rec.image, args.out / f"heatmap_{i:03d}_{arm}_head{h}.ppm")
        entry["l1"] = float(np.abs(np.asarray(entry["baseline"]) - np.asarray(entry["lora"])).sum())
        summary.append(entry)
        print(f"image {i}: L1(baseline, lora) = {entry['l1']:.6f}")
    _write_json(args.out / "heatmaps.json", summary)


def inspect(path: Path) -> dict:
    ckpt = load_checkpoint(path)
    sections = {}
    for sec, store in sorted(ckpt.sections.items()):
        sections[sec] = {
            "digest": snapshot(store, "all"),
            "tensors": {n: {"shape": list(store[n].shape), "dtype": str(store[n].dtype).replace("torch.", "")} for n in store},
        }
    lora = ckpt.sections.get("lora")
    return {
        "file": str(path),
        "meta": ckpt.meta,
        "sections": sections,
        "lora_param_count": lora.numel() if lora is not None else 0,
    }


def cmd_inspect(args, cfg):
    doc = inspect(args.path)
    for sec, info in doc["sections"].items():
        print(f"[{sec}] digest {info['digest']}")
        for name, t in info["tensors"].items():
            print(f"  {name} {tuple(t['shape'])} {t['dtype']}")
    print(f"lora_param_count {doc['lora_param_count']:,}")
    if args.out is not None:
        _write_json(args.out, doc)


def cmd_compare(args, cfg):
    report = compare_strategies(cfg, _bundle(cfg, args) if args.data else None)
    _write_json(args.out / "comparison.json", report)
    print(canonical_json(report["arms"]))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-heads": cmd_train_heads,
    "train-lora": cmd_train_lora,
    "train-onestage": cmd_train_onestage,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "inspect-checkpoint": cmd_inspect,
    "compare": cmd_compare,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    cfg = None
    try:
        if args.command != "inspect-checkpoint":
            cfg = _config(args)
            args.out.mkdir(parents=True, exist_ok=True)
            before = {p for p in args.out.rglob("*") if p.is_file()}
        HANDLERS[args.command](args, cfg)
        if cfg is not None:
            _record(args.out, argv, cfg, before)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
