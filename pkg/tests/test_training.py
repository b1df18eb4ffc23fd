import math

import numpy as np
import pytest
import torch

from visft import backbone as bb
from visft.captioning import build_caption_head, CaptionConfig
from visft.core import FrozenTensorMutated, OptimizerConfig, ParameterStore, RunConfig, make_rng_stream, snapshot
from visft.data import ToyGrammar, generate_dataset
from visft.lora import init_lora
from visft.training import (
    LOSSES,
    AdamW,
    FreezeGuard,
    TaskSpec,
    TrainingData,
    TrainResult,
    lr_at,
    sample_task,
    smoothed,
    train_one_stage,
    train_stage1,
    train_stage2,
)


def test_lr_at_reference_points():
    cfg = OptimizerConfig(peak_lr=1e-5, warmup_iters=2000, total_iters=10000)
    assert [lr_at(i, cfg) for i in (0, 1000, 2000, 10000)] == [0.0, 5e-6, 1e-5, 0.0]
    assert lr_at(6000, cfg) == pytest.approx(5e-6, rel=1e-12)


def test_lr_at_continuous_and_non_negative():
    cfg = OptimizerConfig(peak_lr=3e-4, warmup_iters=10, total_iters=50)
    vals = [lr_at(i, cfg) for i in range(51)]
    assert min(vals) >= 0
    assert abs(lr_at(10, cfg) - lr_at(9, cfg)) <= 3e-4 / 10 + 1e-15
    with pytest.raises(ValueError):
        lr_at(51, cfg)


def test_adamw_matches_hand_oracle():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal((3, 2))
    grads = rng.standard_normal((10, 3, 2))
    lrs = np.linspace(1e-2, 1e-3, 10)
    b1, b2, eps, wd = 0.9, 0.999, 1e-8, 0.05

    p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t in range(1, 11):
        g = grads[t - 1]
        p = p * (1 - lrs[t - 1] * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lrs[t - 1] * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

    w = torch.tensor(p0)
    opt = AdamW([("w", w)], weight_decay=wd)
    for t in range(10):
        w.grad = torch.tensor(grads[t])
        opt.step(float(lrs[t]))
    assert np.abs(w.numpy() - p).max() <= 1e-12


def test_adamw_skips_decay_on_vectors():
    b = torch.ones(3)
    opt = AdamW([("b", b)], weight_decay=0.5)
    b.grad = torch.zeros(3)
    opt.step(0.1)
    assert torch.equal(b, torch.ones(3))


def _tasks(alphas):
    return [TaskSpec(n, ParameterStore(), None, a) for n, a in alphas.items()]


def test_sampler_frequencies():
    tasks = _tasks({"captioning": 0.4, "detection": 0.3, "segmentation": 0.3})
    rng = make_rng_stream(0, "sampler")
    draws = [sample_task(rng, tasks).name for _ in range(20000)]
    for t in tasks:
        assert abs(draws.count(t.name) / len(draws) - t.alpha) < 0.015


def test_sampler_single_task_and_determinism():
    assert {sample_task(np.random.default_rng(0), _tasks({"x": 1.0})).name for _ in range(10)} == {"x"}
    tasks = _tasks({"a": 0.5, "b": 0.5})
    r1, r2 = make_rng_stream(3, "sampler"), make_rng_stream(3, "sampler")
    assert [sample_task(r1, tasks).name for _ in range(50)] == [sample_task(r2, tasks).name for _ in range(50)]


def test_sampler_rejects_bad_alphas():
    with pytest.raises(ValueError):
        sample_task(np.random.default_rng(0), _tasks({"a": 0.5, "b": 0.4}))
    with pytest.raises(ValueError):
        sample_task(np.random.default_rng(0), [])


def test_smoothed_windows():
    assert smoothed([1, 2, 3, 4, 5, 6], window=2) == (1.5, 5.5)
    assert smoothed([4.0], window=25) == (4.0, 4.0)


def test_joint_smoothed_weights_tasks():
    r = TrainResult(losses=[2, 10, 2, 10, 1, 6], tasks=["a", "b", "a", "b", "a", "b"])
    first, last = r.joint_smoothed({"a": 0.5, "b": 0.5}, window=1)
    assert (first, last) == (6.0, 3.5)


def test_freeze_guard():
    s = ParameterStore({"w": torch.zeros(2)}, trainable=False)
    guard = FreezeGuard(backbone=s)
    guard.check()
    s["w"] = torch.ones(2)
    with pytest.raises(FrozenTensorMutated, match="backbone.*7"):
        guard.check(7)


# ---------------------------------------------------------------------------
# loops on a tiny captioning setup


@pytest.fixture
def setup(tiny_backbone):
    grammar = ToyGrammar.default(4)
    vocab = grammar.vocabulary()
    recs = generate_dataset(grammar, 8, 16, 2, seed=0, vocab=vocab)
    data = TrainingData(recs, mask_size=(4, 4))
    cap_cfg = CaptionConfig(embed_dim=8, lstm_dim=8, feature_dim=8, vocab_size=len(vocab), max_len=12, attn_dim=8)
    head = build_caption_head(cap_cfg, 8, make_rng_stream(0, "head"))
    return tiny_backbone, data, head


def _run(stage, iters, every=0):
    return RunConfig(seed=0, stage=stage, optimizer=OptimizerConfig(1e-2, int(iters > 1), iters), batch_size=4, checkpoint_every=every)


def test_stage1_touches_only_head(setup):
    backbone, data, head = setup
    before_b, before_h = snapshot(backbone), snapshot(head)
    res = train_stage1(TaskSpec("captioning", head, LOSSES["captioning"]), backbone, data, _run("heads", 5))
    assert len(res.losses) == 5
    assert snapshot(backbone) == before_b
    assert snapshot(head) != before_h
    assert all(not head[n].requires_grad for n in head)


def test_stage1_zero_iterations(setup):
    backbone, data, head = setup
    d = snapshot(head)
    res = train_stage1(TaskSpec("captioning", head, LOSSES["captioning"]), backbone, data, _run("heads", 0))
    assert res.losses == [] and snapshot(head) == d


def test_stage1_rejects_trainable_backbone(setup):
    backbone, data, head = setup
    with pytest.raises(ValueError, match="frozen backbone"):
        train_stage1(TaskSpec("captioning", head, LOSSES["captioning"]), backbone.copy().unfreeze(), data, _run("heads", 1))


def test_stage2_cadence_and_freeze(setup, tiny_vit, tmp_path):
    backbone, data, head = setup
    head.freeze()
    lora = init_lora(tiny_vit, 2, make_rng_stream(0, "lora"))
    digests = snapshot(backbone), snapshot(head), snapshot(lora.store)
    res = train_stage2([TaskSpec("captioning", head, LOSSES["captioning"])], backbone, lora, data, _run("lora", 6, every=2), tmp_path, {"config_digest": "x"})
    assert [p.name for p in res.checkpoints] == ["lora_000002.vsft", "lora_000004.vsft", "lora_000006.vsft"]
    assert all(p.exists() for p in res.checkpoints)
    assert snapshot(backbone) == digests[0] and snapshot(head) == digests[1]
    assert snapshot(lora.store) != digests[2]


def test_stage2_requires_frozen_heads(setup, tiny_vit):
    backbone, data, head = setup
    lora = init_lora(tiny_vit, 2, make_rng_stream(0, "lora"))
    with pytest.raises(ValueError, match="frozen heads"):
        train_stage2([TaskSpec("captioning", head, LOSSES["captioning"])], backbone, lora, data, _run("lora", 1))


def test_one_stage_updates_heads_and_lora(setup, tiny_vit):
    backbone, data, head = setup
    lora = init_lora(tiny_vit, 2, make_rng_stream(0, "lora"))
    d = snapshot(backbone), snapshot(head), snapshot(lora.store)
    train_one_stage([TaskSpec("captioning", head, LOSSES["captioning"])], backbone, lora, data, _run("onestage", 3))
    assert snapshot(backbone) == d[0]
    assert snapshot(head) != d[1] and snapshot(lora.store) != d[2]


def test_loss_curves_bit_reproducible(setup, tiny_vit):
    backbone, data, head = setup

    def go():
        h = head.copy().freeze()
        lora = init_lora(tiny_vit, 2, make_rng_stream(0, "lora"))
        return train_stage2([TaskSpec("captioning", h, LOSSES["captioning"])], backbone, lora, data, _run("lora", 4)).losses

    assert go() == go()


def test_training_data_targets(setup):
    _, data, _ = setup
    assert data.images.shape == (8, 3, 16, 16)
    assert data.seg[0]["masks"].shape[-2:] == (4, 4)
    assert data.det[0]["labels"] == data.seg[0]["labels"]
    with pytest.raises(ValueError):
        TrainingData([])
