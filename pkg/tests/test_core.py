import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from visft.core import (
    DEFAULT_CONFIG,
    EMPTY_DIGEST,
    ConfigError,
    OptimizerConfig,
    ParameterStore,
    ViTConfig,
    canonical_json,
    config_digest,
    load_config,
    make_rng_stream,
    run_config,
    snapshot,
    trunc_normal,
)


def make_store():
    s = ParameterStore()
    s.add("b.weight", torch.arange(6, dtype=torch.float32).reshape(2, 3))
    s.add("a.bias", torch.zeros(3), trainable=False)
    s.add("c.gain", torch.ones(2))
    return s


class TestParameterStore:
    def test_sorted_iteration(self):
        assert list(make_store()) == ["a.bias", "b.weight", "c.gain"]

    def test_duplicate_name_rejected(self):
        s = make_store()
        with pytest.raises(KeyError, match="duplicate"):
            s.add("a.bias", torch.zeros(3))

    def test_setitem_checks_shape(self):
        s = make_store()
        with pytest.raises(ValueError, match="b.weight"):
            s["b.weight"] = torch.zeros(3, 2)

    def test_filters(self):
        s = make_store()
        assert s.names("frozen") == ["a.bias"]
        assert s.names("trainable") == ["b.weight", "c.gain"]
        with pytest.raises(ValueError):
            s.names("some")

    def test_freeze_by_prefix(self):
        s = make_store().set_trainable(False, prefix="b.")
        assert s.names("trainable") == ["c.gain"]
        assert s.freeze().names("trainable") == []

    def test_copy_is_deep(self):
        s = make_store()
        c = s.copy()
        c["b.weight"].add_(1)
        assert torch.equal(s["b.weight"], torch.arange(6, dtype=torch.float32).reshape(2, 3))
        assert c.names("frozen") == s.names("frozen")

    def test_numel(self):
        s = make_store()
        assert s.numel() == 11
        assert s.numel("trainable") == 8


class TestSnapshot:
    def test_trainable_mutation_leaves_frozen_digest(self):
        s = make_store()
        before = snapshot(s, "frozen")
        s["b.weight"] = s["b.weight"] + 1
        assert snapshot(s, "frozen") == before
        assert snapshot(s, "all") != snapshot(make_store(), "all")

    def test_empty_selection(self):
        s = make_store().unfreeze()
        assert snapshot(s, "frozen") == EMPTY_DIGEST

    def test_insertion_order_irrelevant(self):
        a, b = ParameterStore(), ParameterStore()
        a.add("x", torch.ones(2))
        a.add("y", torch.zeros(2))
        b.add("y", torch.zeros(2))
        b.add("x", torch.ones(2))
        assert snapshot(a) == snapshot(b)

    def test_single_bit_changes_digest(self):
        s = make_store()
        d0 = snapshot(s)
        t = s["c.gain"].clone()
        t.view(torch.int32)[0] ^= 1
        s["c.gain"] = t
        assert snapshot(s) != d0

    @given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=8))
    def test_digest_is_a_function_of_contents(self, values):
        a = ParameterStore({"t": torch.tensor(values, dtype=torch.float32)})
        b = ParameterStore({"t": torch.tensor(values, dtype=torch.float32)})
        assert snapshot(a) == snapshot(b)


class TestRng:
    def test_streams_are_reproducible_and_distinct(self):
        a = make_rng_stream(3, "lora").standard_normal(4)
        b = make_rng_stream(3, "lora").standard_normal(4)
        c = make_rng_stream(3, "sampler").standard_normal(4)
        d = make_rng_stream(4, "lora").standard_normal(4)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c) and not np.allclose(a, d)

    def test_trunc_normal_bounds(self):
        t = trunc_normal(np.random.default_rng(0), (2000,), std=0.02)
        assert t.dtype == torch.float32
        assert t.abs().max() <= 0.04 + 1e-7
        assert abs(float(t.std()) - 0.02 * 0.88) < 2e-3  # std of N(0,1) cut at 2 sigma is ~0.88


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = load_config()
        assert cfg == load_config(json.loads(canonical_json(cfg)))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="modle"):
            load_config({"modle": {}})
        with pytest.raises(ConfigError, match="train.stage2.bogus"):
            load_config(overrides=["train.stage2.bogus=1"])

    def test_overrides_parse_json_and_last_wins(self):
        cfg = load_config(overrides=["lora.rank=2", "lora.rank=3", 'eval.probe_tasks=["count"]'])
        assert cfg["lora"]["rank"] == 3
        assert cfg["eval"]["probe_tasks"] == ["count"]

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["lora.rank"])

    def test_alphas_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="alphas"):
            load_config(overrides=['train.stage2.alphas={"captioning": 0.5, "detection": 0.3, "segmentation": 0.3}'])

    def test_vit_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            ViTConfig(layers=1, hidden_size=8, patch_size=5, mlp_size=8, num_heads=2, image_size=16)

    def test_digest_tracks_content(self):
        a = load_config()
        b = load_config(overrides=["train.seed=1"])
        assert config_digest(a) == config_digest(load_config())
        assert config_digest(a) != config_digest(b)

    def test_defaults_not_mutated(self):
        before = canonical_json(DEFAULT_CONFIG)
        cfg = load_config(overrides=["lora.rank=2"])
        cfg["model"]["layers"] = 99
        assert canonical_json(DEFAULT_CONFIG) == before

    def test_clip_only_for_query_heads(self):
        cfg = load_config()
        assert run_config(cfg, "heads", "detection").clip_norm == 1.0
        assert run_config(cfg, "heads", "captioning").clip_norm is None

    def test_optimizer_config_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(peak_lr=0.0, warmup_iters=1, total_iters=2)
        with pytest.raises(ConfigError):
            OptimizerConfig(peak_lr=1.0, warmup_iters=5, total_iters=5)
