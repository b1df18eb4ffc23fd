import numpy as np
import pytest
import torch

from visft import backbone as bb
from visft import functional as fn
from visft.core import EVA_VIT_G, ViTConfig, make_rng_stream, snapshot


def test_eva_g_names_enumerate_40_blocks():
    names = bb.backbone_shapes(EVA_VIT_G)
    blocks = {n.split(".")[1] for n in names if n.startswith("blocks.")}
    assert blocks == {str(i) for i in range(40)}
    assert names["blocks.39.attn.wq"] == (1408, 1408)
    assert names["blocks.0.mlp.0.weight"] == (6144, 1408)


def test_token_count(tiny_vit, tiny_backbone):
    assert tiny_vit.n_tokens == 5
    out = bb.forward(tiny_backbone, torch.rand(3, 16, 16), capture_attention=True)
    assert out.patch_features.shape == (4, 8)
    assert out.attention_last.shape == (2, 5, 5)


def test_param_count_closed_form(tiny_vit):
    d, p, m, L, T = 8, 8, 16, 1, 5
    patch = d * 3 * p * p + d
    per_block = 2 * 2 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d)
    expected = patch + d + T * d + L * per_block + 2 * d
    assert expected == 2208
    assert bb.param_count(tiny_vit) == expected
    store = bb.build_backbone(tiny_vit, make_rng_stream(0, "b"))
    assert store.numel() == expected


def test_init_statistics(tiny_vit):
    s = bb.build_backbone(ViTConfig(2, 32, 8, 64, 2, 32), make_rng_stream(0, "b"))
    assert torch.count_nonzero(s["blocks.0.attn.bq"]) == 0
    assert torch.count_nonzero(s["patch_embed.bias"]) == 0
    assert torch.equal(s["norm.gain"], torch.ones(32))
    w = s["blocks.1.mlp.0.weight"]
    assert w.abs().max() <= 0.04 + 1e-7
    assert 0.014 < float(w.std()) < 0.020


def test_attention_rows_sum_to_one(tiny_backbone):
    att = bb.forward(tiny_backbone, torch.rand(4, 3, 16, 16), capture_attention=True).attention_last
    torch.testing.assert_close(att.sum(-1), torch.ones(4, 2, 5), atol=1e-5, rtol=0)


def test_attention_only_when_requested(tiny_backbone):
    assert bb.forward(tiny_backbone, torch.rand(3, 16, 16)).attention_last is None


def test_deterministic(tiny_backbone):
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    a = bb.forward(tiny_backbone, x)
    b = bb.forward(tiny_backbone, x)
    assert torch.equal(a.cls_feature, b.cls_feature)


def test_batch_matches_single(tiny_backbone):
    x = torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    batch = bb.forward(tiny_backbone, x).cls_feature
    for i in range(3):
        torch.testing.assert_close(bb.forward(tiny_backbone, x[i]).cls_feature, batch[i], atol=1e-6, rtol=0)


def test_shape_error_names_tensor(tiny_backbone):
    with pytest.raises(ValueError, match="patch_embed"):
        bb.forward(tiny_backbone, torch.rand(3, 32, 32))


def test_permutation_equivariance(small_vit):
    store = bb.build_backbone(small_vit, make_rng_stream(0, "b"))
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(2))
    tokens = bb.embed(store, x)
    ref, _ = bb.encode(store, tokens)
    perm = torch.randperm(small_vit.n_patches, generator=torch.Generator().manual_seed(3)) + 1
    order = torch.cat([torch.zeros(1, dtype=torch.long), perm])
    out, _ = bb.encode(store, tokens[:, order])
    inverse = torch.argsort(order)
    torch.testing.assert_close(out[:, inverse], ref, atol=1e-5, rtol=0)


def test_pinned_cls_feature(tiny_backbone):
    x = torch.linspace(0, 1, 3 * 16 * 16).reshape(3, 16, 16)
    cls = bb.forward(tiny_backbone, x).cls_feature
    pinned = torch.tensor(PINNED_CLS)
    torch.testing.assert_close(cls, pinned, atol=1e-5, rtol=0)


def test_forward_does_not_touch_store(tiny_backbone):
    d = snapshot(tiny_backbone)
    bb.forward(tiny_backbone, torch.rand(2, 3, 16, 16), capture_attention=True)
    assert snapshot(tiny_backbone) == d


def test_patchify_layout():
    x = torch.arange(3 * 4 * 4, dtype=torch.float32).reshape(1, 3, 4, 4)
    p = bb.patchify(x, 2)
    assert p.shape == (1, 4, 12)
    # second patch of the first row covers columns 2..3 of rows 0..1, channel-major
    np.testing.assert_array_equal(p[0, 1, :4].numpy(), [2, 3, 6, 7])


def test_group_norm_zero_input():
    store = fn.init_from_shapes(fn.norm_shapes("gn", 8), np.random.default_rng(0))
    out = fn.group_norm(store, "gn", torch.zeros(1, 8, 2, 2))
    assert torch.equal(out, torch.zeros(1, 8, 2, 2))


PINNED_CLS = [-1.055858, -0.720592, -0.053308, -1.63114, 0.465937, 1.541191, 0.671207, 0.782564]
