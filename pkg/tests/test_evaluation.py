import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from visft.core import make_rng_stream
from visft.data import ToyGrammar, generate_dataset
from visft.evaluation import (
    ProbeConfig,
    cls_attention_map,
    evaluate_probes,
    extract_features,
    fit_softmax_regression,
    linear_probe,
    overlay,
    render_heatmap,
)
from visft.lora import init_lora

PC = ProbeConfig(max_epochs=2000)


def blobs(rng, n, k=2, sep=6.0):
    y = rng.integers(0, k, n)
    centers = rng.standard_normal((k, 5)) * sep
    return centers[y] + rng.standard_normal((n, 5)), y


def test_separable_gives_perfect_accuracy(rng):
    X, y = blobs(rng, 200)
    r = linear_probe(X, y, PC, np.random.default_rng(0))
    assert r.accuracy == 1.0
    assert r.n_eval + r.n_train == 200


def test_shuffled_labels_near_chance(rng):
    X = rng.standard_normal((500, 8))
    y = rng.integers(0, 4, 500)
    r = linear_probe(X, y, PC, np.random.default_rng(1))
    assert abs(r.accuracy - 0.25) <= 0.1


def test_identical_arms_identical_accuracy(rng):
    X, y = blobs(rng, 120, k=3, sep=1.0)
    r = linear_probe(X, y, PC, np.random.default_rng(2), baseline_features=X.copy())
    assert r.accuracy == r.baseline_accuracy


def test_single_class_fold_rejected():
    X = np.arange(20, dtype=float)[:, None]
    with pytest.raises(ValueError, match="fewer than two classes"):
        linear_probe(X, np.zeros(20, dtype=int), PC, np.random.default_rng(0))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="labels"):
        linear_probe(np.zeros((5, 2)), np.zeros(4), PC, np.random.default_rng(0))


def test_probe_deterministic(rng):
    X, y = blobs(rng, 100, k=3, sep=1.5)
    a = linear_probe(X, y, PC, np.random.default_rng(5))
    b = linear_probe(X, y, PC, np.random.default_rng(5))
    assert a == b


def test_softmax_regression_matches_sklearn_optimum(rng):
    from sklearn.linear_model import LogisticRegression

    X, y = blobs(rng, 150, k=3, sep=1.0)
    X = (X - X.mean(0)) / X.std(0)
    l2 = 1e-2
    W, b, _, converged = fit_softmax_regression(X, y, 3, l2, 1e-9, 50000)
    assert converged
    ref = LogisticRegression(C=1 / (l2 * len(X)), tol=1e-12, max_iter=10000).fit(X, y)
    # multinomial solutions agree up to a shared shift of the class scores
    np.testing.assert_allclose(W - W.mean(1, keepdims=True), ref.coef_.T - ref.coef_.T.mean(1, keepdims=True), atol=1e-4)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_probe_accuracy_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((40, 3))
    y = np.repeat([0, 1], 20)
    rep = linear_probe(X, y, ProbeConfig(max_epochs=50), np.random.default_rng(seed))
    assert 0 <= rep.accuracy <= 1


@pytest.fixture(scope="module")
def probe_records():
    g = ToyGrammar.default(4)
    return generate_dataset(g.shifted(), 40, 16, 3, seed=0, vocab=g.vocabulary())


def test_extract_features(tiny_backbone, tiny_vit, probe_records):
    a = extract_features(tiny_backbone, None, probe_records, chunk=7)
    assert a.shape == (40, 8) and a.dtype == np.float64
    assert np.array_equal(a, extract_features(tiny_backbone, None, probe_records))
    fresh = init_lora(tiny_vit, 2, make_rng_stream(0, "lora"))
    assert np.abs(extract_features(tiny_backbone, fresh, probe_records) - a).max() <= 1e-6


def test_evaluate_probes_both_arms(tiny_backbone, probe_records):
    # 16px scenes rarely fit a second shape, so only the shape task has two classes in both folds
    out = evaluate_probes(tiny_backbone, None, probe_records, ["ood_shape"], ProbeConfig(max_epochs=100), seed=0)
    r = out["ood_shape"]
    assert r.accuracy == r.baseline_accuracy
    assert r.to_dict()["task"] == "ood_shape"
    again = evaluate_probes(tiny_backbone, None, probe_records, ["ood_shape"], ProbeConfig(max_epochs=100), seed=0)
    assert again["ood_shape"] == r


def test_heatmap_normalized(tiny_backbone, small_vit):
    image = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0))
    h = cls_attention_map(tiny_backbone, None, image)
    assert h.shape == (2, 2)
    assert (h >= 0).all() and abs(h.sum() - 1) <= 1e-5
    per = cls_attention_map(tiny_backbone, None, image, per_head=True)
    assert per.shape == (2, 2, 2)
    np.testing.assert_allclose(per.sum((1, 2)), 1.0, atol=1e-9)


def test_heatmap_uniform_when_qk_zeroed(tiny_backbone):
    store = tiny_backbone.copy()
    for leaf in ("wq", "bq", "wk", "bk"):
        n = f"blocks.0.attn.{leaf}"
        store[n] = torch.zeros_like(store[n])
    h = cls_attention_map(store, None, torch.rand(3, 16, 16))
    np.testing.assert_allclose(h, np.full((2, 2), 0.25), atol=1e-6)


def test_overlay_uniform_heatmap_uniform_tint():
    out = overlay(np.full((2, 2), 0.25), np.zeros((3, 8, 8)))
    assert out.shape == (8, 8, 3)
    assert (out[..., 0] == 128).all() and (out[..., 1:] == 0).all()
    with pytest.raises(ValueError):
        overlay(-np.ones((2, 2)), np.zeros((3, 8, 8)))


def test_render_golden_file(tmp_path):
    heat = np.array([[0.1, 0.2], [0.3, 0.4]])
    image = np.linspace(0, 1, 3 * 4 * 4).reshape(3, 4, 4)
    path = render_heatmap(heat, image, tmp_path / "sub" / "h.ppm")
    data = path.read_bytes()
    assert data.startswith(b"P6\n4 4\n255\n")
    with Image.open(path) as im:
        assert im.size == (4, 4)
    assert hashlib.sha256(data).hexdigest() == GOLDEN_PPM


# verified by hand: pixel (0, 0) red = round(255 * 0.5 * 0.25) = 32, pixel (0, 2) red = 69
GOLDEN_PPM = "413890c057f7981c190b7215b0fb2c2ccd40de9a572e2b3052477730f3db5a6e"
