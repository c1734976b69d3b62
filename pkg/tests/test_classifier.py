import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from cxrsynth.classifier import (
    TrainingConfig,
    assemble_training_set,
    build_classifier,
    extract_gap_features,
    load_classifier,
    predict_proba,
    register_head,
    save_classifier,
    softmax_pair,
    train_classifier,
)
from cxrsynth.data_core import DatasetManifest, compute_skew
from cxrsynth.evaluation import confusion_counts
from cxrsynth.synthesis import SyntheticSet
from cxrsynth.toy import planted_region_images

from conftest import make_records

TINY = dict(custom_widths=(4, 8), image_size=16, batch_size=8)


def toy_xy(n_each, size=16, seed=0):
    neg = planted_region_images(n_each, False, size, seed)
    pos = planted_region_images(n_each, True, size, seed + 1)
    return np.concatenate([neg, pos]), np.array([0] * n_each + [1] * n_each)


def test_vgg16_shape_contract():
    model = build_classifier(TrainingConfig(backbone="vgg16"))
    x = np.random.default_rng(0).uniform(0, 1, (2, 256, 256, 3)).astype(np.float32)
    p = predict_proba(model, x)
    assert p.shape == (2, 2)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)
    assert model.feature_dim == 512


@pytest.mark.parametrize("backbone", ["vgg16", "resnet50", "densenet", "custom"])
def test_gap_adds_no_parameters(backbone):
    model = build_classifier(TrainingConfig(backbone=backbone))
    assert sum(p.numel() for p in model.gap.parameters()) == 0
    assert sum(p.numel() for p in model.adapter.parameters()) == 0
    total = sum(p.numel() for p in model.parameters())
    assert total == sum(p.numel() for p in model.backbone.parameters()) + model.feature_dim * 2 + 2
    assert all(p.requires_grad for p in model.parameters())


def test_unknown_backbone():
    with pytest.raises(ValueError):
        TrainingConfig(backbone="inception")
    with pytest.raises(ValueError):
        build_classifier(TrainingConfig(head="bagging"))


def test_registered_head_is_used():
    register_head("two_layer", lambda dim: nn.Sequential(nn.Linear(dim, 3), nn.Linear(3, 2)))
    model = build_classifier(TrainingConfig(head="two_layer", **TINY))
    assert predict_proba(model, np.zeros((1, 16, 16, 1), np.float32)).shape == (1, 2)


def test_predict_proba_contract():
    model = build_classifier(TrainingConfig(**TINY))
    x, _ = toy_xy(5)
    p = predict_proba(model, x)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)
    dup = predict_proba(model, np.stack([x[0], x[0]]))
    np.testing.assert_array_equal(dup[0], dup[1])
    np.testing.assert_allclose(predict_proba(model, x[::-1]), p[::-1], atol=1e-7)
    with pytest.raises(ValueError):
        predict_proba(model, x[0])


def test_zeroed_head_gives_half():
    model = build_classifier(TrainingConfig(**TINY))
    nn.init.zeros_(model.head.weight)
    nn.init.zeros_(model.head.bias)
    p = predict_proba(model, toy_xy(3)[0])
    np.testing.assert_allclose(p, 0.5, atol=1e-12)


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-50, 50))
def test_softmax_head_formula_and_shift(u, v, c):
    logits = torch.tensor([[u, v]], dtype=torch.float64)
    out = softmax_pair(logits)[0]
    m = max(u, v)
    eu, ev = math.exp(u - m), math.exp(v - m)
    assert float(out[0]) == pytest.approx(eu / (eu + ev), abs=1e-12)
    assert float(out.sum()) == pytest.approx(1.0, abs=1e-12)
    torch.testing.assert_close(softmax_pair(logits + c), softmax_pair(logits), atol=1e-12, rtol=0)


# --- assembly ---------------------------------------------------------------------


def synth(n, name):
    recs = make_records(0, n, prefix=f"{name}_", provenance="synthetic")
    return SyntheticSet(name, "t", "d", DatasetManifest(f"{name}_t", tuple(recs)))


def test_assemble_full_scale_skew():
    real = DatasetManifest("t", tuple(make_records(16537, 180)))
    out = assemble_training_set(real, synth(16537, "G1"), None, TrainingConfig(include_G1=True))
    assert compute_skew(out).skew == pytest.approx(0.98, abs=0.01)


def test_assemble_four_configs():
    real = DatasetManifest("t", tuple(make_records(300, 20)))
    g1, g2 = synth(300, "G1"), synth(150, "G2")
    configs = [
        TrainingConfig(),
        TrainingConfig(include_G1=True),
        TrainingConfig(include_G1=True, include_G2=True),
        TrainingConfig(include_real=False, include_G1=True),
    ]
    sets = [assemble_training_set(real, g1, g2, c) for c in configs]
    assert sets[0].records == real.records
    negatives = [s.filter(label="negative").records for s in sets]
    assert all(n == negatives[0] for n in negatives)
    skews = [compute_skew(s).skew for s in sets[:3]]
    assert skews[0] > skews[1] > skews[2]
    only = sets[3]
    assert only.filter(label="positive", provenance="real").records == ()
    assert only.filter(provenance="synthetic").records == g1.manifest.records
    assert only.count("negative") == 300


def test_assemble_missing_set():
    real = DatasetManifest("t", tuple(make_records(3, 3)))
    with pytest.raises(ValueError, match="G1"):
        assemble_training_set(real, None, None, TrainingConfig(include_G1=True))
    with pytest.raises(ValueError):
        TrainingConfig(include_real=False)


# --- training -----------------------------------------------------------------------


def test_single_class_rejected():
    x, _ = toy_xy(4)
    with pytest.raises(ValueError, match="both classes"):
        train_classifier(build_classifier(TrainingConfig(**TINY)), (x, np.zeros(8)), TrainingConfig(**TINY))


def test_patience_zero_and_early_stop_window():
    cfg = TrainingConfig(early_stop_patience=0, max_epochs=30, early_stop_min_delta=10.0, **TINY)
    x, y = toy_xy(8)
    t = train_classifier(build_classifier(cfg), (x, y), cfg)
    # with a huge min_delta nothing after epoch 1 counts as improvement
    assert t.stopped_epoch == 2 and t.best_epoch == 1
    cfg = TrainingConfig(early_stop_patience=2, max_epochs=40, learning_rate=1.0, **TINY)
    t = train_classifier(build_classifier(cfg), (x, y), cfg)
    assert all(math.isfinite(v) for v in t.curve)
    assert len(t.curve) == t.stopped_epoch
    assert t.stopped_epoch == 40 or t.stopped_epoch == t.best_epoch + cfg.early_stop_patience + 1


def test_training_deterministic(tmp_path):
    cfg = TrainingConfig(max_epochs=3, **TINY)
    x, y = toy_xy(8)
    a = train_classifier(build_classifier(cfg), (x, y), cfg)
    b = train_classifier(build_classifier(cfg), (x, y), cfg)
    assert a.stopped_epoch == b.stopped_epoch
    assert a.curve[-1] == pytest.approx(b.curve[-1], abs=1e-6)
    back = load_classifier(save_classifier(a, tmp_path / "clf.pt"))
    np.testing.assert_array_equal(predict_proba(back, x), predict_proba(a, x))
    assert back.curve == a.curve
    assert extract_gap_features(back, x).shape == (16, 8)


@pytest.mark.slow
def test_toy_separable_reaches_sensitivity():
    cfg = TrainingConfig(custom_widths=(16, 32, 64, 128), image_size=64, max_epochs=40, seed=0)
    x, y = toy_xy(200, size=64, seed=10)
    t = train_classifier(build_classifier(cfg), (x, y), cfg)
    assert t.curve[0] > t.curve[1] > t.curve[2]
    xt, yt = toy_xy(50, size=64, seed=99)
    tp, fp, tn, fn = confusion_counts(yt, predict_proba(t, xt)[:, 1])
    assert tp / (tp + fn) >= 0.9
