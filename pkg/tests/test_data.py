import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsam.data import (AugmentConfig, ConfusionMatrix, PngDataset, Sample, augment, export_dataset,
                       generate_shapes, majority_baseline, miou, sample_rng)

from oracles import iou_enumeration


def test_generation_deterministic():
    a = generate_shapes(5, (48, 40), 3, seed=11)
    b = generate_shapes(5, (48, 40), 3, seed=11)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image)
        assert np.array_equal(s.label, t.label)
    c = generate_shapes(5, (48, 40), 3, seed=12)
    assert not np.array_equal(a[0].image, c[0].image)


def test_generation_contract():
    samples = generate_shapes(200, (128, 128), 2, seed=0)
    assert len(samples) == 200
    both = 0
    for s in samples:
        assert s.image.shape == (1, 3, 128, 128) and s.image.dtype == np.float32
        assert s.label.shape == (128, 128)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        both += len(np.unique(s.label)) == 2
    assert both / 200 >= 0.95


def test_generation_spans_scales():
    samples = generate_shapes(50, (128, 128), 2, seed=3)
    fg = [(s.label > 0).mean() for s in samples]
    assert min(fg) < 0.02 and max(fg) > 0.15


def test_generation_errors():
    with pytest.raises(ValueError):
        generate_shapes(0, (32, 32), 2, 0)
    with pytest.raises(ValueError):
        generate_shapes(3, (32, 32), 1, 0)


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros((1, 3, 4, 4), np.float32), np.zeros((4, 5), np.int64))


def _toy_sample(h=6, w=8):
    img = np.arange(3 * h * w, dtype=np.float32).reshape(1, 3, h, w) / (3 * h * w)
    label = np.arange(h * w, dtype=np.int64).reshape(h, w) % 4
    return Sample(img, label)


def test_full_crop_no_flip_is_identity():
    s = _toy_sample()
    out = augment(s, AugmentConfig(crop=(6, 8), hflip=False, rot90=False), sample_rng(0, 0, 0))
    assert np.array_equal(out.image, s.image)
    assert np.array_equal(out.label, s.label)


def test_hflip_index_map():
    s = _toy_sample()
    cfg = AugmentConfig(crop=(6, 8), hflip=True, rot90=False)
    seen = False
    for i in range(20):
        out = augment(s, cfg, sample_rng(0, i, 0))
        if not np.array_equal(out.label, s.label):
            w = s.label.shape[1]
            for col in range(w):
                assert np.array_equal(out.label[:, col], s.label[:, w - 1 - col])
                assert np.array_equal(out.image[0, :, :, col], s.image[0, :, :, w - 1 - col])
            seen = True
    assert seen


def test_crop_alignment():
    samples = generate_shapes(2, (128, 128), 3, seed=0)
    cfg = AugmentConfig(crop=(64, 64), hflip=False, rot90=False)
    for s in samples:
        out = augment(s, cfg, sample_rng(0, 0, 0))
        assert out.image.shape == (1, 3, 64, 64) and out.label.shape == (64, 64)
        # locate the window and confirm image and label came from the same offset
        hits = [(t, l) for t in range(65) for l in range(65)
                if np.array_equal(s.image[0, :, t:t + 64, l:l + 64], out.image[0])]
        assert hits
        t, l = hits[0]
        assert np.array_equal(s.label[t:t + 64, l:l + 64], out.label)


def test_crop_too_large():
    with pytest.raises(ValueError):
        augment(_toy_sample(), AugmentConfig(crop=(7, 8)), sample_rng(0, 0, 0))


def test_pad_mode_allows_full_size_crop():
    s = _toy_sample(16, 16)
    cfg = AugmentConfig(crop=(16, 16), pad_before_crop=True, hflip=False, rot90=False)
    assert cfg.pad_amount() == 2
    outs = [augment(s, cfg, sample_rng(0, i, 0)) for i in range(10)]
    assert all(o.label.shape == (16, 16) for o in outs)
    assert any(not np.array_equal(o.image, s.image) for o in outs)
    # edge-replicated labels never introduce ids outside the source
    assert all(set(np.unique(o.label)) <= set(np.unique(s.label)) for o in outs)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), pad=st.booleans(), h=st.integers(8, 14), w=st.integers(8, 14))
def test_augment_preserves_pixel_correspondence(seed, pad, h, w):
    rng = np.random.default_rng(seed)
    label = rng.integers(0, 3, (h, w))
    # image channel 0 encodes the class mask exactly
    img = np.stack([label == 1, rng.random((h, w)) > 0.5, label == 2]).astype(np.float32)[None]
    cfg = AugmentConfig(crop=(8, 8), pad_before_crop=pad, seed=seed)
    out = augment(Sample(img, label), cfg, sample_rng(seed, 0, 0))
    mask_only = Sample(np.repeat((label == 1).astype(np.float32)[None, None], 3, 1), label)
    out_mask = augment(mask_only, cfg, sample_rng(seed, 0, 0))
    assert np.array_equal(out.image[0, 0], out_mask.image[0, 0])
    if not pad:
        assert np.array_equal(out.image[0, 0] == 1, out.label == 1)
        assert np.array_equal(out.image[0, 2] == 1, out.label == 2)


def test_augment_deterministic_per_index_epoch():
    s = generate_shapes(1, (64, 64), 2, 0)[0]
    cfg = AugmentConfig(crop=(32, 32))
    a = augment(s, cfg, sample_rng(1, 5, 2))
    b = augment(s, cfg, sample_rng(1, 5, 2))
    assert np.array_equal(a.image, b.image)


# --- metric ----------------------------------------------------------------

def test_miou_identity_and_total_miss():
    gt = np.array([[0, 1], [1, 0]])
    per, mean = miou(gt, gt, 2)
    assert per == [1.0, 1.0] and mean == 1.0
    assert miou(1 - gt, gt, 2)[1] == 0.0


def test_miou_worked_example():
    per, mean = miou([[0, 0], [1, 1]], [[0, 1], [1, 1]], 2)
    assert per[0] == pytest.approx(1 / 2, abs=1e-15)
    assert per[1] == pytest.approx(2 / 3, abs=1e-15)
    assert mean == pytest.approx(7 / 12, abs=1e-15)


def test_absent_class_excluded():
    per, mean = miou([[0, 0]], [[0, 0]], 3)
    assert per[0] == 1.0 and math.isnan(per[1]) and math.isnan(per[2])
    assert mean == 1.0


def test_miou_errors():
    with pytest.raises(ValueError):
        miou(np.zeros(0, int), np.zeros(0, int), 2)
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ValueError):
        miou(np.full((2, 2), 2), np.zeros((2, 2), int), 2)


def test_miou_matches_enumeration_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 5))
        shape = tuple(rng.integers(1, 7, 2))
        pred, gt = rng.integers(0, k, shape), rng.integers(0, k, shape)
        per, mean = miou(pred, gt, k)
        ref_per, ref_mean = iou_enumeration(pred, gt, k)
        np.testing.assert_allclose(per, ref_per, atol=1e-12)
        assert abs(mean - ref_mean) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), parts=st.integers(1, 5))
def test_accumulate_equals_concatenate_and_order_free(seed, parts):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 3, int(rng.integers(1, 20))) for _ in range(parts)]
    gts = [rng.integers(0, 3, p.size) for p in preds]
    cm = ConfusionMatrix(3)
    for p, g in zip(preds, gts):
        cm.update(p, g)
    pred, gt = np.concatenate(preds), np.concatenate(gts)
    assert cm.total == pred.size
    assert cm.iou()[1] == miou(pred, gt, 3)[1]
    perm = rng.permutation(pred.size)
    assert miou(pred[perm], gt[perm], 3)[1] == pytest.approx(cm.iou()[1], abs=1e-15)


def test_majority_baseline():
    s = Sample(np.zeros((1, 3, 2, 2), np.float32), np.array([[0, 0], [0, 1]]))
    # always predicting 0: IoU_0 = 3/4, IoU_1 = 0
    assert majority_baseline([s], 2) == pytest.approx(3 / 8)


def test_export_import_round_trip(tmp_path):
    samples = generate_shapes(3, (32, 24), 3, seed=5)
    export_dataset(samples, tmp_path / "d", 3, 5)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["n"] == 3 and manifest["num_classes"] == 3 and manifest["sizes"] == [[32, 24]]
    ds = PngDataset(tmp_path / "d")
    assert len(ds) == 3
    for s, t in zip(samples, ds.samples()):
        assert np.array_equal(s.label, t.label)
        # 8-bit quantization of the image
        assert np.abs(s.image - t.image).max() <= 0.5 / 255 + 1e-6


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        PngDataset(tmp_path)
