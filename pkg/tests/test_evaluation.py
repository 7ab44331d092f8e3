import itertools

import numpy as np
import pytest
import torch
from torch import nn

from neurogir.evaluation import (
    MetricsRecord,
    SweepResult,
    export_projection,
    f1_score,
    max_projection,
    read_pgm,
    simple_threshold_baseline,
    sliding_window_predict,
    summarize,
    threshold_sweep,
    tile_starts,
)


def brute_counts(prob, label, t):
    tp = fp = fn = tn = 0
    for p, y in zip(prob.ravel().tolist(), label.ravel().tolist()):
        hit = p >= t
        if hit and y:
            tp += 1
        elif hit:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


class Constant(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        return torch.full_like(x, self.c)


class CentreTile(nn.Module):
    """Logit = voxel value minus the tile mean, so each tile sees different context."""

    def forward(self, x):
        return x - x.mean()


# -------------------------------------------------------------------- metrics


def test_f1_values():
    assert f1_score(0.3371, 0.5358) == pytest.approx(0.4138347577042044, abs=1e-12)
    assert f1_score(0, 0) == 0.0
    r = MetricsRecord.from_counts(0.5, tp=1, fp=1, fn=3)
    assert (r.precision, r.recall) == (0.5, 0.25)
    assert r.f1 == pytest.approx(1 / 3, abs=1e-12)
    assert MetricsRecord.from_counts(0.5, 0, 0, 0).f1 == 0.0


def test_perfect_prediction_scores_one_everywhere():
    lab = (np.random.default_rng(0).random((6, 6, 6)) > 0.8).astype(np.uint8)
    sweep = threshold_sweep(lab.astype(np.float32), lab)
    assert all(r.f1 == 1.0 and r.precision == 1.0 and r.recall == 1.0 for r in sweep.records)
    assert len(sweep.records) == 19 and sweep.records[0].threshold == 0.05 and sweep.records[-1].threshold == 0.95


@pytest.mark.parametrize("seed", range(20))
def test_sweep_counts_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    prob = rng.random((8, 8, 8)).astype(np.float32)
    label = (rng.random((8, 8, 8)) > 0.6).astype(np.uint8)
    sweep = threshold_sweep(prob, label)
    for r in sweep.records:
        assert (r.tp, r.fp, r.fn, r.tn) == brute_counts(prob, label, r.threshold)
        assert r.f1 == pytest.approx(f1_score(r.precision, r.recall), abs=1e-9)
    assert sweep.best.f1 == max(r.f1 for r in sweep.records)


@pytest.mark.parametrize("seed", range(20))
def test_sweep_mirrored_counts(seed):
    rng = np.random.default_rng(seed)
    # values on a half-step grid never coincide with a threshold
    prob = (rng.integers(0, 1000, (8, 8, 8)) + 0.5) / 1000
    label = (rng.random((8, 8, 8)) > 0.5).astype(np.uint8)
    for t in (0.05, 0.3, 0.5, 0.85):
        a = threshold_sweep(prob, label, [t]).records[0]
        b = threshold_sweep(1 - prob, 1 - label, [round(1 - t, 10)]).records[0]
        assert (b.tp, b.fp, b.fn, b.tn) == (a.tn, a.fn, a.fp, a.tp)


def test_best_prefers_lower_threshold_on_ties():
    recs = [MetricsRecord.from_counts(t, 1, 1, 1) for t in (0.3, 0.1, 0.2)]
    assert SweepResult(recs).best.threshold == 0.1


def test_sweep_errors():
    with pytest.raises(ValueError, match="shapes"):
        threshold_sweep(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        threshold_sweep(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), [1.0])


def test_simple_baseline():
    lab = (np.random.default_rng(1).random((6, 6, 6)) > 0.8).astype(np.uint8)
    assert simple_threshold_baseline(lab.astype(np.float32), lab).best.f1 == 1.0
    inverted = simple_threshold_baseline(1.0 - lab.astype(np.float32), lab).best
    assert inverted.f1 == 0.0  # every threshold selects exactly the background
    with pytest.raises(ValueError):
        simple_threshold_baseline(np.full((2, 2, 2), 2.0), np.zeros((2, 2, 2)))


def test_summarize():
    assert summarize([1.0, 3.0]) == (2.0, 1.0)


# ----------------------------------------------------------------- stitching


def test_tile_starts_cover():
    for extent, patch, ov in [(48, 48, 0.5), (50, 16, 0.5), (7, 4, 0.0), (100, 32, 0.9)]:
        starts = tile_starts(extent, patch, ov)
        assert starts[0] == 0 and starts[-1] + patch >= extent


def test_one_patch_equals_direct_forward():
    torch.manual_seed(0)
    model = nn.Conv3d(1, 1, 3, padding=1).eval()
    x = np.random.default_rng(0).random((8, 8, 8)).astype(np.float32)
    out = sliding_window_predict(model, x, patch=(8, 8, 8), overlap=0.5)
    with torch.no_grad():
        direct = torch.sigmoid(model(torch.from_numpy(x)[None, None]))[0, 0].numpy()
    np.testing.assert_array_equal(out, direct)


@pytest.mark.parametrize("overlap", [0.0, 0.25, 0.5, 0.75])
def test_constant_model_is_constant(overlap):
    out = sliding_window_predict(Constant(0.7), np.zeros((10, 9, 5)), patch=(4, 4, 4), overlap=overlap)
    assert out.shape == (10, 9, 5)
    np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.7)), rtol=0, atol=1e-7)


def test_two_tile_overlap_is_the_mean():
    x = np.random.default_rng(3).random((8, 2, 2)).astype(np.float32)
    out = sliding_window_predict(CentreTile(), x, patch=(6, 2, 2), overlap=0.5)
    # tiles start at 0 and 3; the second one reaches into one padded zero plane
    xp = np.concatenate([x, np.zeros((1, 2, 2), np.float32)])
    t0, t1 = xp[0:6], xp[3:9]
    p0 = 1 / (1 + np.exp(-(t0 - t0.mean())))
    p1 = 1 / (1 + np.exp(-(t1 - t1.mean())))
    np.testing.assert_allclose(out[0:3], p0[0:3], atol=1e-6)
    np.testing.assert_allclose(out[3:6], (p0[3:6] + p1[0:3]) / 2, atol=1e-6)
    np.testing.assert_allclose(out[6:8], p1[3:5], atol=1e-6)


def test_overlap_range_checked():
    with pytest.raises(ValueError):
        sliding_window_predict(Constant(0.0), np.zeros((4, 4, 4)), (4, 4, 4), overlap=0.95)


def test_restores_training_flag():
    m = Constant(0.0).train()
    sliding_window_predict(m, np.zeros((4, 4, 4)), (4, 4, 4))
    assert m.training


# ---------------------------------------------------------------- projection


def test_projection_values(tmp_path):
    v = np.zeros((4, 5, 6), dtype=np.float32)
    v[2, 3, 1] = 1.0
    img = max_projection(v, "depth")
    assert img.shape == (5, 6) and img[3, 1] == 1.0 and img.sum() == 1.0
    assert np.array_equal(max_projection(np.full((3, 3, 3), 0.4), "width"), np.full((3, 3), 0.4))
    assert np.array_equal(max_projection(v[::-1], "depth"), img)
    path = export_projection(v, "depth", tmp_path / "p.pgm")
    back = read_pgm(path)
    assert back.shape == (5, 6) and back[3, 1] == 255 and back.sum() == 255
    with pytest.raises(ValueError):
        max_projection(v, "time")


@pytest.mark.parametrize("axis,shape", [("depth", (3, 4)), ("height", (2, 4)), ("width", (2, 3))])
def test_projection_axes(axis, shape):
    v = np.random.default_rng(0).random((2, 3, 4))
    ref = {"depth": v.max(0), "height": v.max(1), "width": v.max(2)}[axis]
    assert max_projection(v, axis).shape == shape
    assert np.array_equal(max_projection(v, axis), ref)
