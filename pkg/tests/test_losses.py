import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from neurogir import tensor_core as tc
from neurogir.losses import (
    LossConfig,
    Progress,
    alpha,
    bce_loss,
    compound_loss,
    progress_ratio,
    skeleton_loss,
    skeleton_loss_from_skeletons,
    soft_skeleton,
)


def _line(n=7):
    v = torch.zeros(n, n, n, dtype=torch.float64)
    v[n // 2, n // 2, 1 : n - 1] = 1
    return v


# ------------------------------------------------------------- soft skeleton


def test_one_voxel_line_is_its_own_skeleton():
    line = _line()
    assert torch.equal(soft_skeleton(line, 5), line)
    assert torch.equal(soft_skeleton(soft_skeleton(line, 5), 5), line)


def test_empty_volume():
    z = torch.zeros(6, 6, 6)
    assert torch.equal(soft_skeleton(z, 3), z)


def test_solid_cube_is_thinned():
    v = torch.zeros(9, 9, 9, dtype=torch.float64)
    v[2:7, 2:7, 2:7] = 1
    skel = soft_skeleton(v, 2)
    assert 0 < skel.sum() < 125


def test_rejects_values_outside_unit_range():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        soft_skeleton(torch.full((4, 4, 4), 1.1), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 6))
def test_skeleton_stays_in_unit_range(seed, iters):
    x = torch.from_numpy(np.random.default_rng(seed).random((1, 1, 5, 6, 4)))
    s = soft_skeleton(x, iters)
    assert s.min() >= 0 and s.max() <= 1 + 1e-12


# ------------------------------------------------------------- skeleton loss


def test_identical_skeletons_give_zero():
    s = (torch.rand(5, 5, 5) > 0.7).double()
    assert abs(float(skeleton_loss_from_skeletons(s, s))) <= 1e-9


def test_empty_prediction_against_nine_voxel_skeleton():
    label = torch.zeros(5, 5, 5, dtype=torch.float64)
    label.view(-1)[:9] = 1
    value = float(skeleton_loss_from_skeletons(torch.zeros_like(label), label, 1.0))
    assert value == pytest.approx(0.8181818181818181, abs=1e-12)


def test_both_empty_is_zero():
    z = torch.zeros(4, 4, 4)
    assert float(skeleton_loss_from_skeletons(z, z)) == 0.0


def test_perfect_prediction_of_a_line():
    line = _line()
    assert float(skeleton_loss(line, line)) == pytest.approx(0.0, abs=1e-12)


def test_skeleton_loss_batch_mean():
    rng = np.random.default_rng(0)
    pred = torch.from_numpy(rng.random((3, 1, 5, 5, 5)))
    lab = torch.from_numpy((rng.random((3, 1, 5, 5, 5)) > 0.6).astype(np.float64))
    each = [float(skeleton_loss(pred[i, 0], lab[i, 0])) for i in range(3)]
    assert float(skeleton_loss(pred, lab)) == pytest.approx(np.mean(each), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_skeleton_loss_range(seed):
    rng = np.random.default_rng(seed)
    pred = torch.from_numpy(rng.random((1, 1, 5, 5, 5)))
    lab = torch.from_numpy((rng.random((1, 1, 5, 5, 5)) > 0.5).astype(np.float64))
    assert 0.0 <= float(skeleton_loss(pred, lab)) < 1.0


def test_skeleton_loss_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        skeleton_loss(torch.rand(4, 4, 4), torch.zeros(4, 4, 5))


# ----------------------------------------------------------------------- BCE


def test_bce_values():
    assert float(bce_loss(torch.zeros(1), torch.ones(1))) == pytest.approx(math.log(2), abs=1e-7)
    big = bce_loss(torch.tensor([20.0], dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    assert float(big) == pytest.approx(2.061153620314381e-09, rel=1e-9)
    z = torch.tensor([10.0, -10.0, 10.0])
    assert float(bce_loss(z, (torch.sigmoid(z) > 0.5).float())) < 1e-4


def test_bce_no_overflow_for_huge_logits():
    z = torch.tensor([1e4, -1e4])
    assert float(bce_loss(z, torch.tensor([0.0, 1.0]))) == pytest.approx(1e4)


def test_bce_matches_naive_formula():
    rng = np.random.default_rng(5)
    z = rng.standard_normal(50)
    y = (rng.random(50) > 0.5).astype(float)
    s = 1 / (1 + np.exp(-z))
    naive = -np.mean(y * np.log(s) + (1 - y) * np.log(1 - s))
    assert float(bce_loss(torch.from_numpy(z), torch.from_numpy(y))) == pytest.approx(naive, rel=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        bce_loss(torch.zeros(3), torch.zeros(4))


# ------------------------------------------------------------------ schedule


def test_alpha_closed_form():
    assert alpha(0.0) == 0.0
    assert alpha(0.1) == pytest.approx(0.46211715726000974, abs=1e-12)
    assert alpha(1.0) == pytest.approx(0.9999092042625951, abs=1e-12)
    grid = np.arange(0, 41) * 0.05
    vals = [alpha(p) for p in grid]
    assert max(abs(a - math.tanh(5 * p)) for a, p in zip(vals, grid)) <= 1e-12
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        alpha(-0.1)


def test_progress_ratio_branches():
    e = 7
    assert progress_ratio(Progress(0, 100 * e, 100)) == 0.0
    assert progress_ratio(Progress(100 * e, 200 * e, 200)) == pytest.approx(0.5)
    assert progress_ratio(Progress(250 * e, 300 * e, 300)) == pytest.approx(2 * 250 / 300)
    # continuity is not promised at the knee: p jumps from 1 to 4/3
    assert progress_ratio(Progress(200 * e, 300 * e, 300)) == pytest.approx(1.0)
    assert progress_ratio(Progress(200 * e + 1, 300 * e, 300)) > 1.3
    assert progress_ratio(Progress(400 * e, 400 * e, 400)) == 2.0


def test_progress_validation():
    with pytest.raises(ValueError):
        Progress(0, 0, 1)
    with pytest.raises(ValueError):
        Progress(11, 10, 1)


def test_loss_config_validation():
    for bad in (dict(delta=0), dict(skeleton_iters=-1), dict(mode="dice"), dict(schedule_epoch_knee=300)):
        with pytest.raises(ValueError):
            LossConfig(**bad).validate()


# ------------------------------------------------------------- compound loss


def test_compound_blend_arithmetic():
    a = alpha(0.1)
    assert a * 0.6 + (1 - a) * 0.4 == pytest.approx(0.4924234314520019, abs=1e-12)


def test_compound_endpoints():
    rng = np.random.default_rng(2)
    logits = torch.from_numpy(rng.standard_normal((2, 1, 5, 5, 5)))
    label = torch.from_numpy((rng.random((2, 1, 5, 5, 5)) > 0.7).astype(np.float64))
    terms = {}
    at0 = compound_loss(logits, label, 0.0, terms=terms)
    assert float(at0) == float(skeleton_loss(torch.sigmoid(logits), label))
    assert terms["alpha"] == 0.0
    late = compound_loss(logits, label, 2.0, terms=terms)
    assert float(late) == pytest.approx(terms["ce"], abs=1e-6)
    mid = compound_loss(logits, label, 0.1, terms=terms)
    assert float(mid) == pytest.approx(terms["alpha"] * terms["ce"] + (1 - terms["alpha"]) * terms["skl"], abs=1e-12)


def test_compound_accepts_progress():
    logits = torch.zeros(1, 1, 4, 4, 4)
    label = torch.zeros(1, 1, 4, 4, 4)
    terms = {}
    compound_loss(logits, label, Progress(50, 200, 200), terms=terms)
    assert terms["p"] == pytest.approx(0.25)


def test_blend_moves_toward_ce_when_ce_is_larger():
    ce, skl = 0.7, 0.3
    vals = [alpha(p) * ce + (1 - alpha(p)) * skl for p in np.linspace(0, 2, 21)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
