import numpy as np
import pytest
import torch

from neurogir.backbone import ResUNet3d, UNetConfig
from neurogir.config import DataConfig, TrainConfig
from neurogir.data_io import PhantomSpec, synth_phantom
from neurogir.losses import LossConfig, Progress, alpha, progress_ratio
from neurogir.training import TrainingDiverged, preprocess, train

TINY = UNetConfig(level_channels=[2, 4], bottleneck_channels=8)
DATA = DataConfig(patch=[16, 16, 16], eval_patch=[16, 16, 16], gaussian_sigma=None)


def _phantoms(seeds, dims=(16, 16, 16)):
    return [synth_phantom(PhantomSpec(dims=dims, n_branches=3, noise_sigma=0.2, seed=s)) for s in seeds]


def _run(train_cfg, samples=None, val=None, seed=0, loss_cfg=None):
    torch.manual_seed(seed)
    model = ResUNet3d(TINY)
    samples = samples or _phantoms([1])
    val = val or _phantoms([9])
    return model, train(model, samples, val, train_cfg, loss_cfg or LossConfig(), DATA, seed)


def test_zero_learning_rate_freezes_parameters():
    torch.manual_seed(0)
    model = ResUNet3d(TINY)
    before = {k: v.clone() for k, v in model.named_parameters()}
    train(model, _phantoms([1]), _phantoms([9]), TrainConfig(lr=0.0, batch_size=2, max_epochs=5), LossConfig(), DATA)
    for name, p in model.named_parameters():
        assert torch.equal(p, before[name]), name


@pytest.mark.slow
def test_smoke_run_reduces_training_loss():
    cfg = TrainConfig(batch_size=1, max_epochs=200, eval_every=200, patience=5)
    _, result = _run(cfg)
    losses = [r["loss"] for r in result.history if r["kind"] == "train"]
    assert len(losses) == 200
    assert losses[-1] < losses[0]


def test_same_seed_same_trajectory():
    cfg = TrainConfig(batch_size=2, max_epochs=6, eval_every=3)
    _, a = _run(cfg, _phantoms([1, 2]))
    _, b = _run(cfg, _phantoms([1, 2]))
    assert a.history == b.history
    assert all(torch.equal(a.best_state[k], b.best_state[k]) for k in a.best_state)


def test_logged_alpha_reproduces_the_schedule():
    cfg = TrainConfig(batch_size=1, max_epochs=4, iterations_per_epoch=3, eval_every=6)
    _, result = _run(cfg)
    train_recs = [r for r in result.history if r["kind"] == "train"]
    total = 12
    for r in train_recs:
        p = progress_ratio(Progress(r["iteration"] - 1, total, 4))
        assert r["p"] == p
        assert r["alpha"] == alpha(p)
        assert r["loss"] == pytest.approx(r["alpha"] * r["ce"] + (1 - r["alpha"]) * r["skl"], rel=1e-5)


def test_ce_only_mode_logs_no_skeleton_term():
    cfg = TrainConfig(batch_size=1, max_epochs=2)
    _, result = _run(cfg, loss_cfg=LossConfig(mode="ce_only"))
    rec = next(r for r in result.history if r["kind"] == "train")
    assert "skl" not in rec and rec["loss"] == rec["ce"]


def test_early_stopping_keeps_the_best_checkpoint():
    cfg = TrainConfig(lr=3e-2, batch_size=1, max_epochs=40, patience=2)
    model, result = _run(cfg)
    vals = [r for r in result.history if r["kind"] == "val"]
    assert result.best_metric == max(r["val_best_f1"] for r in vals)
    best_rec = next(r for r in vals if r["val_best_f1"] == result.best_metric)
    assert best_rec["iteration"] == result.best_iteration
    for k, v in model.state_dict().items():
        assert torch.equal(v, result.best_state[k]), k
    if result.stopped_early:
        after = [r for r in vals if r["iteration"] > result.best_iteration]
        assert len(after) == cfg.patience


def test_divergence_is_reported_with_context():
    cfg = TrainConfig(lr=1e30, batch_size=1, max_epochs=4)
    with pytest.raises(TrainingDiverged) as info:
        _run(cfg)
    assert info.value.iteration >= 1
    assert info.value.lr == 1e30
    assert "alpha" in str(info.value)


def test_preprocess_filters_images_only():
    s = _phantoms([3])
    out = preprocess(s, 0.8)
    assert np.array_equal(out[0].label.voxels, s[0].label.voxels)
    assert not np.array_equal(out[0].image.voxels, s[0].image.voxels)
    assert preprocess(s, None)[0] is s[0]


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        train(ResUNet3d(TINY), [], _phantoms([1]), TrainConfig(), LossConfig(), DATA)
