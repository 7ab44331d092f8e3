"""Training loop: progress-scheduled compound loss with validation-driven early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor_core as tc
from .backbone import ResUNet3d
from .config import DataConfig, RunConfig, TrainConfig
from .data_io import Sample, Volume, augment, gaussian3d
from .evaluation import SweepResult, sliding_window_predict, summarize, threshold_sweep
from .losses import LossConfig, Progress, alpha, bce_loss, compound_loss, progress_ratio

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, alpha_value: float, lr: float):
        self.iteration, self.alpha, self.lr = iteration, alpha_value, lr
        super().__init__(f"non-finite values at iteration {iteration} (alpha={alpha_value:.6g}, lr={lr:g})")


@dataclass
class TrainResult:
    history: list[dict]
    best_state: dict
    best_metric: float
    best_iteration: int
    iterations: int
    stopped_early: bool
    val_sweeps: list[SweepResult] = field(default_factory=list)


def preprocess(samples: list[Sample], sigma: float | None) -> list[Sample]:
    """Gaussian-filter the images (labels untouched); None leaves them as is."""
    if sigma is None:
        return list(samples)
    return [Sample(gaussian3d(s.image, sigma), s.label, s.name) for s in samples]


def evaluate(model, samples: list[Sample], data_cfg: DataConfig) -> list[SweepResult]:
    sweeps = []
    for s in samples:
        prob = sliding_window_predict(model, s.image.voxels, tuple(data_cfg.eval_patch), data_cfg.overlap)
        sweeps.append(threshold_sweep(prob, s.label.voxels))
    return sweeps


def mean_best_f1(sweeps: list[SweepResult]) -> float:
    return summarize([s.best.f1 for s in sweeps])[0]


def _state_copy(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _batch(samples, order, it_in_epoch, batch_size, rng_key, data_cfg: DataConfig):
    n = len(order)
    imgs, labs = [], []
    for j in range(batch_size):
        s = samples[order[(it_in_epoch * batch_size + j) % n]]
        rng = np.random.default_rng(rng_key + [j])
        a = augment(s, rng, tuple(data_cfg.patch), data_cfg.flip, data_cfg.rotate, data_cfg.crop)
        imgs.append(a.image.voxels)
        labs.append(a.label.voxels)
    x = torch.from_numpy(np.stack(imgs)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(labs)[:, None].astype(np.float32))
    return x, y


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def train(
    model: ResUNet3d,
    train_samples: list[Sample],
    val_samples: list[Sample],
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    data_cfg: DataConfig,
    seed: int = 0,
) -> TrainResult:
    """Optimize ``model`` in place; on return it holds the best validation weights.

    Samples must already be preprocessed. Every random draw is keyed on
    (seed, epoch) or (seed, iteration, slot), so a run is reproducible.
    """
    train_cfg.validate()
    loss_cfg.validate()
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must both be non-empty")
    ipe = train_cfg.iterations_per_epoch or math.ceil(len(train_samples) / train_cfg.batch_size)
    total = ipe * train_cfg.max_epochs
    eval_every = train_cfg.eval_every or ipe
    params = list(model.parameters())
    opt = tc.Adam(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)

    history: list[dict] = []
    best_metric, best_iteration = -1.0, 0
    best_state = _state_copy(model)
    best_sweeps: list[SweepResult] = []
    stale = 0
    stopped_early = False
    order = None
    it = 0
    for it in range(total):
        epoch, within = divmod(it, ipe)
        if within == 0:
            order = np.random.default_rng([seed, epoch]).permutation(len(train_samples))
        x, y = _batch(train_samples, order, within, train_cfg.batch_size, [seed, it], data_cfg)

        model.train()
        opt.zero_grad()
        pr = Progress(it, total, train_cfg.max_epochs)
        p = progress_ratio(pr, loss_cfg)
        a = alpha(p)
        rec = {"kind": "train", "iteration": it + 1, "epoch": epoch, "p": p, "alpha": a}
        try:
            logits = model(x)
            if loss_cfg.mode == "compound":
                terms: dict = {}
                loss = compound_loss(logits, y, p, loss_cfg, terms)
                rec.update(ce=terms["ce"], skl=terms["skl"])
            else:
                loss = bce_loss(logits, y)
                rec.update(ce=float(loss.detach()))
        except tc.NonFiniteError as e:
            raise TrainingDiverged(it + 1, a, train_cfg.lr) from e
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(it + 1, a, train_cfg.lr)
        rec["loss"] = value
        tc.backward(loss)
        opt.step()
        history.append(rec)

        if (it + 1) % eval_every == 0 or it + 1 == total:
            try:
                sweeps = evaluate(model, val_samples, data_cfg)
            except tc.NonFiniteError as e:
                raise TrainingDiverged(it + 1, a, train_cfg.lr) from e
            metric = mean_best_f1(sweeps)
            history.append({"kind": "val", "iteration": it + 1, "epoch": epoch, "val_best_f1": metric})
            log.info("iter %d  loss %.4f  alpha %.3f  val F1 %.4f", it + 1, value, a, metric)
            if metric > best_metric:
                best_metric, best_iteration, stale = metric, it + 1, 0
                best_state = _state_copy(model)
                best_sweeps = sweeps
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    stopped_early = True
                    break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(history, best_state, best_metric, best_iteration, it + 1, stopped_early, best_sweeps)


def run_training(cfg: RunConfig, train_samples, val_samples) -> tuple[ResUNet3d, TrainResult]:
    """Seed, build the model and train on raw (unfiltered) samples."""
    tc.reference_mode(cfg.seed)
    model = ResUNet3d(cfg.model)
    tr = preprocess(train_samples, cfg.data.gaussian_sigma)
    va = preprocess(val_samples, cfg.data.gaussian_sigma)
    result = train(model, tr, va, cfg.train, cfg.loss, cfg.data, cfg.seed)
    return model, result


def predict_volume(model, image: Volume | np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Probability map for one raw [0, 1] image, with the run's preprocessing."""
    vol = image if isinstance(image, Volume) else Volume(np.asarray(image, dtype=np.float32))
    if cfg.data.gaussian_sigma is not None:
        vol = gaussian3d(vol, cfg.data.gaussian_sigma)
    return sliding_window_predict(model, vol.voxels, tuple(cfg.data.eval_patch), cfg.data.overlap)
