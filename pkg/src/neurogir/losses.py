"""Soft skeletons, the skeleton loss and the progress-weighted compound loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import tensor_core as tc

LOSS_MODES = ("ce_only", "compound")


@dataclass
class LossConfig:
    delta: float = 1.0
    skeleton_iters: int = 5
    schedule_epoch_knee: int = 200
    schedule_epoch_cap: int = 300
    mode: str = "compound"

    def validate(self) -> None:
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.skeleton_iters < 0:
            raise ValueError(f"skeleton_iters must be >= 0, got {self.skeleton_iters}")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if not 0 < self.schedule_epoch_knee < self.schedule_epoch_cap:
            raise ValueError("need 0 < schedule_epoch_knee < schedule_epoch_cap")


@dataclass(frozen=True)
class Progress:
    current_iteration: int
    total_iterations: int
    epochs_planned: int

    def __post_init__(self):
        if self.total_iterations <= 0 or self.epochs_planned <= 0:
            raise ValueError("total_iterations and epochs_planned must be positive")
        if not 0 <= self.current_iteration <= self.total_iterations:
            raise ValueError(
                f"current_iteration {self.current_iteration} outside [0, {self.total_iterations}]"
            )

    @property
    def iterations_per_epoch(self) -> float:
        return self.total_iterations / self.epochs_planned


# ------------------------------------------------------------------ skeleton


def soft_erode(x):
    return tc.pool3d(x, "min", 3, 1, 1)


def soft_dilate(x):
    return tc.pool3d(x, "max", 3, 1, 1)


def soft_open(x):
    return soft_dilate(soft_erode(x))


def soft_skeleton(prob, iters: int = 5):
    """Differentiable skeleton of a [0, 1] volume via iterated min/max pooling.

    Accepts (D, H, W), (B, D, H, W) or (B, C, D, H, W).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    lo, hi = float(prob.detach().min()), float(prob.detach().max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ValueError(f"soft_skeleton: values must lie in [0, 1], got range [{lo:.6g}, {hi:.6g}]")
    shape = prob.shape
    x = prob.reshape((-1, 1) + tuple(shape[-3:])) if prob.dim() != 5 else prob
    skel = tc.relu(x - soft_open(x))
    for _ in range(iters):
        x = soft_erode(x)
        delta = tc.relu(x - soft_open(x))
        skel = skel + tc.relu(delta - skel * delta)
    return skel.reshape(shape)


def skeleton_terms(skel_pred, skel_label, delta: float = 1.0):
    """Smoothed skeleton precision and recall over all voxels."""
    inter = (skel_pred * skel_label).sum()
    precision = (inter + delta) / (skel_pred.sum() + delta)
    recall = (inter + delta) / (skel_label.sum() + delta)
    return precision, recall


def skeleton_loss_from_skeletons(skel_pred, skel_label, delta: float = 1.0):
    p, r = skeleton_terms(skel_pred, skel_label, delta)
    return 1.0 - 2.0 * p * r / (p + r)


def skeleton_loss(pred_prob, label, cfg: LossConfig | None = None):
    """1 - harmonic mean of skeleton precision and recall, averaged over the batch.

    Inputs are (B, 1, D, H, W) or a single (D, H, W) volume.
    """
    cfg = cfg or LossConfig()
    if pred_prob.shape != label.shape:
        raise tc.ShapeError(f"skeleton_loss: shapes differ {tuple(pred_prob.shape)} vs {tuple(label.shape)}")
    if pred_prob.dim() == 3:
        pred_prob, label = pred_prob[None, None], label[None, None]
    skel_p = soft_skeleton(pred_prob, cfg.skeleton_iters)
    with torch.no_grad():
        skel_l = soft_skeleton(label.to(pred_prob.dtype), cfg.skeleton_iters)
    per_item = [
        skeleton_loss_from_skeletons(skel_p[i], skel_l[i], cfg.delta) for i in range(pred_prob.shape[0])
    ]
    return torch.stack(per_item).mean()


def bce_loss(logits, label):
    """Mean binary cross entropy from logits: max(z, 0) - z*y + log(1 + e^-|z|)."""
    if logits.shape != label.shape:
        raise tc.ShapeError(f"bce_loss: shapes differ {tuple(logits.shape)} vs {tuple(label.shape)}")
    y = label.to(logits.dtype)
    per_voxel = torch.clamp(logits, min=0) - logits * y + F.softplus(-logits.abs())
    return tc._finite(per_voxel.mean(), "bce_loss")


# ------------------------------------------------------------------ schedule


def progress_ratio(pr: Progress, cfg: LossConfig | None = None) -> float:
    """Training progress p in [0, 2].

    Up to the knee epoch (200), p = iteration / (iterations in 200 epochs).
    Past it, p = 2 * iteration / (iterations in 300 epochs).
    """
    cfg = cfg or LossConfig()
    per_epoch = pr.iterations_per_epoch
    elapsed_epochs = pr.current_iteration / per_epoch
    if elapsed_epochs <= cfg.schedule_epoch_knee:
        return pr.current_iteration / (cfg.schedule_epoch_knee * per_epoch)
    p = 2.0 * pr.current_iteration / (cfg.schedule_epoch_cap * per_epoch)
    return min(p, 2.0)


def alpha(p: float) -> float:
    if p < 0:
        raise ValueError(f"progress must be >= 0, got {p}")
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def compound_loss(logits, label, pr: Progress | float, cfg: LossConfig | None = None, terms: dict | None = None):
    """alpha * BCE + (1 - alpha) * skeleton loss; ``pr`` is a Progress or a ready ratio p.

    When ``terms`` is given it receives the component values and alpha.
    """
    cfg = cfg or LossConfig()
    p = progress_ratio(pr, cfg) if isinstance(pr, Progress) else float(pr)
    a = alpha(p)
    ce = bce_loss(logits, label)
    skl = skeleton_loss(tc.sigmoid(logits), label, cfg)
    if terms is not None:
        terms.update(p=p, alpha=a, ce=float(ce.detach()), skl=float(skl.detach()))
    return a * ce + (1.0 - a) * skl
