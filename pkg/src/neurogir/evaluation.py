"""Threshold-sweep metrics, tiled inference and max-intensity projections."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

DEFAULT_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))
AXIS_INDEX = {"depth": 0, "height": 1, "width": 2}


@dataclass(frozen=True)
class MetricsRecord:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, threshold: float, tp: int, fp: int, fn: int, tn: int = 0) -> "MetricsRecord":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = f1_score(precision, recall)
        return cls(float(threshold), precision, recall, f1, int(tp), int(fp), int(fn), int(tn))


@dataclass
class SweepResult:
    records: list[MetricsRecord]

    @property
    def best(self) -> MetricsRecord:
        # max() keeps the first maximum, i.e. the lowest threshold on ties
        return max(sorted(self.records, key=lambda r: r.threshold), key=lambda r: r.f1)

    def to_dict(self) -> dict:
        return {"best": asdict(self.best), "records": [asdict(r) for r in self.records]}


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    if hasattr(x, "voxels"):
        return x.voxels
    return np.asarray(x)


def threshold_sweep(prob, label, thresholds=DEFAULT_THRESHOLDS) -> SweepResult:
    """Voxelwise counts of (prob >= t) against the binary label for each t."""
    prob, label = _as_numpy(prob), _as_numpy(label)
    if prob.shape != label.shape:
        raise ValueError(f"threshold_sweep: shapes differ {prob.shape} vs {label.shape}")
    truth = label.reshape(-1) > 0
    p = prob.reshape(-1)
    n_pos = int(truth.sum())
    n = truth.size
    records = []
    for t in thresholds:
        if not 0 < t < 1:
            raise ValueError(f"thresholds must lie in (0, 1), got {t}")
        pred = p >= t
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred)) - tp
        fn = n_pos - tp
        tn = n - tp - fp - fn
        records.append(MetricsRecord.from_counts(t, tp, fp, fn, tn))
    return SweepResult(records)


def simple_threshold_baseline(image, label, thresholds=DEFAULT_THRESHOLDS) -> SweepResult:
    """The sweep applied to raw intensities: a single global threshold per image."""
    img = _as_numpy(image)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("simple_threshold_baseline expects intensities in [0, 1]")
    return threshold_sweep(img, label, thresholds)


def summarize(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


# ----------------------------------------------------------- tiled inference


def tile_starts(extent: int, patch: int, overlap: float) -> list[int]:
    step = max(1, int(patch * (1.0 - overlap)))
    starts = [0]
    while starts[-1] + patch < extent:
        starts.append(starts[-1] + step)
    return starts


def sliding_window_predict(model, volume, patch=(48, 48, 48), overlap: float = 0.5) -> np.ndarray:
    """Sigmoid probabilities stitched from overlapping tiles with uniform averaging.

    The volume is zero-padded (at the far end of each axis) until the tiles
    cover it, then cropped back to its original extents.
    """
    if not 0 <= overlap <= 0.9:
        raise ValueError(f"overlap must lie in [0, 0.9], got {overlap}")
    x = _as_numpy(volume).astype(np.float32)
    dims = x.shape
    starts = [tile_starts(n, p, overlap) for n, p in zip(dims, patch)]
    padded = tuple(s[-1] + p for s, p in zip(starts, patch))
    if any(p > q for p, q in zip(patch, padded)):
        raise ValueError(f"patch {patch} larger than padded volume {padded}")
    xp = np.zeros(padded, dtype=np.float32)
    xp[: dims[0], : dims[1], : dims[2]] = x
    acc = np.zeros(padded, dtype=np.float64)
    count = np.zeros(padded, dtype=np.float64)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            for d0 in starts[0]:
                for h0 in starts[1]:
                    for w0 in starts[2]:
                        sl = (slice(d0, d0 + patch[0]), slice(h0, h0 + patch[1]), slice(w0, w0 + patch[2]))
                        tile = torch.from_numpy(np.ascontiguousarray(xp[sl]))[None, None]
                        prob = torch.sigmoid(model(tile))[0, 0].numpy()
                        acc[sl] += prob
                        count[sl] += 1.0
    finally:
        if hasattr(model, "train"):
            model.train(was_training)
    out = acc / count
    return out[: dims[0], : dims[1], : dims[2]].astype(np.float32)


# ---------------------------------------------------------------- projection


def max_projection(volume, axis: str = "depth") -> np.ndarray:
    if axis not in AXIS_INDEX:
        raise ValueError(f"axis must be one of {sorted(AXIS_INDEX)}, got {axis!r}")
    return _as_numpy(volume).max(axis=AXIS_INDEX[axis])


def write_pgm(image2d: np.ndarray, path) -> Path:
    """8-bit binary PGM; values are clipped to [0, 1] and scaled to 0..255."""
    img = np.clip(np.asarray(image2d, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(img * 255.0).astype(np.uint8)
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def export_projection(volume, axis: str, path) -> Path:
    return write_pgm(max_projection(volume, axis), path)
