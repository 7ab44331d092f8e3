"""Volume files, preprocessing, augmentation and synthetic tubular phantoms.

On disk a volume is a directory holding ``meta.json`` ({"dims": [D, H, W],
"dtype": "u8"|"f32", "spacing": [...]}) and ``data.raw`` (little-endian,
width index fastest, then height, then depth).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPES = {"u8": np.dtype("u1"), "f32": np.dtype("<f4")}


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError(f"a volume is 3D (D, H, W), got shape {self.voxels.shape}")
        if self.voxels.dtype == np.uint8:
            self.dtype = "u8"
        else:
            self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
            self.dtype = "f32"

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)


@dataclass
class Sample:
    image: Volume
    label: Volume
    name: str = ""

    def __post_init__(self):
        if self.image.dims != self.label.dims:
            raise ValueError(f"image dims {self.image.dims} != label dims {self.label.dims}")


# ---------------------------------------------------------------- persistence


def save_volume(v: Volume, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"dims": list(v.dims), "dtype": v.dtype}
    for key, value in v.meta.items():
        if key not in meta:
            meta[key] = value
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "data.raw").write_bytes(v.voxels.astype(DTYPES[v.dtype], copy=False).tobytes(order="C"))
    return path


def load_volume(path) -> Volume:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as e:
        raise VolumeFormatError(f"{path}: missing meta.json") from e
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{path}: corrupt meta.json ({e})") from e
    dims = meta.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(n, int) and n > 0 for n in dims)):
        raise VolumeFormatError(f"{path}: 'dims' must be three positive ints, got {dims!r}")
    if meta.get("dtype") not in DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    dt = DTYPES[meta["dtype"]]
    blob_path = path / "data.raw"
    if not blob_path.exists():
        raise VolumeFormatError(f"{path}: missing data.raw")
    blob = blob_path.read_bytes()
    expected = math.prod(dims) * dt.itemsize
    if len(blob) != expected:
        raise VolumeFormatError(f"{path}: data.raw has {len(blob)} bytes, header implies {expected}")
    voxels = np.frombuffer(blob, dtype=dt).reshape(dims).copy()
    if dt != DTYPES["u8"]:
        voxels = voxels.astype(np.float32)
    extra = {k: v for k, v in meta.items() if k not in ("dims", "dtype")}
    return Volume(voxels, extra)


def image_to_unit(v: Volume) -> np.ndarray:
    """u8 images scale by 1/255; float images are min-max normalized per volume."""
    if v.dtype == "u8":
        return v.voxels.astype(np.float32) / np.float32(255.0)
    x = v.voxels.astype(np.float32)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return (x - np.float32(lo)) / np.float32(hi - lo)


def save_sample(s: Sample, path) -> Path:
    path = Path(path)
    save_volume(s.image, path / "image")
    save_volume(s.label, path / "label")
    return path


def load_sample(path) -> Sample:
    path = Path(path)
    image = load_volume(path / "image")
    label = load_volume(path / "label")
    lab = (label.voxels > 0).astype(np.uint8)
    return Sample(Volume(image_to_unit(image), image.meta), Volume(lab, label.meta), path.name)


def load_dataset(path) -> list[Sample]:
    """Every subdirectory holding image/ and label/, sorted by name."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    dirs = sorted(p for p in path.iterdir() if (p / "image").is_dir() and (p / "label").is_dir())
    if not dirs:
        raise FileNotFoundError(f"no samples (image/ + label/) under {path}")
    return [load_sample(d) for d in dirs]


# ---------------------------------------------------------------- filtering


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized taps for offsets -r..r, r = ceil(3 sigma)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_axis(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = taps.size // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="symmetric")
    n = x.shape[axis]

    def shifted(k):
        return np.take(xp, np.arange(r + k, r + k + n), axis=axis)

    out = taps[r] * x
    for k in range(1, r + 1):
        # mirrored taps summed pairwise so flips commute bit-exactly
        out = out + taps[r + k] * (shifted(-k) + shifted(k))
    return out


def gaussian3d(v: Volume | np.ndarray, sigma: float = 0.8):
    """Separable Gaussian smoothing with symmetric (reflective) borders."""
    taps = gaussian_kernel1d(sigma)
    arr = v.voxels if isinstance(v, Volume) else v
    x = arr.astype(np.float64)
    for axis in range(3):
        x = _smooth_axis(x, taps, axis)
    x = x.astype(np.float32)
    if isinstance(v, Volume):
        return Volume(x, dict(v.meta))
    return x


# -------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class Transform:
    flip_h: bool = False
    flip_w: bool = False
    rot90: int = 0
    # crop origin in the (padded) transformed volume; None = centered
    offset: tuple[int, int, int] | None = None


def _pad_to(x: np.ndarray, patch) -> np.ndarray:
    pad = []
    for n, p in zip(x.shape, patch):
        deficit = max(p - n, 0)
        pad.append((deficit // 2, deficit - deficit // 2))
    if any(a or b for a, b in pad):
        x = np.pad(x, pad)
    return x


def _apply(x: np.ndarray, t: Transform, patch) -> np.ndarray:
    if t.flip_w:
        x = x[:, :, ::-1]
    if t.flip_h:
        x = x[:, ::-1, :]
    if t.rot90 % 4:
        x = np.rot90(x, t.rot90 % 4, axes=(1, 2))
    if patch is None:
        return np.ascontiguousarray(x)
    x = _pad_to(x, patch)
    if t.offset is None:
        offset = [(n - p) // 2 for n, p in zip(x.shape, patch)]
    else:
        offset = t.offset
    sl = tuple(slice(o, o + p) for o, p in zip(offset, patch))
    return np.ascontiguousarray(x[sl])


def apply_transform(s: Sample, t: Transform, patch=None) -> Sample:
    """Apply one rigid transform (flips, H-W rotation, crop) to image and label."""
    img = _apply(s.image.voxels, t, patch)
    lab = _apply(s.label.voxels, t, patch)
    return Sample(Volume(img, dict(s.image.meta)), Volume(lab, dict(s.label.meta)), s.name)


def random_transform(dims, rng: np.random.Generator, patch=(128, 128, 64), flip=True, rotate=True, crop=True):
    flip_h = bool(rng.integers(2)) if flip else False
    flip_w = bool(rng.integers(2)) if flip else False
    k = int(rng.integers(4)) if rotate else 0
    d, h, w = dims
    if k % 2:
        h, w = w, h
    padded = [max(n, p) for n, p in zip((d, h, w), patch)]
    if crop:
        offset = tuple(int(rng.integers(n - p + 1)) for n, p in zip(padded, patch))
    else:
        offset = None
    return Transform(flip_h, flip_w, k, offset)


def augment(s: Sample, rng: np.random.Generator, patch=(128, 128, 64), flip=True, rotate=True, crop=True) -> Sample:
    """Random H/W flips, 90-degree H-W rotation and a patch crop (zero padding if short)."""
    t = random_transform(s.image.dims, rng, patch, flip, rotate, crop)
    return apply_transform(s, t, patch)


# ------------------------------------------------------------------ phantoms


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    n_branches: int = 8
    radius_range: tuple[float, float] = (1.0, 2.5)
    noise_sigma: float = 0.25
    gap_probability: float = 0.3
    seed: int = 0
    # bright off-structure blobs per 10^4 voxels; amplitude scales with noise_sigma
    speckle_density: float = 1.0
    segment_length: float = 6.0
    segments_per_branch: int = 8

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"phantom dims must be three extents >= 8, got {self.dims}")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ValueError(f"radius_range must satisfy 1 <= lo <= hi, got {self.radius_range}")
        if not 0 <= self.gap_probability <= 1:
            raise ValueError("gap_probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.speckle_density < 0:
            raise ValueError("noise_sigma and speckle_density must be >= 0")
        if self.n_branches < 1:
            raise ValueError("n_branches must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("dims", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _capsule_mask(shape, p0, p1, radius) -> tuple[tuple[slice, ...], np.ndarray]:
    lo = np.maximum(np.floor(np.minimum(p0, p1) - radius - 1), 0).astype(int)
    hi = np.minimum(np.ceil(np.maximum(p0, p1) + radius + 2), shape).astype(int)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), axis=-1)
    seg = p1 - p0
    length2 = float(seg @ seg)
    rel = grid - p0
    t = np.clip(rel @ seg / length2, 0.0, 1.0) if length2 > 0 else np.zeros(grid.shape[:-1])
    nearest = p0 + t[..., None] * seg
    dist2 = ((grid - nearest) ** 2).sum(-1)
    return sl, dist2 <= radius**2


def _walk(rng, start, direction, n_steps, step, dims):
    pts = [start]
    d = direction / np.linalg.norm(direction)
    upper = np.asarray(dims, float) - 1
    for _ in range(n_steps):
        d = d + rng.normal(0, 0.35, 3)
        d /= np.linalg.norm(d)
        nxt = pts[-1] + step * d
        for a in range(3):
            if nxt[a] < 1 or nxt[a] > upper[a] - 1:
                d[a] = -d[a]
                nxt[a] = np.clip(nxt[a], 1, upper[a] - 1)
        pts.append(nxt)
    return pts


def synth_phantom(spec: PhantomSpec) -> Sample:
    """Tree of voxelized tubes with noise, bright speckle and image-only gaps."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(n) for n in spec.dims)
    label = np.zeros(dims, dtype=bool)
    gap_mask = np.zeros(dims, dtype=bool)
    r_lo, r_hi = spec.radius_range

    centre = np.asarray(dims, float) / 2
    start = centre + rng.uniform(-0.25, 0.25, 3) * np.asarray(dims)
    branches = [(_walk(rng, start, rng.normal(size=3), spec.segments_per_branch, spec.segment_length, dims), r_hi)]
    for _ in range(spec.n_branches - 1):
        parent, parent_r = branches[int(rng.integers(len(branches)))]
        origin = parent[int(rng.integers(1, len(parent)))]
        radius = max(r_lo, parent_r * rng.uniform(0.6, 0.9))
        n_steps = max(2, int(spec.segments_per_branch * rng.uniform(0.5, 1.0)))
        branches.append((_walk(rng, origin, rng.normal(size=3), n_steps, spec.segment_length, dims), radius))

    thin = r_lo + 0.5 * (r_hi - r_lo)
    for pts, radius in branches:
        for p0, p1 in zip(pts[:-1], pts[1:]):
            sl, m = _capsule_mask(dims, p0, p1, radius)
            label[sl] |= m
        if radius <= thin and rng.random() < spec.gap_probability:
            k = int(rng.integers(len(pts) - 1))
            t0 = rng.uniform(0.2, 0.6)
            a = pts[k] + t0 * (pts[k + 1] - pts[k])
            b = pts[k] + (t0 + 0.3) * (pts[k + 1] - pts[k])
            sl, m = _capsule_mask(dims, a, b, radius + 1.0)
            gap_mask[sl] |= m

    image = label.astype(np.float64)
    image[gap_mask] = 0.0
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, dims)
        n_speckle = rng.poisson(spec.speckle_density * math.prod(dims) / 1e4)
        for _ in range(n_speckle):
            c = rng.uniform(0, 1, 3) * (np.asarray(dims) - 1)
            r = rng.uniform(0.8, 1.8)
            amp = 2.0 * spec.noise_sigma * rng.uniform(0.5, 1.0)
            sl, m = _capsule_mask(dims, c, c, r)
            image[sl] += amp * m
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    meta = {"source": "phantom", "seed": int(spec.seed)}
    return Sample(Volume(image, dict(meta)), Volume(label.astype(np.uint8), dict(meta)), f"phantom_{spec.seed}")
