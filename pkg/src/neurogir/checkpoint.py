"""Checkpoint persistence: manifest.json + weights.bin (little-endian float32).

The manifest lists every parameter and buffer in model order as
``{name, shape, dtype, byte_offset}``; it also carries the run configuration
so a checkpoint can be reloaded without any other file.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .backbone import ResUNet3d
from .config import RunConfig, config_from_dict

FORMAT = "neurogir-checkpoint/1"


def save_checkpoint(state: dict[str, torch.Tensor], path, config: RunConfig | dict | None = None, extra=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {"format": FORMAT, "tensors": entries}
    if config is not None:
        manifest["config"] = config.to_dict() if isinstance(config, RunConfig) else config
    if extra:
        manifest["extra"] = extra
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise FileNotFoundError(f"no manifest.json in {path}") from e
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unexpected checkpoint format {manifest.get('format')!r}")
    return manifest


def load_state(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / "weights.bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["byte_offset"] + 4 * n
        if end > len(blob):
            raise ValueError(f"{path}: weights.bin truncated at tensor {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["byte_offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return state


def load_model(path) -> tuple[ResUNet3d, RunConfig]:
    manifest = read_manifest(path)
    if "config" not in manifest:
        raise ValueError(f"{path}: checkpoint carries no configuration")
    cfg = config_from_dict(manifest["config"])
    model = ResUNet3d(cfg.model)
    model.load_state_dict(load_state(path), strict=True)
    model.eval()
    return model, cfg
