"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 training aborted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .backbone import ResUNet3d, count_params
from .checkpoint import load_model, save_checkpoint
from .config import ConfigError, dump_config, load_config
from .data_io import PhantomSpec, Volume, VolumeFormatError, load_dataset, load_volume, image_to_unit, save_sample, save_volume, synth_phantom
from .evaluation import export_projection, simple_threshold_baseline, summarize, threshold_sweep
from .training import TrainingDiverged, predict_volume, run_training, write_history

log = logging.getLogger("neurogir")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NAN = 0, 1, 2, 3


class InputError(Exception):
    pass


def _resolve(base: Path, p: str | None, what: str) -> Path:
    if not p:
        raise ConfigError(f"data.{what} is required")
    path = Path(p)
    return path if path.is_absolute() else (base / path).resolve()


# ------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    base = Path(args.config).resolve().parent
    cfg.data.train = str(_resolve(base, cfg.data.train, "train"))
    cfg.data.val = str(_resolve(base, cfg.data.val, "val"))
    train_set = load_dataset(cfg.data.train)
    val_set = load_dataset(cfg.data.val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    try:
        model, result = run_training(cfg, train_set, val_set)
    except TrainingDiverged as e:
        log.error("%s", e)
        return EXIT_NAN
    write_history(result.history, out / "history.jsonl")
    save_checkpoint(result.best_state, out / "checkpoint", cfg)
    summary = {
        "best_val_f1": result.best_metric,
        "best_iteration": result.best_iteration,
        "iterations": result.iterations,
        "stopped_early": result.stopped_early,
        "params": count_params(model),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best validation F1 {result.best_metric:.4f} at iteration {result.best_iteration}")
    return EXIT_OK


def _table(names, methods: dict) -> str:
    header = ["Method", "#Params (M)", "Metric", *names, "Overall Results"]
    rows = []
    for method, info in methods.items():
        params = "-" if info["params"] is None else f"{info['params'] / 1e6:.2f}"
        for metric in ("precision", "recall", "f1"):
            vals = [r[metric] for r in info["per_image"]]
            mean, std = info["overall"][metric]
            label = "F1" if metric == "f1" else metric.capitalize()
            rows.append([method, params, label, *(f"{v:.4f}" for v in vals), f"{mean:.4f} ± {std:.4f}"])
            method, params = "", ""
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: " | ".join(str(c).ljust(w) for c, w in zip(r, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *map(fmt, rows)]) + "\n"


def _method_summary(sweeps, params) -> dict:
    per_image = [dataclasses.asdict(s.best) for s in sweeps]
    overall = {m: summarize([r[m] for r in per_image]) for m in ("precision", "recall", "f1")}
    return {"params": params, "per_image": per_image, "overall": overall}


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint)
    samples = load_dataset(args.data)
    names = [s.name for s in samples]
    model_sweeps, simple_sweeps = [], []
    for s in samples:
        prob = predict_volume(model, s.image, cfg)
        model_sweeps.append(threshold_sweep(prob, s.label.voxels))
        simple_sweeps.append(simple_threshold_baseline(s.image.voxels, s.label.voxels))
    methods = {
        "Simple": _method_summary(simple_sweeps, None),
        "Proposed" if cfg.model.gir_enabled else "3D Res-U-Net": _method_summary(model_sweeps, count_params(model)),
    }
    report = {"images": names, "methods": methods, "mean_best_f1": methods[list(methods)[-1]]["overall"]["f1"][0]}
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n")
    table = _table(names, methods)
    path.with_suffix(".txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = load_model(args.checkpoint)
    vol = load_volume(args.volume)
    prob = predict_volume(model, Volume(image_to_unit(vol)), cfg)
    save_volume(Volume(prob, {"source": str(args.volume), "kind": "probability"}), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITE, run_suite

    if not args.all and not args.op:
        raise InputError("give --all or at least one --op")
    names = None if args.all else args.op
    try:
        reports = run_suite(names, seeds=range(args.seeds), tol=args.tol, suite=SUITE)
    except KeyError as e:
        raise InputError(str(e)) from e
    worst: dict[str, float] = {}
    for r in reports:
        op = r.name.split("[")[0]
        worst[op] = max(worst.get(op, 0.0), r.max_rel_error)
        if not r.passed:
            print(r.summary())
    for op, err in worst.items():
        status = "PASS" if err <= args.tol else "FAIL"
        print(f"{status}  {op:<20s} max rel err {err:.3e}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed (tol {args.tol:g})")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except FileNotFoundError as e:
        raise InputError(f"spec not found: {args.spec}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{args.spec}: invalid JSON ({e})") from e
    try:
        spec = PhantomSpec.from_dict(raw)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise InputError(str(e)) from e
    out = Path(args.out)
    for i in range(args.count):
        sample = synth_phantom(dataclasses.replace(spec, seed=spec.seed + i))
        save_sample(sample, out / f"phantom_{i:03d}")
    print(f"wrote {args.count} phantom(s) to {out}")
    return EXIT_OK


def cmd_project(args) -> int:
    vol = load_volume(args.volume)
    data = image_to_unit(vol) if vol.dtype == "u8" else vol.voxels
    export_projection(np.clip(data, 0.0, 1.0), args.axis, args.out)
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_config(args.config)
    with_gir = dataclasses.replace(cfg.model, gir_enabled=True)
    without = dataclasses.replace(cfg.model, gir_enabled=False)
    n_with = count_params(ResUNet3d(with_gir))
    n_without = count_params(ResUNet3d(without))
    extra = n_with - n_without
    print(f"params without GIR: {n_without:,}")
    print(f"params with GIR:    {n_with:,}")
    print(f"GIR overhead:       {extra:,} (+{100.0 * extra / n_without:.2f}%)")
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurogir", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sliding-window evaluation with a threshold sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a probability volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op", action="append")
    g.add_argument("--all", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a seeded phantom dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="max-intensity projection to an 8-bit PGM")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", choices=["depth", "height", "width"], default="depth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("params", help="parameter counts with and without GIR")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    tc.reference_mode()
    try:
        return args.func(args)
    except (ConfigError, InputError, VolumeFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
