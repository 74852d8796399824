"""Command-line entry point.

Exit codes: 0 success, 2 validation error (bad input, config or files),
3 numerical failure (a solver or estimator could not produce a result).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import NumericalError, ValidationError
from .shading import load_lighting, save_lighting

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=_u64, help="random seed (overrides the config)")
    common.add_argument("--threads", type=_positive, help="worker cap (overrides the config)")
    common.add_argument("--frames", help="key-frame selection such as 0-9,12 (frame 0 is always kept)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="photorefine", description="Photometric depth refinement and albedo recovery.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset with ground truth")
    s.add_argument("--n-frames", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--motion", choices=("wobble", "orbit"))
    s.add_argument("--surface", choices=("bumpy", "sphere"))
    s.add_argument("--albedo", choices=("constant", "checker", "patches", "patches_checker"))
    s.add_argument("--smooth-sigma", type=float, help="degrade depth with this Gaussian width (px); 0 keeps it exact")
    s.add_argument("--smooth-iters", type=int)
    s.add_argument("--corrupt-frames", type=int, help="number of non-reference frames given salt-and-pepper noise")
    s.add_argument("--sp-density", type=float)
    s.add_argument("--perturb-poses", type=float, dest="perturb_px", help="translation noise as mean image shift (px)")
    s.add_argument("--perturb-rot-deg", type=float, dest="perturb_r_deg")

    for name, text in (
        ("match", "match every key frame against the reference"),
        ("light", "estimate lighting from existing matches"),
        ("recover", "EM normal and albedo recovery from existing matches and lighting"),
        ("integrate", "fuse recovered normals with the reference depth"),
        ("pipeline", "run match, light, recover and integrate"),
        ("eval", "compare results with the dataset's ground truth"),
    ):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("dataset", help="dataset directory or manifest.json")
        if name == "recover":
            c.add_argument("--lighting", help="use this lighting JSON instead of <out>/light/lighting.json")
        if name == "eval":
            c.add_argument("--erode", type=int, default=3, help="pixels trimmed from the mask before scoring")
    return p


_SYNTH_FLAGS = (
    "n_frames",
    "size",
    "motion",
    "surface",
    "albedo",
    "smooth_sigma",
    "smooth_iters",
    "corrupt_frames",
    "sp_density",
    "perturb_px",
    "perturb_r_deg",
)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.command == "synth":
        over = {k: getattr(args, k) for k in _SYNTH_FLAGS if getattr(args, k) is not None}
        if over:
            changes["synth"] = dataclasses.replace(cfg.synth, **over)
    return cfg.replace(**changes) if changes else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o)))


def run(args) -> int:
    cfg = _config(args)
    if args.command == "synth":
        path = pipeline.run_synth(cfg.synth, args.out, cfg.seed)
        _emit({"manifest": str(path)})
        return EXIT_OK

    ds = pipeline.load(args.dataset, args.frames)
    out = args.out
    if args.command == "pipeline":
        metrics = pipeline.run_pipeline(ds, cfg, out)
        _emit(metrics.get("evaluation", metrics["stages"].get("recover", {})))
    elif args.command == "match":
        fields = pipeline.run_match(ds, cfg, out)
        _emit([{"frame": fid, **cf.stats} for fid, cf in zip(ds.frame_ids, fields)])
    elif args.command == "light":
        L = pipeline.run_light(ds, pipeline.load_matches(ds, out), cfg, out)
        _emit(L.to_dict())
    elif args.command == "recover":
        path = Path(args.lighting) if args.lighting else Path(out) / "light" / "lighting.json"
        if not path.exists():
            raise ValidationError(f"no lighting at {path}; run the light stage first or pass --lighting")
        L = load_lighting(path)
        if args.lighting:
            (Path(out) / "light").mkdir(parents=True, exist_ok=True)
            save_lighting(Path(out) / "light" / "lighting.json", L)
        res = pipeline.run_recover(ds, pipeline.load_matches(ds, out), L, cfg, out)
        _emit(res.stats())
    elif args.command == "integrate":
        normals, _, weight = pipeline.load_recovery(ds, out)
        res = pipeline.run_integrate(ds, normals, weight, cfg, out)
        _emit({"converged": res.converged, "iterations": res.iterations})
    elif args.command == "eval":
        _emit(pipeline.run_eval(ds, out, args.erode))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
