"""Stage orchestration over a results directory with fixed filenames.

::

    <out>/match/frame_000.pfm, frame_000_score.pfm, frame_000.json, ...
    <out>/light/lighting.json, residual_histogram.csv, stats.json
    <out>/recover/normals.pfm, albedo.pfm, albedo.png, confidence.pfm, weight.pfm, stats.json
    <out>/integrate/depth.pfm, mesh.ply, stats.json
    <out>/eval/report.csv, normal_error.png, albedo_error.png, depth_error.png
    <out>/metrics.json

Each ``run_*`` function reads its inputs from the dataset and from earlier
stage directories, so stages can also be run one at a time. Failures are
re-raised with the stage name in the message and the same exception type,
after the files of completed stages have been written.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import synth
from .config import PipelineConfig, SynthConfig
from .core import AlbedoMap, DepthMap, NormalMap, normals_from_depth, sample_bilinear_many
from .dataset import Dataset, GroundTruth, load_dataset, write_dataset
from .errors import PhotorefineError, ValidationError
from .evaluate import evaluate, write_report
from .fileio import read_json, read_pfm, write_color, write_json, write_pfm
from .integrate import IntegrationResult, export_mesh, integrate_normals
from .lighting import build_ratio_set, estimate_lighting, ratio_residuals, residual_histogram, shading_alignment_error
from .match import CorrespondenceField, match_frame
from .recover import RecoveryResult, recover_map
from .shading import QuadraticLighting, load_lighting, save_lighting

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@contextmanager
def stage(name: str):
    """Prefix any package error raised inside with ``[name]`` while keeping its type."""
    try:
        yield
    except PhotorefineError as exc:
        if getattr(exc, "stage", None):
            raise
        try:
            wrapped = type(exc)(f"[{name}] {exc}")
        except TypeError:
            raise exc
        wrapped.stage = name
        raise wrapped from exc


# --------------------------------------------------------------------------
# synthetic datasets


def _scene(cfg: SynthConfig) -> synth.SyntheticScene:
    surface = (
        synth.BumpySphere(amplitude=cfg.amplitude, frequency=cfg.frequency) if cfg.surface == "bumpy" else synth.Sphere()
    )
    if cfg.motion == "wobble":
        poses = synth.wobble_poses(cfg.n_frames, cfg.yaw_deg, cfg.pitch_deg)
    else:
        poses = synth.orbit_poses(cfg.n_frames, cfg.step_deg)
    return synth.SyntheticScene(
        surface=surface,
        albedo_spec=synth.AlbedoSpec(kind=cfg.albedo),
        poses=poses,
        K=synth.default_intrinsics(cfg.size),
    )


def run_synth(cfg: SynthConfig, out, seed: int = 0) -> Path:
    """Render, degrade and write a dataset with ground truth; returns the manifest path.

    Ground truth is the undegraded reference frame. The manifest poses are
    the perturbed ones when pose noise is requested; the true poses are kept
    under ``synthetic.true_poses``.
    """
    scene = _scene(cfg)
    frames = synth.render_sequence(scene)
    K = scene.K
    rng = np.random.default_rng(seed)
    images = [f.image for f in frames]
    corrupted: list[int] = []
    if cfg.corrupt_frames:
        corrupted = sorted(int(k) for k in rng.choice(np.arange(1, len(frames)), cfg.corrupt_frames, replace=False))
        for k in corrupted:
            images[k] = synth.corrupt_salt_pepper(images[k], cfg.sp_density, seed * 1000 + k)
    depths = [f.depth for f in frames]
    if cfg.smooth_sigma > 0:
        depths = [synth.smooth_depth(d, cfg.smooth_sigma, cfg.smooth_iters, cfg.smooth_order) for d in depths]
    true_poses = [f.pose for f in frames]
    poses = true_poses
    if cfg.perturb_px > 0 or cfg.perturb_r_deg > 0:
        # calibrated at the median visible depth so the mean image shift is perturb_px
        z = float(np.median(frames[0].depth.depth[frames[0].depth.mask]))
        sigma_t = synth.translation_sigma_for_pixels(cfg.perturb_px, K, z)
        poses = synth.perturb_poses(true_poses, sigma_t, cfg.perturb_r_deg, seed + 1)
    ref = frames[0]
    gt = GroundTruth(ref.normals, ref.albedo, ref.depth, scene.lighting)
    info = {
        "seed": int(seed),
        "config": dataclasses.asdict(cfg),
        "corrupted_frames": corrupted,
        "true_poses": [{"R": p.R.ravel().tolist(), "T": p.T.tolist()} for p in true_poses],
    }
    return write_dataset(out, K, images, depths, poses, gt, info)


# --------------------------------------------------------------------------
# stages


def frame_normals(ds: Dataset) -> list[NormalMap]:
    return [normals_from_depth(d, ds.K) for d in ds.depths]


def _match_stem(out: Path, frame_id: int) -> Path:
    return out / "match" / f"frame_{frame_id:03d}"


def run_match(ds: Dataset, cfg: PipelineConfig, out) -> list[CorrespondenceField]:
    """Match every key frame against the reference; frame 0 gets the identity field."""
    out = Path(out)
    (out / "match").mkdir(parents=True, exist_ok=True)
    ref_img, ref_depth = ds.images[0], ds.depths[0]

    def one(i: int) -> CorrespondenceField:
        if i == 0:
            return CorrespondenceField.identity(ref_img.mask & ref_depth.mask)
        return match_frame(ref_img, ref_depth, ds.images[i], ds.K, ds.poses[i], cfg.match)

    with stage("match"):
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                fields = list(pool.map(one, range(len(ds.images))))
        else:
            fields = [one(i) for i in range(len(ds.images))]
    for fid, cf in zip(ds.frame_ids, fields):
        cf.save(_match_stem(out, fid))
    return fields


def load_matches(ds: Dataset, out) -> list[CorrespondenceField]:
    out = Path(out)
    fields = []
    for fid in ds.frame_ids:
        stem = _match_stem(out, fid)
        if not Path(f"{stem}.pfm").exists():
            raise ValidationError(f"no correspondences for frame {fid} under {out / 'match'}; run the match stage first")
        cf = CorrespondenceField.load(stem)
        if cf.q.shape[:2] != ds.K.shape:
            raise ValidationError(f"frame {fid}: correspondence field size does not match the dataset")
        fields.append(cf)
    return fields


def run_light(ds: Dataset, fields: list[CorrespondenceField], cfg: PipelineConfig, out) -> QuadraticLighting:
    out = Path(out)
    (out / "light").mkdir(parents=True, exist_ok=True)
    lcfg = dataclasses.replace(cfg.lighting, seed=cfg.seed)
    with stage("light"):
        normals = frame_normals(ds)
        obs = build_ratio_set(ds.images[0], ds.images, fields, normals[0], normals, ds.rotations, lcfg)
        history: dict = {}
        L = estimate_lighting(obs, normals[0].normals[normals[0].mask], cfg=lcfg, history=history)
    save_lighting(out / "light" / "lighting.json", L)
    resid = ratio_residuals(L, obs, lcfg.den_guard)
    edges, counts = residual_histogram(resid)
    with open(out / "light" / "residual_histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count_R", "count_G", "count_B"])
        for i in range(len(counts)):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), *(int(c) for c in counts[i])])
    stats = {
        "observations": len(obs),
        "frames_used": int(len(np.unique(obs.frame))) if len(obs) else 0,
        "final_objective": [float(history[ch][-1]) if history.get(ch) else None for ch in range(3)],
        "residual_rms": [float(np.sqrt(np.nanmean(resid[:, ch] ** 2))) for ch in range(3)],
    }
    write_json(out / "light" / "stats.json", stats)
    return L


def aligned_observations(ds: Dataset, fields: list[CorrespondenceField]) -> tuple[np.ndarray, np.ndarray]:
    """``(H, W, F, 3)`` intensities pulled through the correspondences and ``(H, W, F)`` validity."""
    H, W = ds.K.shape
    F = len(ds.images)
    intensities = np.zeros((H, W, F, 3))
    valid = np.zeros((H, W, F), bool)
    for k, (img, cf) in enumerate(zip(ds.images, fields)):
        vals, ok = sample_bilinear_many(img.pixels, img.mask, cf.q[..., 0], cf.q[..., 1])
        intensities[:, :, k] = np.where(ok[..., None], vals, 0.0)
        valid[:, :, k] = ok & cf.visible
    return intensities, valid


def run_recover(
    ds: Dataset, fields: list[CorrespondenceField], L: QuadraticLighting, cfg: PipelineConfig, out
) -> RecoveryResult:
    out = Path(out)
    (out / "recover").mkdir(parents=True, exist_ok=True)
    with stage("recover"):
        intensities, valid = aligned_observations(ds, fields)
        init = normals_from_depth(ds.depths[0], ds.K)
        res = recover_map(intensities, valid, ds.rotations, L, init, cfg.em, threads=cfg.threads)
    d = out / "recover"
    write_pfm(d / "normals.pfm", res.normals.normals)
    write_pfm(d / "albedo.pfm", res.albedo.albedo)
    write_pfm(d / "confidence.pfm", res.confidence)
    write_pfm(d / "weight.pfm", np.where(res.recovered, res.alpha, 0.0))
    # preview: scale so the 99th percentile of masked albedo maps to white
    a = res.albedo.albedo[res.albedo.mask]
    top = float(np.percentile(a, 99)) if a.size else 1.0
    write_color(d / "albedo.png", res.albedo.albedo / max(top, 1e-12))
    write_json(d / "stats.json", res.stats())
    return res


def load_recovery(ds: Dataset, out) -> tuple[NormalMap, np.ndarray, np.ndarray]:
    """Refined normals, albedo and integration weights from a previous recover stage."""
    d = Path(out) / "recover"
    if not (d / "normals.pfm").exists():
        raise ValidationError(f"no recovered normals under {d}; run the recover stage first")
    n = read_pfm(d / "normals.pfm")
    mask = ds.depths[0].mask & (np.linalg.norm(n, axis=-1) > 0.5)
    normals = NormalMap(np.where(mask[..., None], n, 0.0), mask)
    weight_path = d / "weight.pfm"
    weight = read_pfm(weight_path) if weight_path.exists() else read_pfm(d / "confidence.pfm")
    return normals, read_pfm(d / "albedo.pfm"), weight


def run_integrate(ds: Dataset, normals: NormalMap, weight: np.ndarray, cfg: PipelineConfig, out) -> IntegrationResult:
    out = Path(out)
    (out / "integrate").mkdir(parents=True, exist_ok=True)
    with stage("integrate"):
        res = integrate_normals(normals, ds.depths[0], weight, ds.K, cfg.integration)
        export_mesh(out / "integrate" / "mesh.ply", res.depth, ds.K)
    write_pfm(out / "integrate" / "depth.pfm", res.depth.depth)
    write_json(
        out / "integrate" / "stats.json",
        {
            "converged": res.converged,
            "iterations": res.iterations,
            "final_energy": res.energies[-1] if res.energies else None,
        },
    )
    return res


# --------------------------------------------------------------------------
# evaluation and the full run


def run_eval(ds: Dataset, out, erode: int = 3) -> dict:
    """Evaluate whatever stage outputs exist under ``out`` against the dataset's ground truth."""
    out = Path(out)
    gt = ds.ground_truth
    if gt is None:
        raise ValidationError("dataset has no ground truth")
    normals = albedo = depth = None
    rec = out / "recover"
    if (rec / "normals.pfm").exists():
        normals, alb, _ = load_recovery(ds, out)
        albedo = AlbedoMap(np.where(normals.mask[..., None], np.maximum(alb, 0.0), 0.0), normals.mask)
    if (out / "integrate" / "depth.pfm").exists():
        dep = read_pfm(out / "integrate" / "depth.pfm")
        depth = DepthMap(dep, ds.depths[0].mask & (dep > 0))
    if normals is None and depth is None:
        raise ValidationError(f"no recover or integrate results under {out}")
    with stage("eval"):
        metrics, maps = evaluate(normals, albedo, depth, gt.normals, gt.albedo, gt.depth, erode, prior_depth=ds.depths[0])
        if gt.lighting is not None and (out / "light" / "lighting.json").exists() and gt.normals is not None:
            L = load_lighting(out / "light" / "lighting.json")
            err = shading_alignment_error(L, gt.lighting, gt.normals.normals[gt.normals.mask])
            metrics["lighting_shading_rel_rms"] = [float(x) for x in err]
    write_report(out / "eval", metrics, maps)
    return metrics


def run_pipeline(ds: Dataset, cfg: PipelineConfig, out) -> dict:
    """match -> light -> recover -> integrate (-> eval when ground truth exists); writes ``metrics.json``.

    The metrics hold no timings, so identical reruns give identical files.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics: dict = {
        "schema_version": SCHEMA_VERSION,
        "frames": list(ds.frame_ids),
        "seed": cfg.seed,
        "stages": {},
    }

    def checkpoint(failed: str | None = None):
        if failed:
            metrics["failed_stage"] = failed
        write_json(out / "metrics.json", metrics)

    current = "match"
    try:
        # later stages read the stored (float32) artifacts so that a one-shot
        # run and a stage-by-stage run produce identical files
        run_match(ds, cfg, out)
        fields = load_matches(ds, out)
        metrics["stages"]["match"] = {
            "frames": [{"frame": fid, **cf.stats} for fid, cf in zip(ds.frame_ids, fields)],
        }
        current = "light"
        L = run_light(ds, fields, cfg, out)
        metrics["stages"]["light"] = read_json(out / "light" / "stats.json")
        current = "recover"
        rec = run_recover(ds, fields, L, cfg, out)
        metrics["stages"]["recover"] = rec.stats()
        current = "integrate"
        normals, _, weight = load_recovery(ds, out)
        run_integrate(ds, normals, weight, cfg, out)
        metrics["stages"]["integrate"] = read_json(out / "integrate" / "stats.json")
        if ds.ground_truth is not None:
            current = "eval"
            metrics["evaluation"] = run_eval(ds, out)
    except PhotorefineError:
        checkpoint(current)
        raise
    checkpoint()
    return metrics


def load(dataset, frames: str | None = None) -> Dataset:
    with stage("load"):
        return load_dataset(dataset, frames)
