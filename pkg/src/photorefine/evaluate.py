"""Error metrics against ground truth, CSV reports and false-colour error maps."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import AlbedoMap, DepthMap, NormalMap, angular_error_deg
from .errors import ValidationError

DEFAULT_ERODE = 3


def evaluation_region(mask: np.ndarray, erode: int = DEFAULT_ERODE) -> np.ndarray:
    """The mask shrunk by ``erode`` pixels, which drops the silhouette band."""
    mask = np.asarray(mask, bool)
    if erode <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, iterations=erode)


def _check(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: result shape {a.shape} differs from ground truth {b.shape}")


def normal_error_map(est: NormalMap, gt: NormalMap) -> np.ndarray:
    _check(est.normals, gt.normals, "normals")
    return angular_error_deg(est.normals, gt.normals)


def scale_aligned_albedo_error(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-channel relative RMS of ``s * est - gt`` with the least-squares ``s`` per channel.

    Inputs are ``(N, 3)`` samples; the output is ``(3,)``.
    """
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    den = np.sum(est * est, axis=0)
    s = np.where(den > 0, np.sum(est * gt, axis=0) / np.where(den > 0, den, 1.0), 0.0)
    resid = est * s - gt
    norm = np.sqrt(np.mean(gt * gt, axis=0))
    return np.sqrt(np.mean(resid * resid, axis=0)) / np.where(norm > 0, norm, 1.0)


def depth_rmse(est: DepthMap, gt: DepthMap, region: np.ndarray) -> float:
    _check(est.depth, gt.depth, "depth")
    sel = region & est.mask & gt.mask
    if not sel.any():
        raise ValidationError("depth maps share no valid pixels in the evaluation region")
    d = est.depth[sel] - gt.depth[sel]
    return float(np.sqrt(np.mean(d * d)))


def false_color(values: np.ndarray, mask: np.ndarray, vmax: float) -> np.ndarray:
    """Map ``[0, vmax]`` onto a blue-cyan-yellow-red ramp; unmasked pixels are black."""
    stops = np.array([[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    t = np.clip(np.nan_to_num(values) / max(vmax, 1e-12), 0.0, 1.0) * (len(stops) - 1)
    i = np.minimum(t.astype(int), len(stops) - 2)
    f = (t - i)[..., None]
    rgb = stops[i] * (1 - f) + stops[i + 1] * f
    rgb[~mask] = 0.0
    return np.round(rgb * 255).astype(np.uint8)


def write_error_png(path, values: np.ndarray, mask: np.ndarray, vmax: float) -> None:
    Image.fromarray(false_color(values, mask, vmax), mode="RGB").save(path)


def evaluate(
    normals: NormalMap | None,
    albedo: AlbedoMap | None,
    depth: DepthMap | None,
    gt_normals: NormalMap | None,
    gt_albedo: AlbedoMap | None,
    gt_depth: DepthMap | None,
    erode: int = DEFAULT_ERODE,
    prior_depth: DepthMap | None = None,
) -> tuple[dict, dict]:
    """Compare results with ground truth on the eroded ground-truth mask.

    Any pair with a missing side is skipped. Returns ``(metrics, maps)``
    where ``maps`` holds per-pixel error images for rendering.
    """
    gt_mask = next((g.mask for g in (gt_normals, gt_albedo, gt_depth) if g is not None), None)
    if gt_mask is None:
        raise ValidationError("no ground truth to evaluate against")
    region = evaluation_region(gt_mask, erode)
    metrics: dict = {"erode_px": int(erode)}
    maps: dict = {}
    if normals is not None and gt_normals is not None:
        err = normal_error_map(normals, gt_normals)
        sel = region & normals.mask & gt_normals.mask
        if not sel.any():
            raise ValidationError("normal maps share no valid pixels in the evaluation region")
        metrics["normal_pixels"] = int(sel.sum())
        metrics["normal_mean_deg"] = float(err[sel].mean())
        metrics["normal_median_deg"] = float(np.median(err[sel]))
        maps["normal_error"] = (np.where(sel, err, 0.0), sel, 10.0)
    if albedo is not None and gt_albedo is not None:
        _check(albedo.albedo, gt_albedo.albedo, "albedo")
        sel = region & albedo.mask & gt_albedo.mask
        if not sel.any():
            raise ValidationError("albedo maps share no valid pixels in the evaluation region")
        rel = scale_aligned_albedo_error(albedo.albedo[sel], gt_albedo.albedo[sel])
        metrics["albedo_rel_rms"] = [float(x) for x in rel]
        est = albedo.albedo[sel]
        g = gt_albedo.albedo[sel]
        den = np.sum(est * est, axis=0)
        s = np.where(den > 0, np.sum(est * g, axis=0) / np.where(den > 0, den, 1.0), 0.0)
        e = np.zeros(gt_mask.shape)
        e[sel] = np.linalg.norm(est * s - g, axis=1)
        maps["albedo_error"] = (e, sel, 0.1)
    if depth is not None and gt_depth is not None:
        metrics["depth_rmse_m"] = depth_rmse(depth, gt_depth, region)
        sel = region & depth.mask & gt_depth.mask
        maps["depth_error"] = (np.where(sel, np.abs(depth.depth - gt_depth.depth), 0.0), sel, 0.01)
        if prior_depth is not None:
            metrics["prior_depth_rmse_m"] = depth_rmse(prior_depth, gt_depth, region)
    return metrics, maps


def write_report(out_dir, metrics: dict, maps: dict) -> None:
    """``report.csv`` (metric, channel, value) plus one PNG per error map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "channel", "value"])
        for key, value in metrics.items():
            if isinstance(value, list):
                for ch, v in zip("RGB", value):
                    w.writerow([key, ch, repr(v)])
            else:
                w.writerow([key, "", repr(value)])
    for name, (values, mask, vmax) in maps.items():
        write_error_png(out / f"{name}.png", values, mask, vmax)
