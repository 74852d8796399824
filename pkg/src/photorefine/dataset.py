"""Dataset manifests: intrinsics, per-frame files and poses, optional ground truth.

Layout written by :func:`write_dataset` (paths in the manifest are relative
to its directory)::

    manifest.json
    frames/color_000.pfm  depth_000.pfm  mask_000.pgm  ...
    gt/normals.pfm  albedo.pfm  depth.pfm  lighting.json  mask.pgm

``manifest.json``::

    {"intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
     "frames": [{"color_path", "depth_path", "mask_path",
                 "R": [9 floats, row-major], "T": [3 floats]}, ...],
     "ground_truth": {"normals", "albedo", "depth", "lighting", "mask"},   # optional
     "synthetic": {...}}                                                 # optional, informational
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AlbedoMap, CameraIntrinsics, DepthMap, NormalMap, RadianceImage, RigidPose
from .errors import ValidationError
from .fileio import read_color, read_json, read_mask, read_pfm, write_json, write_mask, write_pfm
from .shading import QuadraticLighting, load_lighting, save_lighting


@dataclass(frozen=True)
class FrameRecord:
    color_path: str
    depth_path: str
    mask_path: str
    pose: RigidPose


@dataclass(frozen=True)
class GroundTruth:
    normals: NormalMap | None = None
    albedo: AlbedoMap | None = None
    depth: DepthMap | None = None
    lighting: QuadraticLighting | None = None


@dataclass
class Dataset:
    root: Path
    K: CameraIntrinsics
    images: list[RadianceImage]
    depths: list[DepthMap]
    poses: list[RigidPose]
    frame_ids: list[int]
    ground_truth: GroundTruth | None = None
    info: dict = field(default_factory=dict)

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([p.R for p in self.poses])


def parse_frame_range(spec: str | None, n_frames: int) -> list[int]:
    """Parse ``"0-9,12"`` style selections; frame 0 (the reference) is always kept."""
    if spec is None or spec.strip() == "":
        return list(range(n_frames))
    chosen = set()
    for part in spec.split(","):
        part = part.strip()
        try:
            if "-" in part:
                a, b = (int(x) for x in part.split("-", 1))
                chosen.update(range(a, b + 1))
            else:
                chosen.add(int(part))
        except ValueError as exc:
            raise ValidationError(f"malformed frame range {spec!r}") from exc
    bad = [k for k in chosen if not 0 <= k < n_frames]
    if bad:
        raise ValidationError(f"frames {sorted(bad)} are outside 0..{n_frames - 1}")
    chosen.add(0)
    return sorted(chosen)


def _pose_from_entry(entry: dict, k: int) -> RigidPose:
    try:
        R = np.asarray(entry["R"], float).reshape(3, 3)
        T = np.asarray(entry["T"], float).reshape(3)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"frame {k}: pose needs R (9 floats) and T (3 floats)") from exc
    try:
        return RigidPose(R, T)
    except ValidationError as exc:
        raise ValidationError(f"frame {k}: {exc}") from exc


def read_manifest(root) -> tuple[dict, CameraIntrinsics, list[FrameRecord]]:
    root = Path(root)
    path = root / "manifest.json" if root.is_dir() else root
    if not path.exists():
        raise ValidationError(f"no manifest at {path}")
    data = read_json(path)
    try:
        K = CameraIntrinsics.from_dict(data["intrinsics"])
        entries = data["frames"]
    except KeyError as exc:
        raise ValidationError(f"manifest lacks {exc}") from exc
    if not entries:
        raise ValidationError("manifest lists no frames")
    records = []
    for k, e in enumerate(entries):
        for key in ("color_path", "depth_path", "mask_path"):
            if key not in e:
                raise ValidationError(f"frame {k}: missing {key}")
            if not (path.parent / e[key]).exists():
                raise ValidationError(f"frame {k}: {key} {e[key]} does not exist")
        records.append(FrameRecord(e["color_path"], e["depth_path"], e["mask_path"], _pose_from_entry(e, k)))
    p0 = records[0].pose
    if not (np.allclose(p0.R, np.eye(3), atol=1e-9) and np.allclose(p0.T, 0.0, atol=1e-9)):
        raise ValidationError("frame 0 pose must be the identity")
    return data, K, records


def load_dataset(root, frames: str | None = None, inverse_gamma: bool = False) -> Dataset:
    """Load and validate a dataset directory (or manifest path)."""
    root = Path(root)
    data, K, records = read_manifest(root)
    base = root if root.is_dir() else root.parent
    ids = parse_frame_range(frames, len(records))
    images, depths = [], []
    for k in ids:
        rec = records[k]
        try:
            mask = read_mask(base / rec.mask_path)
            pix = read_color(base / rec.color_path, inverse_gamma=inverse_gamma)
            dep = read_pfm(base / rec.depth_path)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"frame {k}: cannot read inputs ({exc})") from exc
        if pix.shape[:2] != K.shape or dep.shape != K.shape or mask.shape != K.shape:
            raise ValidationError(f"frame {k}: image size does not match the intrinsics")
        mask = mask & np.isfinite(dep) & (dep > 0)
        try:
            images.append(RadianceImage(np.clip(np.nan_to_num(pix), 0.0, 1.0), mask))
            depths.append(DepthMap(np.where(mask, dep, 0.0), mask))
        except ValidationError as exc:
            raise ValidationError(f"frame {k}: {exc}") from exc
    gt = None
    if "ground_truth" in data:
        g = data["ground_truth"]
        gmask = read_mask(base / g["mask"]) if "mask" in g else images[0].mask
        gt = GroundTruth(
            normals=NormalMap(read_pfm(base / g["normals"]), gmask) if "normals" in g else None,
            albedo=AlbedoMap(np.maximum(read_pfm(base / g["albedo"]), 0.0), gmask) if "albedo" in g else None,
            depth=DepthMap(read_pfm(base / g["depth"]), gmask) if "depth" in g else None,
            lighting=load_lighting(base / g["lighting"]) if "lighting" in g else None,
        )
    return Dataset(base, K, images, depths, [records[k].pose for k in ids], ids, gt, data.get("synthetic", {}))


def write_dataset(
    root,
    K: CameraIntrinsics,
    images: list[RadianceImage],
    depths: list[DepthMap],
    poses: list[RigidPose],
    ground_truth: GroundTruth | None = None,
    info: dict | None = None,
) -> Path:
    """Write images, depths, masks and the manifest; returns the manifest path."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (img, dep, pose) in enumerate(zip(images, depths, poses)):
        names = {key: f"frames/{key}_{k:03d}.{ext}" for key, ext in (("color", "pfm"), ("depth", "pfm"), ("mask", "pgm"))}
        write_pfm(root / names["color"], img.pixels)
        write_pfm(root / names["depth"], dep.depth)
        write_mask(root / names["mask"], img.mask & dep.mask)
        entries.append(
            {
                "color_path": names["color"],
                "depth_path": names["depth"],
                "mask_path": names["mask"],
                "R": pose.R.ravel().tolist(),
                "T": pose.T.tolist(),
            }
        )
    manifest = {"intrinsics": K.to_dict(), "frames": entries}
    if ground_truth is not None:
        (root / "gt").mkdir(exist_ok=True)
        g = {}
        mask = None
        if ground_truth.normals is not None:
            write_pfm(root / "gt/normals.pfm", ground_truth.normals.normals)
            g["normals"] = "gt/normals.pfm"
            mask = ground_truth.normals.mask
        if ground_truth.albedo is not None:
            write_pfm(root / "gt/albedo.pfm", ground_truth.albedo.albedo)
            g["albedo"] = "gt/albedo.pfm"
            mask = ground_truth.albedo.mask if mask is None else mask
        if ground_truth.depth is not None:
            write_pfm(root / "gt/depth.pfm", ground_truth.depth.depth)
            g["depth"] = "gt/depth.pfm"
            mask = ground_truth.depth.mask if mask is None else mask
        if ground_truth.lighting is not None:
            save_lighting(root / "gt/lighting.json", ground_truth.lighting)
            g["lighting"] = "gt/lighting.json"
        if mask is not None:
            write_mask(root / "gt/mask.pgm", mask)
            g["mask"] = "gt/mask.pgm"
        manifest["ground_truth"] = g
    if info:
        manifest["synthetic"] = info
    path = root / "manifest.json"
    write_json(path, manifest)
    return path
