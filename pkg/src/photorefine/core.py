"""Image and geometry types plus the pinhole warp.

Conventions used throughout the package:

* pixel ``(u, v)`` is ``(column, row)``; the origin is the centre of the
  top-left pixel;
* camera coordinates have +x right, +y down, +z into the scene;
* depth is z-depth (not ray length);
* normals are unit vectors in camera coordinates pointing back toward the
  camera, so visible surfaces have ``n_z < 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonPositiveDepth, Unsampleable, ValidationError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(u, v)`` coordinate arrays of shape ``(height, width)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(float), v.astype(float)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            int(d["width"]),
            int(d["height"]),
        )


@dataclass(frozen=True)
class RigidPose:
    """Maps reference-camera points ``X`` to frame points ``R @ X + T``."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        T = np.array(self.T, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(T)):
            raise ValidationError("pose entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValidationError("R is not a rotation matrix")
        R.flags.writeable = False
        T.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidPose":
        return RigidPose(self.R.T, -self.R.T @ self.T)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return the pose applying ``other`` first, then ``self``."""
        return RigidPose(self.R @ other.R, self.R @ other.T + self.T)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.T


def _readonly(a: np.ndarray, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RadianceImage:
    pixels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        px = _readonly(self.pixels)
        mask = _readonly(self.mask, bool)
        if px.ndim != 3 or px.shape[2] != 3 or mask.shape != px.shape[:2]:
            raise ValidationError("expected HxWx3 pixels with an HxW mask")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValidationError("radiance values must be finite and in [0, 1]")
        if not mask.any():
            raise ValidationError("radiance mask is empty")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        depth = _readonly(self.depth)
        mask = _readonly(self.mask, bool)
        if depth.ndim != 2 or mask.shape != depth.shape:
            raise ValidationError("expected HxW depth with an HxW mask")
        d = depth[mask]
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValidationError("masked depths must be finite and positive")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class NormalMap:
    normals: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        n = _readonly(self.normals)
        mask = _readonly(self.mask, bool)
        if n.ndim != 3 or n.shape[2] != 3 or mask.shape != n.shape[:2]:
            raise ValidationError("expected HxWx3 normals with an HxW mask")
        if mask.any():
            norms = np.linalg.norm(n[mask], axis=1)
            if not np.all(np.abs(norms - 1) <= 1e-6):
                raise ValidationError("masked normals must be unit length")
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class AlbedoMap:
    albedo: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        a = _readonly(self.albedo)
        mask = _readonly(self.mask, bool)
        if a.ndim != 3 or a.shape[2] != 3 or mask.shape != a.shape[:2]:
            raise ValidationError("expected HxWx3 albedo with an HxW mask")
        vals = a[mask]
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValidationError("masked albedo must be finite and non-negative")
        object.__setattr__(self, "albedo", a)
        object.__setattr__(self, "mask", mask)


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    in_frame: bool


def backproject(u, v, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixels with z-depth to camera points, shape ``(..., 3)``."""
    u, v, depth = np.broadcast_arrays(
        np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float)
    )
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


def project(points: np.ndarray, K: CameraIntrinsics):
    """Pinhole projection of camera points; returns ``(u, v, z)``."""
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * points[..., 0] / z + K.cx
        v = K.fy * points[..., 1] / z + K.cy
    return u, v, z


def in_bounds(u, v, K: CameraIntrinsics) -> np.ndarray:
    return (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)


def project_points(u, v, depth, K: CameraIntrinsics, pose: RigidPose):
    """Vectorised warp of reference pixels into another frame.

    Returns ``(qu, qv, lam)`` where ``lam`` is the depth of the transformed
    point. Entries whose transformed depth is not positive come back as NaN.
    """
    X = pose.apply(backproject(u, v, depth, K))
    qu, qv, lam = project(X, K)
    bad = ~(lam > 0)
    if np.any(bad):
        qu = np.where(bad, np.nan, qu)
        qv = np.where(bad, np.nan, qv)
    return qu, qv, lam


def project_pixel(p, depth: float, K: CameraIntrinsics, pose: RigidPose) -> Projection:
    """Warp a single reference pixel ``p = (u, v)`` with depth into a frame.

    Raises:
        NonPositiveDepth: the input depth or the transformed depth is <= 0.
    """
    if not depth > 0:
        raise NonPositiveDepth(f"input depth {depth} is not positive")
    X = pose.apply(backproject(p[0], p[1], depth, K))
    if X[2] <= 0:
        raise NonPositiveDepth(f"transformed depth {X[2]} is not positive")
    qu, qv, lam = project(X, K)
    return Projection(float(qu), float(qv), float(lam), bool(in_bounds(qu, qv, K)))


def sample_bilinear_many(values: np.ndarray, mask: np.ndarray, qu, qv):
    """Mask-weighted bilinear interpolation at many subpixel positions.

    Args:
        values: ``(H, W)`` or ``(H, W, C)`` array.
        mask: ``(H, W)`` validity mask; unmasked neighbours get weight 0 and
            the remaining weights are renormalised.
        qu, qv: query coordinates (any matching shapes).

    Returns:
        ``(samples, ok)``: samples with shape ``qu.shape + (C,)`` (or
        ``qu.shape`` for 2-D input) and a boolean array flagging queries that
        are in bounds with at least one masked neighbour. Failed samples are 0.
    """
    qu = np.asarray(qu, float)
    qv = np.asarray(qv, float)
    H, W = mask.shape
    scalar_channels = values.ndim == 2
    vals = values[..., None] if scalar_channels else values

    finite = np.isfinite(qu) & np.isfinite(qv)
    inb = finite & (qu >= 0) & (qu <= W - 1) & (qv >= 0) & (qv <= H - 1)
    uu = np.where(inb, qu, 0.0)
    vv = np.where(inb, qv, 0.0)
    u0 = np.minimum(np.floor(uu).astype(int), W - 2) if W > 1 else np.zeros(uu.shape, int)
    v0 = np.minimum(np.floor(vv).astype(int), H - 2) if H > 1 else np.zeros(vv.shape, int)
    fu = uu - u0
    fv = vv - v0
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)

    out = np.zeros(qu.shape + (vals.shape[2],))
    wsum = np.zeros(qu.shape)
    for vi, ui, w in (
        (v0, u0, (1 - fu) * (1 - fv)),
        (v0, u1, fu * (1 - fv)),
        (v1, u0, (1 - fu) * fv),
        (v1, u1, fu * fv),
    ):
        w = w * mask[vi, ui] * inb
        out += w[..., None] * vals[vi, ui]
        wsum += w
    ok = inb & (wsum > 1e-12)
    out = np.where(ok[..., None], out / np.where(ok, wsum, 1.0)[..., None], 0.0)
    if scalar_channels:
        out = out[..., 0]
    return out, ok


def sample_bilinear(img: RadianceImage, q) -> np.ndarray:
    """Sample one RGB value at subpixel ``q = (u, v)``.

    Raises:
        Unsampleable: ``q`` is out of bounds or all four neighbours are
            outside the mask.
    """
    val, ok = sample_bilinear_many(img.pixels, img.mask, np.array(q[0]), np.array(q[1]))
    if not ok:
        raise Unsampleable(f"no masked neighbour around {tuple(q)}")
    return val


def normals_from_depth(d: DepthMap, K: CameraIntrinsics) -> NormalMap:
    """Per-pixel normals from the backprojected depth surface.

    Tangents use central differences with a one-pixel stride, falling back
    to a one-sided difference when one neighbour is outside the mask. Pixels
    lacking both neighbours along either axis are left invalid.
    """
    H, W = d.shape
    u, v = K.pixel_grid()
    P = backproject(u, v, np.where(d.mask, d.depth, 1.0), K)
    m = d.mask

    def tangent(axis):
        fwd = np.zeros_like(m)
        bwd = np.zeros_like(m)
        Pf = np.zeros_like(P)
        Pb = np.zeros_like(P)
        if axis == 1:
            fwd[:, :-1] = m[:, 1:]
            bwd[:, 1:] = m[:, :-1]
            Pf[:, :-1] = P[:, 1:]
            Pb[:, 1:] = P[:, :-1]
        else:
            fwd[:-1] = m[1:]
            bwd[1:] = m[:-1]
            Pf[:-1] = P[1:]
            Pb[1:] = P[:-1]
        hi = np.where(fwd[..., None], Pf, P)
        lo = np.where(bwd[..., None], Pb, P)
        return hi - lo, (fwd | bwd)

    tu, ok_u = tangent(1)
    tv, ok_v = tangent(0)
    n = np.cross(tv, tu)
    norm = np.linalg.norm(n, axis=-1)
    valid = m & ok_u & ok_v & (norm > 0)
    n = np.where(valid[..., None], n / np.where(valid, norm, 1.0)[..., None], 0.0)
    # orient toward the camera
    flip = np.sum(n * P, axis=-1) > 0
    n = np.where(flip[..., None], -n, n)
    return NormalMap(n, valid)


def angular_error_deg(n1: np.ndarray, n2: np.ndarray) -> np.ndarray:
    """Angle in degrees between unit vectors along the last axis."""
    cos = np.clip(np.sum(n1 * n2, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation; ``angle`` in radians."""
    axis = np.asarray(axis, float)
    norm = np.linalg.norm(axis)
    if norm == 0 or angle == 0:
        return np.eye(3)
    k = axis / norm
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)


def rotation_angle_deg(R: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0))))
