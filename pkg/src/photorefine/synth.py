"""Ground-truth RGB-D key-frame sequences of analytic Lambertian objects.

The object moves rigidly in front of a fixed camera under fixed distant
lighting. Frame ``k`` sees reference-frame points ``X`` at ``R_k X + T_k``
and a reference normal ``n`` as ``R_k n``, so its radiance is
``albedo(X) * shade(L, R_k n)``. Every pixel is ray cast against the
analytic surface, which gives exact depths and normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import (
    AlbedoMap,
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    RadianceImage,
    RigidPose,
    rotation_from_axis_angle,
)
from .errors import SurfaceOutOfFrustum, ValidationError
from .shading import QuadraticLighting, directional_plus_ambient, shade_many


# --------------------------------------------------------------------------
# surfaces


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 1.5)
    radius: float = 0.5

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        t0, _ = _ray_sphere(o, d, np.asarray(self.center), self.radius)
        return t0

    def normal(self, x: np.ndarray) -> np.ndarray:
        r = x - np.asarray(self.center)
        return r / np.linalg.norm(r, axis=-1, keepdims=True)


@dataclass(frozen=True)
class BumpySphere:
    """Sphere with radial displacement ``amplitude * h(direction)``.

    ``h(u) = (sin(f u_x) + sin(f u_y) + sin(f u_z)) / 3`` with ``f`` the
    frequency, so ``|h| <= 1`` and ``amplitude`` bounds the displacement.
    """

    center: tuple = (0.0, 0.0, 1.5)
    radius: float = 0.5
    amplitude: float = 0.01
    frequency: float = 8.0
    march_steps: int = 160

    def _h(self, u):
        f = self.frequency
        return np.sum(np.sin(f * u), axis=-1) / 3.0

    def _implicit(self, x):
        r = x - np.asarray(self.center)
        rho = np.linalg.norm(r, axis=-1)
        u = r / rho[..., None]
        return rho - self.radius - self.amplitude * self._h(u)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        t_in, t_out = _ray_sphere(o, d, c, self.radius + self.amplitude)
        hit = np.isfinite(t_in)
        t = np.full(len(o), np.nan)
        if not hit.any():
            return t
        oh, dh, a, b = o[hit], d[hit], t_in[hit], t_out[hit]
        s = np.linspace(0.0, 1.0, self.march_steps)
        ts = a[:, None] + (b - a)[:, None] * s[None, :]
        F = self._implicit(oh[:, None, :] + ts[..., None] * dh[:, None, :])
        inside = F < 0
        found = inside.any(axis=1)
        idx = np.argmax(inside, axis=1)
        lo = ts[np.arange(len(ts)), np.maximum(idx - 1, 0)]
        hi = ts[np.arange(len(ts)), idx]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            Fm = self._implicit(oh + mid[:, None] * dh)
            outside = Fm > 0
            lo = np.where(outside, mid, lo)
            hi = np.where(outside, hi, mid)
        th = np.where(found & (idx > 0), 0.5 * (lo + hi), np.nan)
        t[hit] = th
        return t

    def normal(self, x: np.ndarray) -> np.ndarray:
        r = x - np.asarray(self.center)
        rho = np.linalg.norm(r, axis=-1, keepdims=True)
        u = r / rho
        grad_u = self.frequency * np.cos(self.frequency * u) / 3.0
        tangential = grad_u - np.sum(grad_u * u, axis=-1, keepdims=True) * u
        g = u - (self.amplitude / rho) * tangential
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def base_sphere(self) -> Sphere:
        return Sphere(self.center, self.radius)


@dataclass(frozen=True)
class Plane:
    """Square planar patch facing ``normal`` (outward, toward the viewer)."""

    center: tuple = (0.0, 0.0, 1.5)
    normal_dir: tuple = (0.0, 0.0, -1.0)
    half_size: float = 0.6

    def _frame(self):
        n = np.asarray(self.normal_dir, float)
        n = n / np.linalg.norm(n)
        a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(n, a)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return n, e1, e2

    def intersect(self, o, d):
        n, e1, e2 = self._frame()
        c = np.asarray(self.center, float)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        x = o + t[:, None] * d
        inside = (np.abs((x - c) @ e1) <= self.half_size) & (np.abs((x - c) @ e2) <= self.half_size)
        return np.where(inside & (t > 0) & (np.abs(denom) > 1e-12), t, np.nan)

    def normal(self, x):
        n, _, _ = self._frame()
        return np.broadcast_to(n, x.shape).copy()


def _ray_sphere(o, d, c, radius):
    oc = o - c
    a = np.sum(d * d, axis=-1)
    b = 2 * np.sum(oc * d, axis=-1)
    cc = np.sum(oc * oc, axis=-1) - radius**2
    disc = b * b - 4 * a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = np.where(ok, (-b - sq) / (2 * a), np.nan)
    t1 = np.where(ok, (-b + sq) / (2 * a), np.nan)
    t0 = np.where(t0 > 0, t0, np.nan)
    return t0, t1


# --------------------------------------------------------------------------
# albedo


@dataclass(frozen=True)
class AlbedoSpec:
    """Procedural reflectance attached to the object.

    kinds:
        ``constant``: ``colors[0]`` everywhere.
        ``checker``: 3-D checker of ``colors[0]``/``colors[1]`` with cell
            ``cell`` metres; ``softness`` > 0 blends across cell edges.
        ``patches``: Voronoi regions on the direction from ``anchor``, one
            colour each (sharp boundaries).
        ``patches_checker``: patches modulated by a per-channel chroma
            checker so every region carries chromatic texture.
    """

    kind: str = "patches_checker"
    colors: tuple = (
        (0.80, 0.55, 0.40),
        (0.45, 0.70, 0.50),
        (0.50, 0.55, 0.80),
        (0.75, 0.70, 0.45),
        (0.70, 0.45, 0.65),
        (0.55, 0.70, 0.72),
    )
    cell: float = 0.06
    softness: float = 0.25
    modulation: tuple = ((1.0, 0.80, 0.90), (0.82, 1.0, 0.86))
    anchor: tuple = (0.0, 0.0, 1.5)
    seed: int = 7

    def __post_init__(self):
        if self.kind not in ("constant", "checker", "patches", "patches_checker"):
            raise ValidationError(f"unknown albedo kind {self.kind!r}")

    def _checker(self, x):
        y = (x - np.asarray(self.anchor)) * (math.pi / self.cell)
        s = np.sin(y[..., 0]) * np.sin(y[..., 1]) * np.sin(y[..., 2])
        if self.softness <= 0:
            return (s > 0).astype(float)
        return 0.5 + 0.5 * np.tanh(s / self.softness)

    def _patch_colors(self, x):
        rng = np.random.default_rng(self.seed)
        cols = np.asarray(self.colors, float)
        anchors = rng.normal(size=(len(cols), 3))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
        r = x - np.asarray(self.anchor)
        u = r / np.maximum(np.linalg.norm(r, axis=-1, keepdims=True), 1e-12)
        return cols[np.argmax(u @ anchors.T, axis=-1)]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        cols = np.asarray(self.colors, float)
        if self.kind == "constant":
            return np.broadcast_to(cols[0], x.shape).copy()
        if self.kind == "checker":
            t = self._checker(x)[..., None]
            return t * cols[0] + (1 - t) * cols[1]
        base = self._patch_colors(x)
        if self.kind == "patches":
            return base
        m = np.asarray(self.modulation, float)
        t = self._checker(x)[..., None]
        return base * (t * m[0] + (1 - t) * m[1])


# --------------------------------------------------------------------------
# scene and rendering


def default_intrinsics(size: int = 128) -> CameraIntrinsics:
    return CameraIntrinsics(120.0 * size / 128, 120.0 * size / 128, (size - 1) / 2, (size - 1) / 2, size, size)


def default_lighting() -> QuadraticLighting:
    """One dominant directional light from the upper left plus ambient, slightly warm."""
    tint = np.array([1.0, 0.96, 0.9])
    return directional_plus_ambient((-0.45, -0.55, -0.70), 0.62 * tint, 0.22 * tint)


def orbit_poses(
    n_frames: int = 20,
    step_deg: float = 3.0,
    axis=(0.35, 1.0, 0.25),
    center=(0.0, 0.0, 1.5),
) -> list[RigidPose]:
    """Rotation about ``axis`` through ``center`` by ``k * step_deg`` for frame ``k``."""
    c = np.asarray(center, float)
    poses = []
    for k in range(n_frames):
        R = rotation_from_axis_angle(axis, math.radians(step_deg * k))
        poses.append(RigidPose(R, c - R @ c) if k else RigidPose.identity())
    return poses


def wobble_poses(
    n_frames: int = 20,
    yaw_deg: float = 25.0,
    pitch_deg: float = 25.0,
    center=(0.0, 0.0, 1.5),
) -> list[RigidPose]:
    """Hand-held style two-axis wobble about ``center``.

    Frame ``k`` turns by ``yaw * sin(t)`` about the vertical axis and then by
    ``pitch * sin(2t)`` about the horizontal axis, ``t = 2 pi k / n_frames``.
    A single fixed rotation axis leaves each pixel's normal poorly
    constrained (the observed shading traces a short arc); mixing two axes
    fixes that.
    """
    c = np.asarray(center, float)
    poses = []
    for k in range(n_frames):
        t = 2 * math.pi * k / n_frames
        Ry = rotation_from_axis_angle((0.0, 1.0, 0.0), math.radians(yaw_deg * math.sin(t)))
        Rx = rotation_from_axis_angle((1.0, 0.0, 0.0), math.radians(pitch_deg * math.sin(2 * t)))
        R = Rx @ Ry
        poses.append(RigidPose(R, c - R @ c) if k else RigidPose.identity())
    return poses


@dataclass(frozen=True)
class SyntheticScene:
    surface: object = field(default_factory=BumpySphere)
    albedo_spec: AlbedoSpec = field(default_factory=AlbedoSpec)
    lighting: QuadraticLighting = field(default_factory=default_lighting)
    poses: Sequence[RigidPose] = field(default_factory=wobble_poses)
    K: CameraIntrinsics = field(default_factory=default_intrinsics)

    def __post_init__(self):
        p0 = self.poses[0]
        if not (np.allclose(p0.R, np.eye(3), atol=1e-12) and np.allclose(p0.T, 0, atol=1e-12)):
            raise ValidationError("frame 0 pose must be the identity")


@dataclass(frozen=True)
class SyntheticFrame:
    image: RadianceImage
    depth: DepthMap
    normals: NormalMap
    albedo: AlbedoMap
    points: np.ndarray  # (H, W, 3) surface points in reference coordinates
    pose: RigidPose


def _camera_rays(K: CameraIntrinsics):
    u, v = K.pixel_grid()
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    return d.reshape(-1, 3)


def render_frame(scene: SyntheticScene, pose: RigidPose) -> SyntheticFrame:
    K = scene.K
    H, W = K.height, K.width
    dk = _camera_rays(K)
    o = np.broadcast_to(-pose.R.T @ pose.T, dk.shape)
    d = dk @ pose.R  # rows of R^T d_k
    t = np.full(len(dk), np.nan)
    for s in range(0, len(dk), 4096):
        t[s : s + 4096] = scene.surface.intersect(np.ascontiguousarray(o[s : s + 4096]), d[s : s + 4096])
    mask = np.isfinite(t)
    if not mask.any():
        raise SurfaceOutOfFrustum("surface not visible")
    mask2 = mask.reshape(H, W)
    if mask2[0].any() or mask2[-1].any() or mask2[:, 0].any() or mask2[:, -1].any():
        raise SurfaceOutOfFrustum("surface touches the image border")

    X = np.zeros((len(dk), 3))
    X[mask] = o[mask] + t[mask, None] * d[mask]
    n_ref = np.zeros_like(X)
    n_ref[mask] = scene.surface.normal(X[mask])
    n_k = n_ref @ pose.R.T
    rho = np.zeros_like(X)
    rho[mask] = scene.albedo_spec.evaluate(X[mask])
    img = np.zeros_like(X)
    img[mask] = rho[mask] * shade_many(scene.lighting, n_k[mask])
    if img.min() < 0 or img.max() > 1:
        raise ValidationError("scene radiance leaves [0, 1]; lower the light or albedo")

    depth = np.where(mask, t, 0.0).reshape(H, W)
    return SyntheticFrame(
        RadianceImage(img.reshape(H, W, 3), mask2),
        DepthMap(depth, mask2),
        NormalMap(n_k.reshape(H, W, 3), mask2),
        AlbedoMap(rho.reshape(H, W, 3), mask2),
        X.reshape(H, W, 3),
        pose,
    )


def render_sequence(scene: SyntheticScene) -> list[SyntheticFrame]:
    """Ray cast every key frame of the scene."""
    return [render_frame(scene, pose) for pose in scene.poses]


# --------------------------------------------------------------------------
# degradations


def smooth_depth(d: DepthMap, sigma: float = 4.0, iterations: int = 1, order: int = 2) -> DepthMap:
    """Mask-respecting Gaussian smoothing of a depth map.

    Each pass fits a Gaussian-weighted local polynomial of degree ``order``
    (0, 1 or 2) to the masked depths around every pixel and keeps its value
    at the centre (normalised convolution). Degree 0 is plain normalised
    Gaussian smoothing. Degree 1 reproduces planes and removes the border
    bias on slanted surfaces. Degree 2 also reproduces quadrics, so the gross
    shape of a sphere survives while detail at the scale of ``sigma`` is
    removed.
    """
    if sigma <= 0 or iterations <= 0:
        return d
    if order not in (0, 1, 2):
        raise ValidationError("smoothing order must be 0, 1 or 2")
    exps = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)][: (1, 3, 6)[order]]
    r = int(math.ceil(3 * sigma))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1].astype(float)
    kern = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    dx, dy = dx / sigma, dy / sigma  # unit-scale local coordinates for conditioning

    def corr(a, ex, ey):
        return ndimage.correlate(a, kern * dx**ex * dy**ey, mode="constant")

    m = d.mask.astype(float)
    nb = len(exps)
    M = np.zeros(d.shape + (nb, nb))
    for i, (ai, bi) in enumerate(exps):
        for j, (aj, bj) in enumerate(exps[i:], start=i):
            M[..., i, j] = M[..., j, i] = corr(m, ai + aj, bi + bj)
    ok = d.mask & (np.abs(np.linalg.det(np.where(d.mask[..., None, None], M, np.eye(nb)))) > 1e-9)

    out = np.where(d.mask, d.depth, 0.0)
    for _ in range(iterations):
        rhs = np.stack([corr(m * out, a, b) for a, b in exps], axis=-1)
        new = np.zeros(d.shape)
        new[ok] = np.linalg.solve(M[ok], rhs[ok][..., None])[:, 0, 0]
        fallback = d.mask & ~ok
        new[fallback] = rhs[fallback, 0] / np.maximum(M[fallback, 0, 0], 1e-12)
        out = np.where(d.mask, new, 0.0)
    return DepthMap(out, d.mask)


def corrupt_salt_pepper(img: RadianceImage, density: float, rng_seed: int) -> RadianceImage:
    """Replace each masked pixel, with probability ``density``, by black or white."""
    if not 0 <= density <= 1:
        raise ValidationError("density must be in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    px = np.array(img.pixels)
    idx = np.flatnonzero(img.mask)
    hit = rng.random(idx.size) < density
    val = rng.integers(0, 2, idx.size).astype(float)
    flat = px.reshape(-1, 3)
    flat[idx[hit]] = val[hit, None]
    return RadianceImage(flat.reshape(px.shape), img.mask)


def perturb_poses(
    poses: Sequence[RigidPose], sigma_t: float, sigma_r_deg: float, seed: int
) -> list[RigidPose]:
    """Add Gaussian translation noise (metres) and small random rotations (degrees).

    The noise is applied in the frame's camera coordinates. Frame 0 is left
    unchanged.
    """
    if sigma_t < 0 or sigma_r_deg < 0:
        raise ValidationError("noise levels must be non-negative")
    rng = np.random.default_rng(seed)
    out = [poses[0]]
    for pose in poses[1:]:
        axis = rng.normal(size=3)
        angle = math.radians(sigma_r_deg) * rng.normal()
        dT = sigma_t * rng.normal(size=3)
        dR = rotation_from_axis_angle(axis, angle)
        R = dR @ pose.R
        # re-orthonormalise to keep the pose validator happy after composition
        U, _, Vt = np.linalg.svd(R)
        out.append(RigidPose(U @ Vt, pose.T + dT))
    return out


def translation_sigma_for_pixels(pixels: float, K: CameraIntrinsics, depth: float) -> float:
    """Per-axis translation sigma giving a mean image displacement of ``pixels``.

    A lateral offset ``t`` at depth ``z`` moves the image by ``f t / z``; the
    norm of two i.i.d. normal components has mean ``sigma * sqrt(pi / 2)``.
    """
    f = 0.5 * (K.fx + K.fy)
    return pixels * depth / (f * math.sqrt(math.pi / 2))
