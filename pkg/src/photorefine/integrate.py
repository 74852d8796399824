"""Fuse a refined normal map with the depth prior, and export meshes.

The surface is solved in log-depth ``w = log z``. Under the pinhole model
a pixel with normal ``n`` and viewing ray ``r = ((u - cx)/fx, (v - cy)/fy, 1)``
satisfies ``n . r(u, v) z(u, v) = const`` locally. So across a horizontal
neighbour pair the planar prediction is
``w(u+1) - w(u) = -log(n . r(u+1) / n . r(u))``, and likewise vertically.
That difference is exact for planes. The two endpoint normals give two
predictions, which are averaged. The energy

    sum_edges c_e (w_j - w_i - g_e)^2 + lam * sum_p (w_p - w_prior,p)^2

is quadratic, and conjugate gradient minimises it on the sparse normal
equations. Working in log-depth makes the whole fit scale covariant:
multiplying the prior by ``t`` multiplies the result by ``t``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .core import CameraIntrinsics, DepthMap, NormalMap, backproject
from .errors import SolverDivergence, ValidationError
from .fileio import write_ply

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IntegrationConfig:
    lambda_depth: float = 1e-3
    tol: float = 1e-8
    max_iters: int = 2000
    min_cos: float = 0.05

    def __post_init__(self):
        if self.lambda_depth < 0:
            raise ValidationError("lambda_depth must be >= 0")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValidationError("solver tolerance and iteration cap must be positive")


@dataclass(frozen=True)
class IntegrationResult:
    depth: DepthMap
    converged: bool
    iterations: int
    energies: tuple  # energy after every CG iteration


def _rays(K: CameraIntrinsics) -> np.ndarray:
    u, v = K.pixel_grid()
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def _edge_system(normals: NormalMap, prior: DepthMap, confidence: np.ndarray, K: CameraIntrinsics, min_cos: float):
    """Edge list ``(i, j, target, weight)`` over flat pixel indices."""
    rays = _rays(K)
    nr = np.sum(normals.normals * rays, axis=-1)
    cos = np.abs(nr) / np.linalg.norm(rays, axis=-1)
    usable = normals.mask & prior.mask & (cos >= min_cos) & np.isfinite(nr)
    H, W = K.shape
    ii, jj, gg, ww = [], [], [], []
    for dv, du in ((0, 1), (1, 0)):
        a = usable[: H - dv, : W - du] & usable[dv:, du:]
        ya, xa = np.nonzero(a)
        yb, xb = ya + dv, xa + du
        na, nb = normals.normals[ya, xa], normals.normals[yb, xb]
        ra, rb = rays[ya, xa], rays[yb, xb]
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = -np.log(np.sum(na * rb, axis=1) / np.sum(na * ra, axis=1))
            gb = -np.log(np.sum(nb * rb, axis=1) / np.sum(nb * ra, axis=1))
        g = 0.5 * (ga + gb)
        ok = np.isfinite(g)
        c = 0.5 * (confidence[ya, xa] + confidence[yb, xb])
        ii.append((ya * W + xa)[ok])
        jj.append((yb * W + xb)[ok])
        gg.append(g[ok])
        ww.append(c[ok])
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(gg), np.concatenate(ww)


def integrate_normals(
    normals: NormalMap,
    depth_prior: DepthMap,
    confidence: np.ndarray | None,
    K: CameraIntrinsics,
    cfg: IntegrationConfig = IntegrationConfig(),
) -> IntegrationResult:
    """Screened least-squares integration of ``normals`` against ``depth_prior``.

    ``confidence`` weights the gradient terms (1 everywhere when None).
    Pixels of the prior mask without a usable normal keep only the prior
    term. When the solver fails to reach the tolerance, or produces
    non-finite values, the prior is returned and a
    :class:`SolverDivergence` warning is issued.
    """
    if normals.normals.shape[:2] != depth_prior.depth.shape or depth_prior.depth.shape != K.shape:
        raise ValidationError("normal map, depth prior and intrinsics disagree in size")
    H, W = K.shape
    conf = np.ones((H, W)) if confidence is None else np.clip(np.asarray(confidence, float), 0.0, None)
    if conf.shape != (H, W):
        raise ValidationError("confidence map has the wrong shape")

    mask = depth_prior.mask
    idx = -np.ones(H * W, int)
    flat = np.flatnonzero(mask.ravel())
    idx[flat] = np.arange(len(flat))
    n = len(flat)
    w0 = np.log(depth_prior.depth.ravel()[flat])

    ei, ej, eg, ew = _edge_system(normals, depth_prior, conf, K, cfg.min_cos)
    keep = ew > 0
    ei, ej, eg, ew = idx[ei[keep]], idx[ej[keep]], eg[keep], ew[keep]
    m = len(ei)
    if m == 0 and cfg.lambda_depth > 0:
        # nothing but the prior term: the minimiser is the prior itself
        return IntegrationResult(depth_prior, True, 0, ())
    D = sparse.csr_matrix(
        (np.concatenate([-np.ones(m), np.ones(m)]), (np.tile(np.arange(m), 2), np.concatenate([ei, ej]))), shape=(m, n)
    )
    Cw = sparse.diags(ew)
    lam = cfg.lambda_depth
    A = (D.T @ Cw @ D + lam * sparse.identity(n)).tocsr()
    b = D.T @ (ew * eg) + lam * w0
    if lam == 0:
        # without the prior w is fixed only up to a constant; a tiny ridge
        # keeps the system definite and the mean is re-anchored afterwards
        A = (A + 1e-12 * sparse.identity(n)).tocsr()

    diag = A.diagonal()
    M = sparse.diags(1.0 / np.where(diag > 0, diag, 1.0))
    energies = []

    def energy(x):
        r = D @ x - eg
        return float(np.sum(ew * r * r) + lam * np.sum((x - w0) ** 2))

    def record(xk):
        energies.append(energy(xk))

    x, info = cg(A, b, x0=w0.copy(), rtol=cfg.tol, atol=0.0, maxiter=cfg.max_iters, M=M, callback=record)
    ok = info == 0 and np.all(np.isfinite(x))
    if lam == 0 and ok:
        x = x + (w0.mean() - x.mean())
    if not ok:
        warnings.warn(f"normal integration did not converge (cg info {info}); returning the prior", RuntimeWarning, stacklevel=2)
        log.warning("%s", SolverDivergence(f"cg info {info}"))
        return IntegrationResult(depth_prior, False, len(energies), tuple(energies))
    out = np.zeros(H * W)
    out[flat] = np.exp(x)
    return IntegrationResult(DepthMap(out.reshape(H, W), mask), True, len(energies), tuple(energies))


def mesh_from_depth(depth: DepthMap, K: CameraIntrinsics, discontinuity: float = 0.02):
    """Triangulate the depth grid.

    Every masked pixel becomes a vertex. A 2x2 cell with four masked pixels
    yields two triangles, and one with three yields a single triangle. A
    triangle is skipped when its depth range exceeds ``discontinuity`` times
    its smallest depth. Faces are wound so their normals face the camera.

    Returns:
        ``(vertices (V, 3), faces (T, 3), vertex_normals (V, 3))``.
    """
    H, W = depth.depth.shape
    mask = depth.mask
    u, v = K.pixel_grid()
    P = backproject(u, v, np.where(mask, depth.depth, 0.0), K)
    index = -np.ones((H, W), int)
    index[mask] = np.arange(mask.sum())
    verts = P[mask]

    a = index[:-1, :-1].ravel()
    b = index[:-1, 1:].ravel()
    c = index[1:, :-1].ravel()
    d = index[1:, 1:].ravel()
    full = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    tris = [np.stack([a, c, b], 1)[full], np.stack([b, c, d], 1)[full]]
    three = ((a >= 0).astype(int) + (b >= 0) + (c >= 0) + (d >= 0)) == 3
    for t0, t1, t2, missing in ((b, c, d, a), (a, c, d, b), (a, b, d, c), (a, c, b, d)):
        sel = three & (missing < 0)
        tris.append(np.stack([t0, t1, t2], 1)[sel])
    faces = np.concatenate(tris).astype(np.int64) if tris else np.zeros((0, 3), np.int64)

    if len(faces):
        z = verts[faces, 2]
        faces = faces[(z.max(axis=1) - z.min(axis=1)) <= discontinuity * z.min(axis=1)]
    if len(faces):
        fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
        # camera-facing means the normal points against the viewing ray
        centroid = verts[faces].mean(axis=1)
        flip = np.sum(fn * centroid, axis=1) > 0
        faces[flip] = faces[flip][:, [0, 2, 1]]
        fn[flip] = -fn[flip]
    else:
        fn = np.zeros((0, 3))
    vn = np.zeros_like(verts)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    vn = np.where(norm > 0, vn / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, -1.0]))
    return verts, faces, vn


def export_mesh(path, depth: DepthMap, K: CameraIntrinsics, discontinuity: float = 0.02):
    """Write the triangulated depth map as a binary PLY with vertex normals; returns the mesh arrays."""
    verts, faces, vn = mesh_from_depth(depth, K, discontinuity)
    write_ply(path, verts, faces, vn)
    return verts, faces, vn
