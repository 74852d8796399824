"""Lighting-insensitive dense correspondence from the reference frame to each key frame.

The reference image is forward-warped into frame ``k`` with the reference
depth and pose. Both images are then chromaticity normalised, which divides
out shading common to the three channels. Every warped pixel searches a
window of integer offsets by NCC. Reliable matches seed a coarse control
lattice, and the lattice is refined by Gauss-Newton on photo-consistency.
The correspondence of a reference pixel ``p`` is ``f(q0(p))``, where
``q0`` is the rigid warp and ``f`` the lattice deformation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .core import (
    CameraIntrinsics,
    DepthMap,
    RadianceImage,
    RigidPose,
    project_points,
    sample_bilinear_many,
)
from .errors import OutsideLattice, TooFewMatches, ValidationError, ZeroVariance
from .fileio import read_json, read_pfm, write_json, write_pfm

DARK_EPS = 1e-4
# Photometric residuals of the lattice objective are measured in 8-bit
# units so that the regularisation weight keeps the magnitude it has for
# 0..255 images.
PHOTOMETRIC_SCALE = 255.0


@dataclass(frozen=True)
class MatchConfig:
    patch_radius: int = 5
    search_radius: int = 10
    thres_S: float = 0.75
    thres_delta: float = 0.05
    lattice_spacing: int = 16
    lam: float = 10.0
    max_lattice_iters: int = 30
    lattice_tol_px: float = 0.01
    zbuffer_tol: float = 0.02

    def __post_init__(self):
        if not (0 < self.thres_S < 1 and 0 < self.thres_delta < 1):
            raise ValidationError("match thresholds must lie in (0, 1)")
        if self.patch_radius < 1 or self.search_radius < 1:
            raise ValidationError("patch and search radii must be >= 1")
        if self.lattice_spacing < 2:
            raise ValidationError("lattice spacing must be >= 2 pixels")
        if self.lam < 0:
            raise ValidationError("lattice regularisation weight must be >= 0")


# --------------------------------------------------------------------------
# normalisation and warping


def chroma_normalize(img: RadianceImage, eps: float = DARK_EPS) -> RadianceImage:
    """Divide each pixel by its channel sum; pixels darker than ``eps`` drop out of the mask."""
    total = img.pixels.sum(axis=2)
    mask = img.mask & (total >= eps)
    out = np.zeros_like(img.pixels)
    out[mask] = img.pixels[mask] / total[mask, None]
    return RadianceImage(out, mask)


@dataclass(frozen=True)
class WarpResult:
    image: RadianceImage
    zbuffer: np.ndarray  # nearest depth per target pixel, inf where empty
    qu: np.ndarray  # rigid position of each reference pixel in frame k (NaN off mask)
    qv: np.ndarray
    lam: np.ndarray  # depth of each reference pixel in frame k


def forward_warp(
    img: RadianceImage, depth: DepthMap, K: CameraIntrinsics, pose: RigidPose, z_tol: float = 0.02
) -> WarpResult:
    """Splat reference pixels into frame ``k`` with bilinear weights and a z-buffer.

    Each reference pixel lands at its projection ``q0`` and spreads over the
    four surrounding target pixels. A target pixel keeps only splats whose
    depth is within ``z_tol`` (relative) of the nearest one. Target pixels
    with total weight below 0.25 are holes.
    """
    H, W = K.shape
    u, v = K.pixel_grid()
    m = img.mask & depth.mask
    qu, qv, lam = project_points(u, v, np.where(m, depth.depth, 1.0), K, pose)
    qu = np.where(m, qu, np.nan)
    qv = np.where(m, qv, np.nan)
    lam = np.where(m, lam, np.nan)

    src = np.flatnonzero(m.ravel() & np.isfinite(qu.ravel()))
    fu, fv, z = qu.ravel()[src], qv.ravel()[src], lam.ravel()[src]
    u0 = np.floor(fu).astype(int)
    v0 = np.floor(fv).astype(int)
    au, av = fu - u0, fv - v0
    cols = img.pixels.reshape(-1, 3)[src]

    targets, weights, depths, values = [], [], [], []
    for du, dv, w in ((0, 0, (1 - au) * (1 - av)), (1, 0, au * (1 - av)), (0, 1, (1 - au) * av), (1, 1, au * av)):
        tu, tv = u0 + du, v0 + dv
        ok = (w > 1e-6) & (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)
        targets.append(tv[ok] * W + tu[ok])
        weights.append(w[ok])
        depths.append(z[ok])
        values.append(cols[ok])
    tgt = np.concatenate(targets)
    wts = np.concatenate(weights)
    zs = np.concatenate(depths)
    vals = np.concatenate(values)

    zbuf = np.full(H * W, np.inf)
    strong = wts > 0.05
    np.minimum.at(zbuf, tgt[strong], zs[strong])
    front = zs <= zbuf[tgt] * (1 + z_tol)
    acc = np.zeros((H * W, 3))
    wsum = np.zeros(H * W)
    np.add.at(acc, tgt[front], vals[front] * wts[front, None])
    np.add.at(wsum, tgt[front], wts[front])
    mask = wsum >= 0.25
    out = np.zeros((H * W, 3))
    out[mask] = np.clip(acc[mask] / wsum[mask, None], 0.0, 1.0)
    zbuf[~mask] = np.inf
    return WarpResult(RadianceImage(out.reshape(H, W, 3), mask.reshape(H, W)), zbuf.reshape(H, W), qu, qv, lam)


def warp_reference(img: RadianceImage, depth: DepthMap, K: CameraIntrinsics, pose: RigidPose) -> RadianceImage:
    """Reference image as seen from frame ``k``; holes are left out of the mask."""
    return forward_warp(img, depth, K, pose).image


# --------------------------------------------------------------------------
# NCC search


def ncc_score(patch_a: np.ndarray, patch_b: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Zero-mean NCC over the valid pixels of two ``(h, w, C)`` patches, channels stacked.

    Raises:
        ZeroVariance: one of the patches is constant.
    """
    a = np.asarray(patch_a, float)
    b = np.asarray(patch_b, float)
    if a.shape != b.shape:
        raise ValidationError("patches differ in shape")
    if valid is not None:
        a, b = a[valid], b[valid]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    va, vb = float(a @ a), float(b @ b)
    # same floor as the vectorised search, so rounding residue counts as flat
    if min(va, vb) <= 1e-10 * a.size:
        raise ZeroVariance("patch has zero variance")
    return float(np.clip((a @ b) / math.sqrt(va * vb), -1.0, 1.0))


@dataclass(frozen=True)
class SearchResult:
    """Per warped-image pixel: best offset into the target, its score and flags."""

    offset: np.ndarray  # (H, W, 2) subpixel (du, dv); NaN where not searched
    score: np.ndarray  # (H, W) best NCC, NaN where not searched
    second: np.ndarray  # (H, W) second-best local peak (-1 when none)
    reliable: np.ndarray  # (H, W) bool
    searched: np.ndarray  # (H, W) bool: full reference patch and at least one candidate


def _box(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window, zero outside the image."""
    return ndimage.uniform_filter(a, size=2 * r + 1, mode="constant") * (2 * r + 1) ** 2


def _shift(a: np.ndarray, du: int, dv: int, fill=0.0) -> np.ndarray:
    """``out[y, x] = a[y + dv, x + du]`` with ``fill`` outside."""
    H, W = a.shape[:2]
    out = np.full_like(a, fill)
    ys, yd = slice(max(dv, 0), H + min(dv, 0)), slice(max(-dv, 0), H + min(-dv, 0))
    xs, xd = slice(max(du, 0), W + min(du, 0)), slice(max(-du, 0), W + min(-du, 0))
    out[yd, xd] = a[ys, xs]
    return out


def ncc_volume(ref: RadianceImage, target: RadianceImage, patch_radius: int, search_radius: int) -> np.ndarray:
    """NCC of every reference patch against every target patch in the search window.

    Returns ``(2s+1, 2s+1, H, W)`` scores indexed ``[dv + s, du + s, y, x]``;
    NaN where either patch is not fully valid or has zero variance.
    """
    r, s = patch_radius, search_radius
    a = np.where(ref.mask[..., None], ref.pixels, 0.0)
    b = np.where(target.mask[..., None], target.pixels, 0.0)
    n = 3.0 * (2 * r + 1) ** 2
    full = (2 * r + 1) ** 2 - 0.5
    a_ok = _box(ref.mask.astype(float), r) > full
    b_ok = _box(target.mask.astype(float), r) > full
    sa = _box(a.sum(axis=2), r)
    va = _box((a * a).sum(axis=2), r) - sa * sa / n
    sb = _box(b.sum(axis=2), r)
    vb = _box((b * b).sum(axis=2), r) - sb * sb / n
    tiny = 1e-10 * n

    out = np.full((2 * s + 1, 2 * s + 1) + ref.mask.shape, np.nan)
    for dv in range(-s, s + 1):
        for du in range(-s, s + 1):
            bs = _shift(b, du, dv)
            sab = _box((a * bs).sum(axis=2), r)
            sb_s = _shift(sb, du, dv)
            vb_s = _shift(vb, du, dv)
            ok = a_ok & _shift(b_ok, du, dv, False) & (va > tiny) & (vb_s > tiny)
            with np.errstate(invalid="ignore", divide="ignore"):
                score = (sab - sa * sb_s / n) / np.sqrt(va * vb_s)
            out[dv + s, du + s] = np.where(ok, np.clip(score, -1.0, 1.0), np.nan)
    return out


def _quadratic_peak(sm, s0, sp):
    den = sm - 2 * s0 + sp
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(den < 0, 0.5 * (sm - sp) / den, 0.0)
    return np.clip(np.nan_to_num(d), -0.5, 0.5)


def pick_matches(volume: np.ndarray, thres_S: float, thres_delta: float) -> SearchResult:
    """Best offset, second local peak, reliability and subpixel refinement from an NCC volume."""
    n_off = volume.shape[0]
    s = n_off // 2
    H, W = volume.shape[2:]
    vol = np.where(np.isnan(volume), -np.inf, volume)
    searched = np.isfinite(vol).any(axis=(0, 1))

    padded = np.pad(vol, ((1, 1), (1, 1), (0, 0), (0, 0)), constant_values=-np.inf)
    peak = np.isfinite(vol)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                peak &= vol >= padded[1 + di : 1 + di + n_off, 1 + dj : 1 + dj + n_off]

    flat = vol.reshape(n_off * n_off, H, W)
    best_idx = np.argmax(flat, axis=0)
    best = np.take_along_axis(flat, best_idx[None], axis=0)[0]
    peaks = np.where(peak.reshape(n_off * n_off, H, W), flat, -np.inf)
    np.put_along_axis(peaks, best_idx[None], -np.inf, axis=0)
    second = peaks.max(axis=0)
    second = np.where(np.isfinite(second), second, -1.0)

    iv, iu = np.divmod(best_idx, n_off)
    yy, xx = np.mgrid[0:H, 0:W]

    def at(di, dj):
        ii = np.clip(iv + di, 0, n_off - 1)
        jj = np.clip(iu + dj, 0, n_off - 1)
        val = vol[ii, jj, yy, xx]
        inside = (iv + di >= 0) & (iv + di < n_off) & (iu + dj >= 0) & (iu + dj < n_off)
        return np.where(inside & np.isfinite(val), val, np.nan)

    def refine(minus, plus):
        good = np.isfinite(minus) & np.isfinite(plus)
        return np.where(good, _quadratic_peak(np.nan_to_num(minus), best, np.nan_to_num(plus)), 0.0)

    sub_u = refine(at(0, -1), at(0, 1))
    sub_v = refine(at(-1, 0), at(1, 0))
    offset = np.stack([iu - s + sub_u, iv - s + sub_v], axis=-1).astype(float)
    offset[~searched] = np.nan
    score = np.where(searched, best, np.nan)
    reliable = searched & (best >= thres_S) & (best - second >= thres_delta)
    return SearchResult(offset, score, np.where(searched, second, np.nan), reliable, searched)


def search_matches(ref_warped: RadianceImage, target: RadianceImage, cfg: MatchConfig = MatchConfig()) -> SearchResult:
    """Exhaustive NCC search of every warped-reference patch in the target.

    Both inputs are expected to be chromaticity normalised already.
    """
    vol = ncc_volume(ref_warped, target, cfg.patch_radius, cfg.search_radius)
    return pick_matches(vol, cfg.thres_S, cfg.thres_delta)


# --------------------------------------------------------------------------
# control lattice


@dataclass(frozen=True)
class DeformationLattice:
    """Displacements on a regular control grid with vertices at ``(i * spacing, j * spacing)``."""

    spacing: float
    delta: np.ndarray  # (ny, nx, 2)
    delta_hat: np.ndarray  # (ny, nx, 2)
    support_count: np.ndarray  # (ny, nx)
    converged: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.delta.shape[:2]

    def with_delta(self, delta: np.ndarray, converged: bool = True) -> "DeformationLattice":
        return DeformationLattice(self.spacing, np.array(delta, float), self.delta_hat, self.support_count, converged)


def lattice_shape(image_shape: tuple[int, int], spacing: float) -> tuple[int, int]:
    H, W = image_shape
    return int(math.ceil((H - 1) / spacing)) + 1, int(math.ceil((W - 1) / spacing)) + 1


def lattice_weights(lattice_dims: tuple[int, int], spacing: float, u, v):
    """Bilinear weights of the four enclosing vertices.

    Returns ``(indices (N, 4), weights (N, 4), inside (N,))`` where indices
    are flat vertex numbers ``j * nx + i``.
    """
    ny, nx = lattice_dims
    u = np.asarray(u, float).ravel()
    v = np.asarray(v, float).ravel()
    gu, gv = u / spacing, v / spacing
    inside = np.isfinite(gu) & np.isfinite(gv) & (gu >= 0) & (gu <= nx - 1) & (gv >= 0) & (gv <= ny - 1)
    gu = np.where(inside, gu, 0.0)
    gv = np.where(inside, gv, 0.0)
    i0 = np.minimum(np.floor(gu).astype(int), max(nx - 2, 0))
    j0 = np.minimum(np.floor(gv).astype(int), max(ny - 2, 0))
    a, b = gu - i0, gv - j0
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    idx = np.stack([j0 * nx + i0, j0 * nx + i1, j1 * nx + i0, j1 * nx + i1], axis=1)
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    return idx, w, inside


def deform_points(lattice: DeformationLattice, u, v):
    """Vectorised ``f(p) = p + sum theta_l Delta_l``; NaN outside the lattice hull."""
    shape = np.shape(u)
    idx, w, inside = lattice_weights(lattice.shape, lattice.spacing, u, v)
    d = lattice.delta.reshape(-1, 2)
    disp = np.einsum("nk,nkc->nc", w, d[idx])
    fu = np.where(inside, np.ravel(u) + disp[:, 0], np.nan)
    fv = np.where(inside, np.ravel(v) + disp[:, 1], np.nan)
    return fu.reshape(shape), fv.reshape(shape)


def apply_deformation(lattice: DeformationLattice, p) -> tuple[float, float]:
    """Deformed position of one pixel ``p = (u, v)``.

    Raises:
        OutsideLattice: ``p`` lies outside the lattice hull.
    """
    fu, fv = deform_points(lattice, np.array([p[0]], float), np.array([p[1]], float))
    if not np.isfinite(fu[0]):
        raise OutsideLattice(f"pixel {tuple(p)} is outside the control lattice")
    return float(fu[0]), float(fv[0])


def _diffuse_fill(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Harmonic fill of unknown grid nodes from known ones (4-neighbour Laplace)."""
    ny, nx = known.shape
    unknown = np.flatnonzero(~known.ravel())
    if len(unknown) == 0 or not known.any():
        return values
    pos = -np.ones(ny * nx, int)
    pos[unknown] = np.arange(len(unknown))
    rows, cols, data = [], [], []
    rhs = np.zeros((len(unknown), values.shape[-1]))
    flat = values.reshape(ny * nx, -1)
    for r, node in enumerate(unknown):
        j, i = divmod(node, nx)
        nbrs = [(j + dj, i + di) for dj, di in ((-1, 0), (1, 0), (0, -1), (0, 1)) if 0 <= j + dj < ny and 0 <= i + di < nx]
        rows.append(r)
        cols.append(r)
        data.append(float(len(nbrs)))
        for jj, ii in nbrs:
            m = jj * nx + ii
            if pos[m] >= 0:
                rows.append(r)
                cols.append(pos[m])
                data.append(-1.0)
            else:
                rhs[r] += flat[m]
    A = sparse.csr_matrix((data, (rows, cols)), shape=(len(unknown), len(unknown)))
    out = flat.copy()
    sol = spsolve(A.tocsc(), rhs)
    out[unknown] = sol.reshape(len(unknown), -1)
    return out.reshape(values.shape)


def fit_lattice(
    positions: np.ndarray,
    displacements: np.ndarray,
    image_shape: tuple[int, int],
    cfg: MatchConfig = MatchConfig(),
) -> DeformationLattice:
    """Initial lattice from scattered reliable matches.

    Each vertex takes the inverse-distance-weighted mean of the match
    displacements within ``1.5 * spacing``. Vertices with no match in range
    are filled by diffusion from the supported ones.

    Raises:
        TooFewMatches: fewer than 4 matches.
    """
    positions = np.asarray(positions, float).reshape(-1, 2)
    displacements = np.asarray(displacements, float).reshape(-1, 2)
    if len(positions) < 4:
        raise TooFewMatches(f"{len(positions)} reliable matches, need at least 4")
    s = float(cfg.lattice_spacing)
    ny, nx = lattice_shape(image_shape, s)
    gv, gu = np.mgrid[0:ny, 0:nx]
    verts = np.stack([gu.ravel() * s, gv.ravel() * s], axis=1)
    radius = 1.5 * s
    delta_hat = np.zeros((ny * nx, 2))
    count = np.zeros(ny * nx, int)
    tree = cKDTree(positions)
    for vi, nbrs in enumerate(tree.query_ball_point(verts, radius)):
        if not nbrs:
            continue
        nbrs = np.sort(nbrs)
        d = np.linalg.norm(positions[nbrs] - verts[vi], axis=1)
        w = 1.0 / np.maximum(d, 1e-3) ** 2
        delta_hat[vi] = (w[:, None] * displacements[nbrs]).sum(axis=0) / w.sum()
        count[vi] = len(nbrs)
    delta_hat = delta_hat.reshape(ny, nx, 2)
    count = count.reshape(ny, nx)
    delta_hat = _diffuse_fill(delta_hat, count > 0)
    return DeformationLattice(s, delta_hat.copy(), delta_hat, count)


def _lattice_energy(delta, delta_hat, lam, idx, w, pu, pv, ref_vals, tgt):
    disp = (w[..., None] * delta.reshape(-1, 2)[idx]).sum(axis=1)
    qu, qv = pu + disp[:, 0], pv + disp[:, 1]
    vals, _ = sample_bilinear_many(tgt, np.ones(tgt.shape[:2], bool), qu, qv)
    r = (vals - ref_vals) * PHOTOMETRIC_SCALE
    reg = lam * np.sum((delta - delta_hat) ** 2)
    return float(np.sum(r * r) + reg), r, qu, qv


def optimize_lattice(
    lattice: DeformationLattice,
    ref_warped_cn: RadianceImage,
    target_cn: RadianceImage,
    cfg: MatchConfig = MatchConfig(),
    history: list | None = None,
) -> DeformationLattice:
    """Gauss-Newton on ``sum_p |I_ref(p) - I_k(f(p))|^2 + lam * sum_l |Delta_l - hat Delta_l|^2``.

    The target is zero outside its mask so the objective is continuous in
    ``Delta``. The pixel set is fixed at the start: masked warped-reference
    pixels whose initial position lands on the target mask. Steps are halved
    until the objective decreases. The loop stops when the largest vertex
    update is below ``cfg.lattice_tol_px`` or after ``cfg.max_lattice_iters``
    iterations; ``converged`` is False in the latter case. ``history``, when
    given, receives the objective before the first and after every accepted
    step.
    """
    tgt = np.where(target_cn.mask[..., None], target_cn.pixels, 0.0)
    ones = np.ones(tgt.shape[:2], bool)
    gx = np.zeros_like(tgt)
    gy = np.zeros_like(tgt)
    gx[:, 1:-1] = 0.5 * (tgt[:, 2:] - tgt[:, :-2])
    gy[1:-1] = 0.5 * (tgt[2:] - tgt[:-2])

    dims = lattice.shape
    nv = dims[0] * dims[1]
    v, u = np.nonzero(ref_warped_cn.mask)
    pu, pv = u.astype(float), v.astype(float)
    idx, w, inside = lattice_weights(dims, lattice.spacing, pu, pv)
    disp0 = (w[..., None] * lattice.delta.reshape(-1, 2)[idx]).sum(axis=1)
    _, on_target = sample_bilinear_many(tgt, target_cn.mask, pu + disp0[:, 0], pv + disp0[:, 1])
    keep = inside & on_target
    idx, w, pu, pv = idx[keep], w[keep], pu[keep], pv[keep]
    ref_vals = ref_warped_cn.pixels[v[keep], u[keep]]
    n = len(pu)

    delta = np.array(lattice.delta, float)
    lam = cfg.lam
    E, r, qu, qv = _lattice_energy(delta, lattice.delta_hat, lam, idx, w, pu, pv, ref_vals, tgt)
    if history is not None:
        history.append(E)
    converged = False
    for _ in range(cfg.max_lattice_iters):
        gxs, _ = sample_bilinear_many(gx, ones, qu, qv)
        gys, _ = sample_bilinear_many(gy, ones, qu, qv)
        # rows: pixel*3 + channel; cols: vertex*2 + axis
        rows = np.repeat(np.arange(3 * n).reshape(n, 3), 8, axis=1).reshape(n, 3, 4, 2)
        cols = np.broadcast_to((2 * idx)[:, None, :, None] + np.arange(2)[None, None, None, :], (n, 3, 4, 2))
        grads = np.stack([gxs, gys], axis=-1)  # (n, 3, 2)
        vals = PHOTOMETRIC_SCALE * w[:, None, :, None] * grads[:, :, None, :]
        J = sparse.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * n, 2 * nv))
        reg = (delta - lattice.delta_hat).ravel()
        H = (J.T @ J).toarray() + lam * np.eye(2 * nv) + 1e-9 * np.eye(2 * nv)
        g = J.T @ r.ravel() + lam * reg
        step = -np.linalg.solve(H, g)
        t = 1.0
        accepted = False
        for _ in range(12):
            trial = delta + t * step.reshape(delta.shape)
            E_t, r_t, qu_t, qv_t = _lattice_energy(trial, lattice.delta_hat, lam, idx, w, pu, pv, ref_vals, tgt)
            if E_t <= E:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True  # no descent direction left at this resolution
            break
        move = np.max(np.abs(trial - delta))
        delta, E, r, qu, qv = trial, E_t, r_t, qu_t, qv_t
        if history is not None:
            history.append(E)
        if move < cfg.lattice_tol_px:
            converged = True
            break
    return lattice.with_delta(delta, converged)


def lattice_energy(lattice: DeformationLattice, ref_warped_cn: RadianceImage, target_cn: RadianceImage, cfg: MatchConfig = MatchConfig()) -> float:
    """The lattice objective at ``lattice.delta`` over all masked warped-reference pixels inside the hull."""
    tgt = np.where(target_cn.mask[..., None], target_cn.pixels, 0.0)
    v, u = np.nonzero(ref_warped_cn.mask)
    idx, w, inside = lattice_weights(lattice.shape, lattice.spacing, u, v)
    E, *_ = _lattice_energy(
        lattice.delta,
        lattice.delta_hat,
        cfg.lam,
        idx[inside],
        w[inside],
        u[inside].astype(float),
        v[inside].astype(float),
        ref_warped_cn.pixels[v[inside], u[inside]],
        tgt,
    )
    return E


# --------------------------------------------------------------------------
# correspondence fields


@dataclass(frozen=True)
class CorrespondenceField:
    """Matches of every reference pixel in one key frame.

    ``q`` holds subpixel ``(u, v)`` positions (NaN where undefined),
    ``reliable`` the NCC reliability test, ``score`` the best NCC and
    ``visible`` whether the point survived the z-buffer and landed in frame.
    """

    q: np.ndarray
    reliable: np.ndarray
    score: np.ndarray
    visible: np.ndarray
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.array(self.q, float)
        rel = np.array(self.reliable, bool)
        vis = np.array(self.visible, bool)
        score = np.array(self.score, float)
        if q.ndim != 3 or q.shape[2] != 2 or rel.shape != q.shape[:2]:
            raise ValidationError("correspondence arrays have inconsistent shapes")
        if np.any(rel & ~vis):
            raise ValidationError("reliable matches must be visible")
        if np.any(rel & ~np.isfinite(q).all(axis=2)):
            raise ValidationError("reliable matches need finite positions")
        for name, arr in (("q", q), ("reliable", rel), ("score", score), ("visible", vis)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, mask: np.ndarray) -> "CorrespondenceField":
        H, W = mask.shape
        v, u = np.mgrid[0:H, 0:W].astype(float)
        q = np.where(mask[..., None], np.stack([u, v], axis=-1), np.nan)
        score = np.where(mask, 1.0, np.nan)
        return cls(q, mask.copy(), score, mask.copy(), {"reliable_count": int(mask.sum()), "mean_score": 1.0})

    def save(self, stem) -> None:
        """Write ``<stem>.pfm`` (qx, qy, reliable) and ``<stem>.json``.

        Invisible pixels are stored with NaN positions so that the PFM alone
        recovers ``visible``.
        """
        q = np.where(self.visible[..., None], self.q, np.nan)
        write_pfm(f"{stem}.pfm", np.dstack([q, self.reliable.astype(float)]))
        write_pfm(f"{stem}_score.pfm", np.where(np.isfinite(self.score), self.score, -2.0))
        write_json(f"{stem}.json", dict(self.stats))

    @classmethod
    def load(cls, stem) -> "CorrespondenceField":
        data = read_pfm(f"{stem}.pfm")
        q = data[..., :2]
        visible = np.isfinite(q).all(axis=2)
        reliable = data[..., 2] > 0.5
        try:
            score = read_pfm(f"{stem}_score.pfm")
            score = np.where(score < -1.5, np.nan, score)
        except FileNotFoundError:
            score = np.where(reliable, 1.0, np.nan)
        return cls(q, reliable & visible, score, visible, read_json(f"{stem}.json"))


def match_frame(
    ref_img: RadianceImage,
    ref_depth: DepthMap,
    target: RadianceImage,
    K: CameraIntrinsics,
    pose: RigidPose,
    cfg: MatchConfig = MatchConfig(),
    chromaticity: bool = True,
) -> CorrespondenceField:
    """Full matching chain for one key frame.

    ``chromaticity=False`` compares raw intensities instead; it exists only
    to measure what the normalisation buys.
    """
    warp = forward_warp(ref_img, ref_depth, K, pose, cfg.zbuffer_tol)
    if chromaticity:
        a, b = chroma_normalize(warp.image), chroma_normalize(target)
    else:
        a, b = warp.image, target
    found = search_matches(a, b, cfg)

    H, W = K.shape
    vv, uu = np.nonzero(found.reliable)
    positions = np.stack([uu, vv], axis=1).astype(float)
    lattice = fit_lattice(positions, found.offset[vv, uu], (H, W), cfg)
    lattice = optimize_lattice(lattice, a, b, cfg)

    qu0, qv0, lam = warp.qu, warp.qv, warp.lam
    fu, fv = deform_points(lattice, qu0, qv0)
    ru = np.rint(np.nan_to_num(qu0, nan=-1)).astype(int)
    rv = np.rint(np.nan_to_num(qv0, nan=-1)).astype(int)
    landed = (ru >= 0) & (ru < W) & (rv >= 0) & (rv < H) & np.isfinite(fu) & np.isfinite(fv)
    ru_c, rv_c = np.clip(ru, 0, W - 1), np.clip(rv, 0, H - 1)
    in_frame = (fu >= 0) & (fu <= W - 1) & (fv >= 0) & (fv <= H - 1)
    front = lam <= warp.zbuffer[rv_c, ru_c] * (1 + cfg.zbuffer_tol)
    visible = landed & in_frame & front & ref_img.mask & a.mask[rv_c, ru_c]
    reliable = visible & found.reliable[rv_c, ru_c]
    score = np.where(visible, found.score[rv_c, ru_c], np.nan)
    q = np.where(visible[..., None], np.stack([fu, fv], axis=-1), np.nan)
    stats = {
        "reliable_count": int(reliable.sum()),
        "visible_count": int(visible.sum()),
        "mean_score": float(np.nanmean(score[reliable])) if reliable.any() else 0.0,
        "lattice_converged": bool(lattice.converged),
    }
    return CorrespondenceField(q, reliable, score, visible, stats)


def rigid_correspondences(
    ref_depth: DepthMap, target_depth: DepthMap, K: CameraIntrinsics, pose: RigidPose, depth_tol: float = 0.02
) -> CorrespondenceField:
    """Correspondences from geometry alone: project with the pose and test visibility against frame ``k``'s depth.

    Used as ground truth on synthetic data.
    """
    u, v = K.pixel_grid()
    m = ref_depth.mask
    qu, qv, lam = project_points(u, v, np.where(m, ref_depth.depth, 1.0), K, pose)
    dk, ok = sample_bilinear_many(target_depth.depth, target_depth.mask, qu, qv)
    visible = m & ok & (np.abs(dk - lam) < depth_tol * lam)
    q = np.where(visible[..., None], np.stack([qu, qv], axis=-1), np.nan)
    score = np.where(visible, 1.0, np.nan)
    return CorrespondenceField(q, visible, score, visible, {"reliable_count": int(visible.sum()), "mean_score": 1.0})
