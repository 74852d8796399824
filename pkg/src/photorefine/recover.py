"""Per-pixel robust EM recovery of surface normal and albedo.

Each reference pixel has observations ``I_k`` (RGB) taken from frames whose
object rotation is ``R_k``. The Lambertian model predicts
``rho * s_k(n)`` with ``s_k(n) = shade(L, R_k n)``. Each observation is an
inlier with prior ``alpha`` (Gaussian residual density with std ``sigma``
applied to the RGB residual norm) or an outlier with uniform density
``1 / C``. EM alternates inlier posteriors with closed-form updates of
``alpha, rho, sigma`` and a Gauss-Newton update of ``n`` on the sphere.

All routines are batched over a leading pixel axis, but there is no
coupling between pixels: every reduction runs over the frame or channel
axis only, so results do not depend on how pixels are ordered or grouped.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import AlbedoMap, NormalMap, rotation_angle_deg
from .errors import DegenerateWeights, TooFewObservations, ValidationError
from .shading import QuadraticLighting, rotate_lighting, shade

logger = logging.getLogger(__name__)

_SQRT_2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class EMConfig:
    alpha0: float = 0.75
    sigma0: float = 0.05
    C: float = 1.0
    max_iters: int = 50
    angle_tol_deg: float = 0.05
    rho_rel_tol: float = 1e-4
    sigma_floor: float = 1e-4
    normal_max_inner: int = 20
    min_frames: int = 3
    min_rotation_spread_deg: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha0 < 1:
            raise ValidationError("alpha0 must be in (0, 1)")
        if self.sigma0 <= 0 or self.C <= 0:
            raise ValidationError("sigma0 and C must be positive")
        if self.max_iters < 1 or self.min_frames < 1:
            raise ValidationError("iteration and frame counts must be positive")


@dataclass(frozen=True)
class PixelObservations:
    """Aligned observations of one pixel.

    Attributes:
        intensities: ``(F, 3)`` aligned RGB values.
        rotations: ``(F, 3, 3)`` rotation from the reference frame to each frame.
        valid: ``(F,)`` usable-observation flags.
    """

    intensities: np.ndarray
    rotations: np.ndarray
    valid: np.ndarray


@dataclass
class PixelEMState:
    n: np.ndarray
    rho: np.ndarray
    sigma: float
    alpha: float
    omega: np.ndarray
    iterations: int = 0
    converged: bool = False
    degenerate: bool = False


@dataclass
class RecoveryResult:
    normals: NormalMap
    albedo: AlbedoMap
    confidence: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    recovered: np.ndarray  # pixels solved by EM (False = fell back to the prior)

    def stats(self) -> dict:
        m = self.recovered
        return {
            "pixels": int(self.normals.mask.sum()),
            "recovered_pixels": int(m.sum()),
            "mean_iterations": float(self.iterations[m].mean()) if m.any() else 0.0,
            "convergence_rate": float(self.converged[m].mean()) if m.any() else 0.0,
            "mean_final_alpha": float(self.alpha[m].mean()) if m.any() else 0.0,
            "mean_confidence": float(self.confidence[self.normals.mask].mean()),
        }


# --------------------------------------------------------------------------
# model evaluation


def shading_per_frame(n, L: QuadraticLighting, R_k, ch: int | None = None):
    """``s_k(n) = n^T R_k^T A R_k n + b^T R_k n + c``.

    Returns one channel when ``ch`` is given, otherwise a length-3 array.
    """
    Lk = rotate_lighting(L, R_k)
    if ch is not None:
        return shade(Lk, n, ch)
    return np.array([shade(Lk, n, c) for c in range(3)])


def frame_params(L: QuadraticLighting, rotations: np.ndarray) -> np.ndarray:
    """Lighting rotated into every frame as ``(F, 3, 10)`` parameter rows.

    ``s_k(n) = quadratic_features(n) @ theta[k, ch]``.
    """
    return np.stack([rotate_lighting(L, R).params() for R in rotations])


def _features(n):
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return (x * x, 2 * x * y, 2 * x * z, y * y, 2 * y * z, z * z, x, y, z)


# Evaluation is written as explicit elementwise sums (no BLAS, no einsum
# contractions) so that each pixel's arithmetic is identical whatever its
# position in the batch.
def _shade(n, theta):
    """``(P, F, 3)`` shading for normals ``(P, 3)`` and params ``(F, 3, 10)``."""
    s = np.broadcast_to(theta[None, :, :, 9], (len(n),) + theta.shape[:2]).copy()
    for q, f in enumerate(_features(n)):
        s += f[:, None, None] * theta[None, :, :, q]
    return s


def _shade_grad(n, theta):
    """Shading and its three partial derivatives in ``n``, each ``(P, F, 3)``."""
    x, y, z = (n[:, i, None, None] for i in range(3))
    th = theta[None]
    s = _shade(n, theta)
    gx = 2 * (x * th[..., 0] + y * th[..., 1] + z * th[..., 2]) + th[..., 6]
    gy = 2 * (x * th[..., 1] + y * th[..., 3] + z * th[..., 4]) + th[..., 7]
    gz = 2 * (x * th[..., 2] + y * th[..., 4] + z * th[..., 5]) + th[..., 8]
    return s, gx, gy, gz


def frame_shading(n: np.ndarray, L: QuadraticLighting, rotations: np.ndarray) -> np.ndarray:
    """Shading of every pixel normal in every frame, ``(P, F, 3)``."""
    return _shade(np.asarray(n, float), frame_params(L, rotations))


def _residual_sq(n, rho, theta, intensities):
    r = rho[:, None, :] * _shade(n, theta) - intensities
    return r[..., 0] ** 2 + r[..., 1] ** 2 + r[..., 2] ** 2


def residual_sq(n, rho, L, intensities, rotations):
    """Squared RGB residual norms ``(P, F)``."""
    return _residual_sq(n, rho, frame_params(L, rotations), intensities)


def gaussian_density(r2, sigma):
    return np.exp(-r2 / (2 * sigma**2)) / (_SQRT_2PI * sigma)


def observed_log_likelihood(n, rho, sigma, alpha, L, intensities, rotations, valid, C):
    """Per-pixel ``sum_k log(alpha g_k + (1 - alpha) / C)`` over valid frames."""
    r2 = residual_sq(n, rho, L, intensities, rotations)
    sig = np.asarray(sigma, float)[:, None]
    a = np.asarray(alpha, float)[:, None]
    lik = a * gaussian_density(r2, sig) + (1 - a) / C
    return np.sum(np.where(valid, np.log(lik), 0.0), axis=1)


def expected_complete_log_likelihood(n, rho, sigma, alpha, omega, L, intensities, rotations, valid, C):
    """Per-pixel expected complete-data log-likelihood for fixed posteriors ``omega``."""
    r2 = residual_sq(n, rho, L, intensities, rotations)
    sig = np.asarray(sigma, float)[:, None]
    a = np.asarray(alpha, float)[:, None]
    with np.errstate(divide="ignore"):
        inlier = np.log(a) - np.log(_SQRT_2PI * sig) - r2 / (2 * sig**2)
        outlier = np.log(1 - a) - math.log(C)
    inlier = np.where(omega > 0, inlier, 0.0)
    outlier = np.where(omega < 1, outlier, 0.0)
    terms = omega * inlier + (1 - omega) * outlier
    return np.sum(np.where(valid, terms, 0.0), axis=1)


# --------------------------------------------------------------------------
# EM steps (batched)


def _e_step(n, rho, sigma, alpha, theta, intensities, valid, C):
    r2 = _residual_sq(n, rho, theta, intensities)
    sig = sigma[:, None]
    a = alpha[:, None]
    num = a * gaussian_density(r2, sig)
    den = num + (1 - a) / C
    # den == 0 only when alpha == 1 and the density underflows; the limit is 1
    omega = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return np.where(valid, omega, 0.0)


def e_step_batch(n, rho, sigma, alpha, L, intensities, rotations, valid, C):
    """Inlier posteriors ``omega`` of shape ``(P, F)``; invalid frames get 0."""
    return _e_step(
        np.asarray(n, float),
        np.asarray(rho, float),
        np.asarray(sigma, float),
        np.asarray(alpha, float),
        frame_params(L, rotations),
        intensities,
        valid,
        C,
    )


def _m_step_closed(n, omega, theta, intensities, valid, sigma_floor):
    s = _shade(n, theta)
    w = np.where(valid, omega, 0.0)
    wsum = w.sum(axis=1)
    nvalid = valid.sum(axis=1)
    ok = wsum >= 1e-9
    alpha = wsum / np.maximum(nvalid, 1)
    num = np.sum(w[..., None] * s * intensities, axis=1)
    den = np.sum(w[..., None] * s * s, axis=1)
    good = (den > 0) & ok[:, None]
    rho = np.where(good, np.maximum(num / np.where(good, den, 1.0), 0.0), np.nan)
    r = np.nan_to_num(rho)[:, None, :] * s - intensities
    r2 = r[..., 0] ** 2 + r[..., 1] ** 2 + r[..., 2] ** 2
    sigma = np.sqrt(np.sum(w * r2, axis=1) / np.where(ok, wsum, 1.0))
    sigma = np.where(ok, np.maximum(sigma, sigma_floor), np.nan)
    alpha = np.where(ok, alpha, np.nan)
    return alpha, rho, sigma, ok


def m_step_closed_batch(n, omega, L, intensities, rotations, valid, sigma_floor=1e-4):
    """Closed-form ``alpha, rho, sigma`` maximising the expected log-likelihood.

    ``rho`` is solved per channel and clamped at 0; ``sigma`` uses the new
    ``rho`` and is floored at ``sigma_floor``. Returns ``(alpha, rho, sigma,
    ok)`` where ``ok`` is False for pixels whose posterior mass is below
    1e-9 (their parameters are NaN).
    """
    return _m_step_closed(
        np.asarray(n, float), np.asarray(omega, float), frame_params(L, rotations), intensities, valid, sigma_floor
    )


def tangent_basis(n: np.ndarray):
    """Two unit vectors spanning the tangent plane of each normal."""
    helper = np.zeros_like(n)
    idx = np.argmin(np.abs(n), axis=1)
    helper[np.arange(len(n)), idx] = 1.0
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def _normal_objective(n, rho, omega, theta, intensities):
    return np.sum(omega * _residual_sq(n, rho, theta, intensities), axis=1)


def normal_objective(n, rho, omega, L, intensities, rotations):
    """Weighted squared residual summed over frames and channels, per pixel."""
    return _normal_objective(np.asarray(n, float), np.asarray(rho, float), omega, frame_params(L, rotations), intensities)


def _tangent_jacobians(n, rho, theta, intensities):
    t1, t2 = tangent_basis(n)
    s, gx, gy, gz = _shade_grad(n, theta)
    r = rho[:, None, :] * s - intensities

    def along(t):
        return rho[:, None, :] * (gx * t[:, 0, None, None] + gy * t[:, 1, None, None] + gz * t[:, 2, None, None])

    return r, along(t1), along(t2), t1, t2


def normal_gradient_tangent(n, rho, omega, L, intensities, rotations):
    """Gradient of :func:`normal_objective` in tangent coordinates.

    The retraction is ``n(d) = normalize(n + d_1 t_1 + d_2 t_2)`` with
    ``(t_1, t_2)`` from :func:`tangent_basis`; at ``d = 0`` its Jacobian is
    ``[t_1 t_2]``.
    """
    n = np.asarray(n, float)
    r, J1, J2, _, _ = _tangent_jacobians(n, np.asarray(rho, float), frame_params(L, rotations), intensities)
    w = omega[..., None]
    g1 = 2 * np.sum(np.sum(w * r * J1, axis=2), axis=1)
    g2 = 2 * np.sum(np.sum(w * r * J2, axis=2), axis=1)
    return np.stack([g1, g2], axis=1)


def _m_step_normal(n, rho, omega, theta, intensities, max_inner=20, tol=1e-7):
    n = n.copy()
    P = len(n)
    converged = np.zeros(P, bool)
    E = _normal_objective(n, rho, omega, theta, intensities)
    active = np.ones(P, bool)
    for _ in range(max_inner):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        na, ra, wa, Ia = n[ia], rho[ia], omega[ia], intensities[ia]
        r, J1, J2, t1, t2 = _tangent_jacobians(na, ra, theta, Ia)
        w = wa[..., None]
        h11 = np.sum(np.sum(w * J1 * J1, axis=2), axis=1)
        h12 = np.sum(np.sum(w * J1 * J2, axis=2), axis=1)
        h22 = np.sum(np.sum(w * J2 * J2, axis=2), axis=1)
        g1 = np.sum(np.sum(w * J1 * r, axis=2), axis=1)
        g2 = np.sum(np.sum(w * J2 * r, axis=2), axis=1)
        damp = 1e-12 * (h11 + h22) + 1e-300
        h11 = h11 + damp
        h22 = h22 + damp
        det = h11 * h22 - h12 * h12
        det = np.where(det > 0, det, 1e-300)
        d1 = -(h22 * g1 - h12 * g2) / det
        d2 = -(-h12 * g1 + h11 * g2) / det
        step = np.hypot(d1, d2)
        # keep steps inside the region where the retraction is well behaved
        scale = np.minimum(1.0, 0.5 / np.maximum(step, 1e-300))
        d1 = d1 * scale
        d2 = d2 * scale
        step = step * scale
        Ea = E[ia]
        accepted = np.zeros(len(ia), bool)
        t = np.ones(len(ia))
        n_best = na.copy()
        E_best = Ea.copy()
        pending = np.arange(len(ia))
        for _ in range(12):
            tp = t[pending]
            trial = na[pending] + (tp * d1[pending])[:, None] * t1[pending] + (tp * d2[pending])[:, None] * t2[pending]
            trial /= np.linalg.norm(trial, axis=1, keepdims=True)
            Et = _normal_objective(trial, ra[pending], wa[pending], theta, Ia[pending])
            better = Et <= Ea[pending]
            hit = pending[better]
            n_best[hit] = trial[better]
            E_best[hit] = Et[better]
            accepted[hit] = True
            pending = pending[~better]
            if len(pending) == 0:
                break
            t[pending] *= 0.5
        n[ia] = n_best
        E[ia] = E_best
        done = (t * step < tol) | ~accepted
        converged[ia[done]] = True
        active[ia[done]] = False
    return n, converged


def m_step_normal_batch(n, rho, omega, L, intensities, rotations, max_inner=20, tol=1e-7):
    """Minimise the weighted normal objective by Gauss-Newton on the sphere.

    Each step solves the 2x2 Gauss-Newton system in tangent coordinates,
    retracts onto the sphere and is halved until the objective does not
    increase. A pixel converges once its step falls below ``tol`` radians
    or no decrease can be found. Returns ``(n_new, converged)``;
    non-converged pixels return their best iterate.
    """
    return _m_step_normal(
        np.asarray(n, float), np.asarray(rho, float), np.asarray(omega, float), frame_params(L, rotations), intensities, max_inner, tol
    )


# --------------------------------------------------------------------------
# drivers


def _initial_albedo(n, theta, intensities, valid):
    s = _shade(n, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(valid[..., None] & (s > 1e-6), intensities / s, np.nan)
    rho = np.nanmedian(np.where(np.all(np.isnan(ratio), axis=1, keepdims=True), 0.0, ratio), axis=1)
    return np.maximum(np.nan_to_num(rho), 1e-6)


def rotation_spread_deg(rotations: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Largest rotation angle between any valid frame and the first valid frame, per pixel."""
    F = len(rotations)
    first = np.argmax(valid, axis=1)
    rel = np.zeros((F, F))
    for i in range(F):
        for j in range(F):
            rel[i, j] = rotation_angle_deg(rotations[i].T @ rotations[j])
    spread = rel[first]  # (P, F)
    return np.max(np.where(valid, spread, 0.0), axis=1)


def recover_batch(
    intensities: np.ndarray,
    rotations: np.ndarray,
    valid: np.ndarray,
    L: QuadraticLighting,
    n_init: np.ndarray,
    cfg: EMConfig = EMConfig(),
    robust: bool = True,
    history: list | None = None,
):
    """Run EM for a batch of independent pixels.

    Args:
        intensities: ``(P, F, 3)`` aligned observations.
        rotations: ``(F, 3, 3)`` per-frame rotations (shared by all pixels).
        valid: ``(P, F)`` observation validity.
        L: lighting in reference-camera coordinates.
        n_init: ``(P, 3)`` unit initial normals.
        robust: when False every valid observation keeps weight 1 and
            ``alpha`` stays 1, which gives plain least squares with the
            same solver.
        history: optional list receiving per-iteration snapshots
            ``dict(n, rho, sigma, alpha, omega)``; for diagnostics and tests.

    Returns:
        dict of arrays: ``n, rho, sigma, alpha, omega, iterations, converged,
        recovered, degenerate``.
    """
    P, F = valid.shape
    intensities = np.asarray(intensities, float)
    n = np.array(n_init, float)
    n /= np.linalg.norm(n, axis=1, keepdims=True)

    nvalid = valid.sum(axis=1)
    degenerate = rotation_spread_deg(rotations, valid) < cfg.min_rotation_spread_deg
    solvable = (nvalid >= cfg.min_frames) & ~degenerate

    theta = frame_params(L, rotations)
    rho = _initial_albedo(n, theta, intensities, valid)
    sigma = np.full(P, cfg.sigma0)
    alpha = np.full(P, cfg.alpha0 if robust else 1.0)
    omega = np.where(valid, 1.0, 0.0)
    iterations = np.zeros(P, int)
    converged = np.zeros(P, bool)
    failed = ~solvable
    active = solvable.copy()

    for it in range(cfg.max_iters):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        Ia, Va = intensities[ia], valid[ia]
        na, ra, sa, aa = n[ia], rho[ia], sigma[ia], alpha[ia]
        if robust:
            wa = _e_step(na, ra, sa, aa, theta, Ia, Va, cfg.C)
        else:
            wa = np.where(Va, 1.0, 0.0)
        a_new, r_new, s_new, ok = _m_step_closed(na, wa, theta, Ia, Va, cfg.sigma_floor)
        if not robust:
            a_new = np.where(ok, 1.0, np.nan)
        bad = ~ok
        if bad.any():
            failed[ia[bad]] = True
            active[ia[bad]] = False
        keep = ok
        ik = ia[keep]
        r_new, s_new, a_new, wk = r_new[keep], s_new[keep], a_new[keep], wa[keep]
        n_new, _ = _m_step_normal(n[ik], r_new, wk, theta, intensities[ik], cfg.normal_max_inner)
        dang = np.degrees(np.arccos(np.clip(np.sum(n_new * n[ik], axis=1), -1, 1)))
        rho_old = rho[ik]
        with np.errstate(divide="ignore", invalid="ignore"):
            drel = np.max(np.abs(r_new - rho_old) / np.maximum(np.abs(rho_old), 1e-12), axis=1)
        n[ik], rho[ik], sigma[ik], alpha[ik] = n_new, r_new, s_new, a_new
        omega[ik] = wk
        iterations[ik] = it + 1
        done = (dang < cfg.angle_tol_deg) & (drel < cfg.rho_rel_tol)
        converged[ik[done]] = True
        active[ik[done]] = False
        if history is not None:
            history.append(
                dict(n=n.copy(), rho=rho.copy(), sigma=sigma.copy(), alpha=alpha.copy(), omega=omega.copy())
            )

    if robust:
        # posteriors consistent with the final parameters
        ok_px = ~failed
        if ok_px.any():
            i = np.flatnonzero(ok_px)
            omega[i] = _e_step(n[i], rho[i], sigma[i], alpha[i], theta, intensities[i], valid[i], cfg.C)

    recovered = ~failed
    return dict(
        n=n,
        rho=rho,
        sigma=sigma,
        alpha=alpha,
        omega=omega,
        iterations=iterations,
        converged=converged & recovered,
        recovered=recovered,
        degenerate=degenerate,
    )


def e_step(state: PixelEMState, obs: PixelObservations, L: QuadraticLighting, cfg: EMConfig = EMConfig()):
    """Posterior inlier probabilities for one pixel, shape ``(F,)``."""
    return e_step_batch(
        state.n[None],
        np.asarray(state.rho, float)[None],
        np.array([state.sigma]),
        np.array([state.alpha]),
        L,
        obs.intensities[None],
        obs.rotations,
        obs.valid[None],
        cfg.C,
    )[0]


def m_step_closed(state: PixelEMState, obs: PixelObservations, omega, L: QuadraticLighting, sigma_floor=1e-4):
    """Closed-form ``(alpha, sigma, rho)`` for one pixel.

    Raises:
        DegenerateWeights: total posterior mass below 1e-9.
    """
    a, r, s, ok = m_step_closed_batch(
        state.n[None], np.asarray(omega, float)[None], L, obs.intensities[None], obs.rotations, obs.valid[None], sigma_floor
    )
    if not ok[0]:
        raise DegenerateWeights("posterior weights sum to less than 1e-9")
    return float(a[0]), float(s[0]), r[0]


def m_step_normal(state: PixelEMState, obs: PixelObservations, L: QuadraticLighting, omega, max_inner=20):
    """Updated unit normal for one pixel and a convergence flag."""
    w = np.where(obs.valid, np.asarray(omega, float), 0.0)
    n, conv = m_step_normal_batch(
        state.n[None], np.asarray(state.rho, float)[None], w[None], L, obs.intensities[None], obs.rotations, max_inner
    )
    return n[0], bool(conv[0])


def recover_pixel(obs: PixelObservations, L: QuadraticLighting, n_init, cfg: EMConfig = EMConfig()) -> PixelEMState:
    """EM for a single pixel.

    Raises:
        TooFewObservations: fewer than ``cfg.min_frames`` valid frames.
        DegenerateWeights: the posterior mass collapsed.

    A pixel whose valid frames span less than ``cfg.min_rotation_spread_deg``
    of rotation is ill-posed; it comes back with ``degenerate=True``,
    ``converged=False`` and the initial normal.
    """
    valid = np.asarray(obs.valid, bool)
    if valid.sum() < cfg.min_frames:
        raise TooFewObservations(f"{int(valid.sum())} valid frames, need {cfg.min_frames}")
    out = recover_batch(
        obs.intensities[None], obs.rotations, valid[None], L, np.asarray(n_init, float)[None], cfg
    )
    if out["degenerate"][0]:
        n0 = np.asarray(n_init, float)
        return PixelEMState(n0 / np.linalg.norm(n0), out["rho"][0], cfg.sigma0, cfg.alpha0, np.zeros(len(valid)), 0, False, True)
    if not out["recovered"][0]:
        raise DegenerateWeights("posterior weights collapsed")
    return PixelEMState(
        out["n"][0],
        out["rho"][0],
        float(out["sigma"][0]),
        float(out["alpha"][0]),
        out["omega"][0],
        int(out["iterations"][0]),
        bool(out["converged"][0]),
        False,
    )


def recover_map(
    intensities: np.ndarray,
    valid: np.ndarray,
    rotations: np.ndarray,
    L: QuadraticLighting,
    init_normals: NormalMap,
    cfg: EMConfig = EMConfig(),
    robust: bool = True,
    chunk: int = 4096,
    threads: int = 1,
) -> RecoveryResult:
    """Recover normals and albedo for every masked pixel independently.

    Args:
        intensities: ``(H, W, F, 3)`` aligned observations.
        valid: ``(H, W, F)`` observation validity.
        rotations: ``(F, 3, 3)``.
        init_normals: depth-derived normals; their mask selects the pixels.

    ``threads`` > 1 solves chunks of pixels concurrently. Chunks are
    independent and reassembled in order, so the output does not depend on
    the thread count.

    Pixels that cannot be solved keep the initial normal, get zero albedo
    and zero confidence. Confidence is ``alpha`` for converged pixels and 0
    otherwise.
    """
    mask = init_normals.mask
    H, W = mask.shape
    idx = np.flatnonzero(mask)
    I = intensities.reshape(H * W, -1, 3)[idx]
    V = valid.reshape(H * W, -1)[idx]
    n0 = init_normals.normals.reshape(-1, 3)[idx]
    if len(idx) == 0:
        raise ValidationError("initial normal map has no valid pixels")

    def solve(s):
        return recover_batch(I[s : s + chunk], rotations, V[s : s + chunk], L, n0[s : s + chunk], cfg, robust)

    starts = range(0, len(idx), chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(solve, starts))
    else:
        parts = [solve(s) for s in starts]
    out = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}

    rec = out["recovered"]
    normals = np.zeros((H * W, 3))
    normals[idx] = np.where(rec[:, None], out["n"], n0)
    albedo = np.zeros((H * W, 3))
    albedo[idx] = np.where(rec[:, None], np.nan_to_num(out["rho"]), 0.0)

    def full(values, fill=0.0, dtype=float):
        a = np.full(H * W, fill, dtype=dtype)
        a[idx] = values
        return a.reshape(H, W)

    conf = np.where(rec & out["converged"], np.nan_to_num(out["alpha"]), 0.0)
    n_fail = int((~rec).sum())
    if n_fail:
        logger.info("%d of %d pixels fell back to the initial normal", n_fail, len(idx))
    return RecoveryResult(
        NormalMap(normals.reshape(H, W, 3), mask),
        AlbedoMap(albedo.reshape(H, W, 3), mask),
        full(conf),
        full(out["iterations"], 0, int),
        full(out["converged"], False, bool),
        full(np.nan_to_num(out["alpha"])),
        full(np.nan_to_num(out["sigma"])),
        full(rec, False, bool),
    )
