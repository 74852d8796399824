"""Lighting estimation from albedo-cancelling intensity ratios.

A reference pixel ``p`` and its match ``q`` in frame ``k`` see the same
albedo, so ``I_k(q) / I_ref(p) = s(n_q) / s(n_p)``. The ratio depends only
on the lighting and on the two normals. Both normals come from the key-frame
depth maps. ``n_q`` is taken from frame ``k``'s own map and rotated back
into the reference frame, so the numerator becomes ``s_k(R_k^T n_q)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core import NormalMap, RadianceImage, rotation_angle_deg, sample_bilinear_many
from .errors import InsufficientObservations, ValidationError
from .match import CorrespondenceField
from .shading import QuadraticLighting, gauge_normalize, quadratic_features, shade_many

log = logging.getLogger(__name__)


class DegenerateMotion(UserWarning):
    """All key-frame rotations are nearly equal, so ratios carry no lighting information."""


@dataclass(frozen=True)
class LightingConfig:
    tau_dark: float = 0.02
    max_observations: int = 20000
    min_observations: int = 200
    min_frames: int = 5
    den_guard: float = 1e-3
    max_iters: int = 100
    tol: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.tau_dark <= 0 or self.max_observations < 1:
            raise ValidationError("tau_dark and max_observations must be positive")


@dataclass(frozen=True)
class RatioSet:
    """Ratio observations, one row per (reliable pixel, frame); channels in the last axis.

    ``n_p`` is in reference coordinates; ``n_q`` is in frame ``k`` camera
    coordinates. ``rotations[frame]`` maps reference to frame ``k``.
    """

    pixel: np.ndarray  # (N, 2) reference (u, v)
    frame: np.ndarray  # (N,)
    ratio: np.ndarray  # (N, 3)
    n_p: np.ndarray  # (N, 3)
    n_q: np.ndarray  # (N, 3)
    gamma: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (F, 3, 3)

    def __len__(self) -> int:
        return len(self.frame)

    def subset(self, idx) -> "RatioSet":
        return RatioSet(
            self.pixel[idx], self.frame[idx], self.ratio[idx], self.n_p[idx], self.n_q[idx], self.gamma[idx], self.rotations
        )

    def n_q_reference(self) -> np.ndarray:
        """``R_k^T n_q``: the frame-``k`` normals expressed in reference coordinates."""
        R = self.rotations[self.frame]
        return np.einsum("nji,nj->ni", R, self.n_q)


def dark_weight(intensity, tau: float = 0.02):
    """Smoothstep from 0 at ``tau`` to 1 at ``2 * tau``."""
    t = np.clip((np.asarray(intensity, float) - tau) / tau, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def build_ratio_set(
    ref_img: RadianceImage,
    frames: list[RadianceImage],
    correspondences: list[CorrespondenceField],
    ref_normals: NormalMap,
    frame_normals: list[NormalMap],
    rotations: np.ndarray,
    cfg: LightingConfig = LightingConfig(),
) -> RatioSet:
    """Collect ratios at reliable matches of every frame.

    Observations whose reference intensity is zero, or whose normals cannot
    be sampled, are skipped.
    """
    if not (len(frames) == len(correspondences) == len(frame_normals) == len(rotations)):
        raise ValidationError("frames, correspondences, normals and rotations differ in length")
    parts = []
    for k, (img, cf, nm) in enumerate(zip(frames, correspondences, frame_normals)):
        sel = cf.reliable & ref_normals.mask & ref_img.mask
        v, u = np.nonzero(sel)
        if len(u) == 0:
            continue
        qu, qv = cf.q[v, u, 0], cf.q[v, u, 1]
        Ik, ok_i = sample_bilinear_many(img.pixels, img.mask, qu, qv)
        nq, ok_n = sample_bilinear_many(nm.normals, nm.mask, qu, qv)
        norm = np.linalg.norm(nq, axis=1)
        Ir = ref_img.pixels[v, u]
        ok = ok_i & ok_n & (norm > 1e-6) & np.all(Ir > 0, axis=1)
        if not ok.any():
            continue
        nq = nq[ok] / norm[ok, None]
        Ir, Ik = Ir[ok], Ik[ok]
        parts.append(
            (
                np.stack([u[ok], v[ok]], axis=1),
                np.full(ok.sum(), k),
                Ik / Ir,
                ref_normals.normals[v[ok], u[ok]],
                nq,
                dark_weight(np.minimum(Ir, Ik), cfg.tau_dark),
            )
        )
    if not parts:
        empty = np.zeros((0, 3))
        return RatioSet(np.zeros((0, 2), int), np.zeros(0, int), empty, empty, empty, empty, np.asarray(rotations, float))
    cols = [np.concatenate(c) for c in zip(*parts)]
    return RatioSet(*cols, np.asarray(rotations, float))


def _model(theta, phi_q, phi_p, guard):
    num = phi_q @ theta
    den = phi_p @ theta
    use = np.abs(den) >= guard
    safe = np.where(use, den, 1.0)
    return num / safe, num, safe, use


def ratio_objective(L: QuadraticLighting, obs: RatioSet, guard: float = 1e-3) -> float:
    """Weighted sum of squared ratio residuals over all channels."""
    phi_q = _numerator_features(obs)
    phi_p = quadratic_features(obs.n_p)
    params = L.params()
    total = 0.0
    for ch in range(3):
        f, _, _, use = _model(params[ch], phi_q, phi_p, guard)
        r = np.where(use, f - obs.ratio[:, ch], 0.0)
        total += float(np.sum(obs.gamma[:, ch] * r * r))
    return total


def _numerator_features(obs: RatioSet) -> np.ndarray:
    # s_k(R_k^T n_q) with s_k = rotate_lighting(L, R_k) equals s(n_q), so the
    # numerator design rows are the features of the frame-k normal itself.
    n_ref = obs.n_q_reference()
    n_k = np.einsum("nij,nj->ni", obs.rotations[obs.frame], n_ref)
    return quadratic_features(n_k)


def _lm_channel(theta, phi_q, phi_p, ratio, gamma, cfg: LightingConfig, history: list | None):
    sw = np.sqrt(gamma)

    def residuals(th):
        f, num, den, use = _model(th, phi_q, phi_p, cfg.den_guard)
        r = np.where(use, sw * (f - ratio), 0.0)
        return r, num, den, use

    r, num, den, use = residuals(theta)
    E = float(r @ r)
    mu = 1e-3
    for _ in range(cfg.max_iters):
        J = sw[:, None] * (phi_q * den[:, None] - num[:, None] * phi_p) / (den * den)[:, None]
        J[~use] = 0.0
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        while mu < 1e12:
            Hm = JtJ + mu * np.diag(np.diag(JtJ) + 1e-12)
            step = -np.linalg.solve(Hm, g)
            trial = theta + step
            r_t, num_t, den_t, use_t = residuals(trial)
            E_t = float(r_t @ r_t)
            if E_t <= E:
                improved = True
                break
            mu *= 10
        if not improved:
            break
        dE = E - E_t
        theta, r, num, den, use, E = trial, r_t, num_t, den_t, use_t, E_t
        # the objective is scale free; keep the mean denominator at 1
        scale = float(np.mean(den[use])) if use.any() else 1.0
        if scale > 0:
            theta = theta / scale
            r, num, den, use = residuals(theta)
            E = float(r @ r)
        mu = max(mu / 10, 1e-12)
        if history is not None:
            history.append(E)
        if dE <= cfg.tol * max(E, 1e-300) or E < 1e-30:
            break
    return theta, E


def estimate_lighting(
    obs: RatioSet,
    gauge_normals: np.ndarray,
    initial: QuadraticLighting | None = None,
    cfg: LightingConfig = LightingConfig(),
    history: dict | None = None,
) -> QuadraticLighting:
    """Levenberg-Marquardt fit of per-channel quadratic lighting to the ratios.

    Args:
        obs: ratio observations.
        gauge_normals: ``(M, 3)`` reference-mask normals used to fix the
            scale (mean shading 1 per channel).
        initial: starting lighting, ambient ``c = 1`` when omitted.
        history: optional dict receiving the per-channel objective sequence.

    Raises:
        InsufficientObservations: fewer than ``cfg.min_observations`` rows
            or fewer than ``cfg.min_frames`` distinct frames.
    """
    if len(obs) < cfg.min_observations:
        raise InsufficientObservations(f"{len(obs)} ratio observations, need {cfg.min_observations}")
    used_frames = np.unique(obs.frame)
    if len(used_frames) < cfg.min_frames:
        raise InsufficientObservations(f"observations span {len(used_frames)} frames, need {cfg.min_frames}")
    R = obs.rotations[used_frames]
    spread = max(rotation_angle_deg(R[0].T @ Ri) for Ri in R)
    if spread < 1.0:
        warnings.warn("all key-frame rotations lie within 1 degree; lighting is unobservable", DegenerateMotion, stacklevel=2)

    if len(obs) > cfg.max_observations:
        rng = np.random.default_rng(cfg.seed)
        obs = obs.subset(np.sort(rng.choice(len(obs), cfg.max_observations, replace=False)))

    phi_q = _numerator_features(obs)
    phi_p = quadratic_features(obs.n_p)
    start = (initial or QuadraticLighting.ambient(1.0)).params()
    out = np.zeros((3, 10))
    for ch in range(3):
        hist = [] if history is not None else None
        out[ch], E = _lm_channel(start[ch].copy(), phi_q, phi_p, obs.ratio[:, ch], obs.gamma[:, ch], cfg, hist)
        log.debug("lighting channel %d: objective %.3e", ch, E)
        if history is not None:
            history[ch] = hist
    L = QuadraticLighting.from_params(out).canonical()
    return gauge_normalize(L, gauge_normals)


def shading_alignment_error(L_est: QuadraticLighting, L_true: QuadraticLighting, normals: np.ndarray) -> np.ndarray:
    """Per-channel relative RMS between shading fields after the best scalar alignment."""
    a = shade_many(L_est, normals)
    b = shade_many(L_true, normals)
    scale = np.sum(a * b, axis=0) / np.sum(a * a, axis=0)
    resid = a * scale - b
    return np.sqrt(np.mean(resid**2, axis=0)) / np.sqrt(np.mean(b**2, axis=0))


def ratio_residuals(L: QuadraticLighting, obs: RatioSet, guard: float = 1e-3) -> np.ndarray:
    """``(N, 3)`` model-minus-observed ratios; NaN where the denominator is guarded out."""
    phi_q = _numerator_features(obs)
    phi_p = quadratic_features(obs.n_p)
    params = L.params()
    out = np.full(obs.ratio.shape, np.nan)
    for ch in range(3):
        f, _, _, use = _model(params[ch], phi_q, phi_p, guard)
        out[use, ch] = f[use] - obs.ratio[use, ch]
    return out


def residual_histogram(residuals: np.ndarray, bins: int = 41, limit: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel counts of residuals in ``bins`` equal bins over ``[-limit, limit]``.

    Values outside the range are clipped into the end bins. Returns
    ``(edges (bins + 1,), counts (bins, 3))``.
    """
    edges = np.linspace(-limit, limit, bins + 1)
    counts = np.zeros((bins, residuals.shape[1]), int)
    for ch in range(residuals.shape[1]):
        r = residuals[:, ch]
        r = np.clip(r[np.isfinite(r)], -limit, limit)
        counts[:, ch] = np.histogram(r, edges)[0]
    return edges, counts
