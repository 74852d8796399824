"""Order-2 quadratic shading model ``s(n) = n^T A n + b^T n + c``.

Lighting is held per colour channel. Solvers work on a flat 10-vector per
channel ordered as the six upper-triangle entries of ``A`` (``a00 a01 a02
a11 a12 a22``), then ``b``, then ``c``; :func:`quadratic_features` is the
matching design row so that ``s(n) = quadratic_features(n) @ params``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AlbedoMap, NormalMap, RadianceImage
from .errors import ValidationError

CHANNELS = ("R", "G", "B")
_IU = np.triu_indices(3)


@dataclass(frozen=True)
class QuadraticLighting:
    """Per-channel quadratic lighting.

    Attributes:
        A: ``(3, 3, 3)`` stack of symmetric matrices, one per channel.
        b: ``(3, 3)`` linear terms, one row per channel.
        c: ``(3,)`` constant terms.
        gauge_scale: factor already applied by gauge normalisation
            (1.0 when none has been applied).
    """

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    gauge_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        A = np.array(self.A, float).reshape(3, 3, 3)
        b = np.array(self.b, float).reshape(3, 3)
        c = np.array(self.c, float).reshape(3)
        g = np.broadcast_to(np.array(self.gauge_scale, float), (3,)).copy()
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ValidationError("lighting coefficients must be finite")
        if np.abs(A - A.transpose(0, 2, 1)).max() > 1e-12:
            raise ValidationError("A must be symmetric")
        A = 0.5 * (A + A.transpose(0, 2, 1))
        for arr in (A, b, c, g):
            arr.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "gauge_scale", g)

    @classmethod
    def ambient(cls, level: float = 1.0) -> "QuadraticLighting":
        return cls(np.zeros((3, 3, 3)), np.zeros((3, 3)), np.full(3, float(level)))

    @classmethod
    def gray(cls, A, b, c) -> "QuadraticLighting":
        """Same ``(A, b, c)`` triple on every channel."""
        A = np.asarray(A, float)
        return cls(np.stack([A] * 3), np.stack([np.asarray(b, float)] * 3), np.full(3, float(c)))

    @classmethod
    def from_params(cls, params: np.ndarray, gauge_scale=1.0) -> "QuadraticLighting":
        """Build from a ``(3, 10)`` parameter array."""
        params = np.asarray(params, float).reshape(3, 10)
        A = np.zeros((3, 3, 3))
        for ch in range(3):
            A[ch][_IU] = params[ch, :6]
            A[ch] = A[ch] + np.triu(A[ch], 1).T
        return cls(A, params[:, 6:9], params[:, 9], gauge_scale)

    def params(self) -> np.ndarray:
        """``(3, 10)`` parameter array (see module docstring)."""
        out = np.zeros((3, 10))
        for ch in range(3):
            out[ch, :6] = self.A[ch][_IU]
        out[:, 6:9] = self.b
        out[:, 9] = self.c
        return out

    def scaled(self, factors) -> "QuadraticLighting":
        f = np.broadcast_to(np.asarray(factors, float), (3,))
        return QuadraticLighting(
            self.A * f[:, None, None], self.b * f[:, None], self.c * f, self.gauge_scale * f
        )

    def canonical(self) -> "QuadraticLighting":
        """Equivalent lighting with traceless ``A``.

        On unit normals ``n^T I n = 1``, so moving ``tr(A)/3`` from ``A`` into
        ``c`` leaves every shading value unchanged.
        """
        tr = np.trace(self.A, axis1=1, axis2=2) / 3.0
        return QuadraticLighting(
            self.A - tr[:, None, None] * np.eye(3), self.b, self.c + tr, self.gauge_scale
        )

    def to_dict(self) -> dict:
        p = self.params()
        return {
            "format": "quadratic-lighting",
            "parameter_order": ["a00", "a01", "a02", "a11", "a12", "a22", "b0", "b1", "b2", "c"],
            "channels": {
                name: {
                    "A_upper": p[ch, :6].tolist(),
                    "b": p[ch, 6:9].tolist(),
                    "c": float(p[ch, 9]),
                    "gauge_scale": float(self.gauge_scale[ch]),
                }
                for ch, name in enumerate(CHANNELS)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadraticLighting":
        try:
            chans = [d["channels"][name] for name in CHANNELS]
            params = np.array([c["A_upper"] + c["b"] + [c["c"]] for c in chans], float)
            gauge = [c.get("gauge_scale", 1.0) for c in chans]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed lighting JSON: {exc}") from exc
        return cls.from_params(params, gauge)


def save_lighting(path, L: QuadraticLighting) -> None:
    Path(path).write_text(json.dumps(L.to_dict(), indent=2))


def load_lighting(path) -> QuadraticLighting:
    return QuadraticLighting.from_dict(json.loads(Path(path).read_text()))


def quadratic_features(n: np.ndarray) -> np.ndarray:
    """Design rows for the 10-parameter model, shape ``n.shape[:-1] + (10,)``."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack(
        [x * x, 2 * x * y, 2 * x * z, y * y, 2 * y * z, z * z, x, y, z, np.ones_like(x)],
        axis=-1,
    )


def shade(L: QuadraticLighting, n, ch: int) -> float:
    """Shading of one unit normal on channel ``ch``."""
    n = np.asarray(n, float)
    return float(n @ L.A[ch] @ n + L.b[ch] @ n + L.c[ch])


def shade_many(L: QuadraticLighting, normals: np.ndarray) -> np.ndarray:
    """Shading of an array of normals ``(..., 3)`` on all channels ``(..., 3)``."""
    quad = np.einsum("...i,cij,...j->...c", normals, L.A, normals)
    lin = normals @ L.b.T
    return quad + lin + L.c


def render(L: QuadraticLighting, normals: NormalMap, albedo: AlbedoMap) -> np.ndarray:
    """Unclamped radiance ``albedo * shading`` on the shared mask, 0 elsewhere.

    Returns a raw ``(H, W, 3)`` array; wrap it with :func:`to_radiance_image`
    when exporting.
    """
    if not np.array_equal(normals.mask, albedo.mask):
        raise ValidationError("normal and albedo masks differ")
    mask = normals.mask
    out = np.zeros(albedo.albedo.shape)
    out[mask] = albedo.albedo[mask] * shade_many(L, normals.normals[mask])
    return out


def to_radiance_image(pixels: np.ndarray, mask: np.ndarray) -> RadianceImage:
    """Clamp to ``[0, 1]`` for export."""
    return RadianceImage(np.clip(pixels, 0.0, 1.0), mask)


def rotate_lighting(L: QuadraticLighting, R: np.ndarray) -> QuadraticLighting:
    """Express lighting in a rotated frame: ``shade(result, n) == shade(L, R @ n)``."""
    R = np.asarray(R, float)
    A = np.einsum("ji,cjk,kl->cil", R, L.A, R)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    return QuadraticLighting(A, L.b @ R, L.c, L.gauge_scale)


def gauge_normalize(L: QuadraticLighting, normals: np.ndarray) -> QuadraticLighting:
    """Scale each channel so the mean shading over ``normals`` equals 1."""
    mean = shade_many(L, normals.reshape(-1, 3)).mean(axis=0)
    if np.any(mean <= 0):
        raise ValidationError("mean shading must be positive to fix the gauge")
    return L.scaled(1.0 / mean)


def sphere_quadrature(n_theta: int = 96, n_phi: int = 192):
    """Gauss-Legendre (in cos theta) x uniform (in phi) rule on the unit sphere.

    Returns ``(directions (N, 3), weights (N,))`` with weights summing to 4*pi.
    """
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * (2 * np.pi / n_phi)
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    weights = np.repeat(w * (2 * np.pi / n_phi), n_phi)
    return dirs, weights


def project_irradiance(irradiance, n_theta: int = 96, n_phi: int = 192) -> np.ndarray:
    """L2-project a function of the normal onto the quadratic model.

    ``irradiance`` maps ``(N, 3)`` unit normals to ``(N,)`` or ``(N, 3)``
    values. The span of ``{1, n_i, n_i n_j}`` on the sphere equals spherical
    harmonics up to order 2, so this is the order-2 SH projection.

    Returns:
        ``(3, 10)`` parameter array with traceless ``A``.
    """
    dirs, w = sphere_quadrature(n_theta, n_phi)
    vals = np.asarray(irradiance(dirs), float)
    if vals.ndim == 1:
        vals = np.repeat(vals[:, None], 3, axis=1)
    sw = np.sqrt(w)[:, None]
    Phi = quadratic_features(dirs) * sw
    params, *_ = np.linalg.lstsq(Phi, vals * sw, rcond=None)
    L = QuadraticLighting.from_params(params.T).canonical()
    return L.params()


def directional_irradiance(direction, intensity=1.0):
    """Irradiance ``intensity * max(0, n . l)`` of a distant directional light.

    ``direction`` points from the surface toward the light.
    """
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    inten = np.broadcast_to(np.asarray(intensity, float), (3,))

    def irr(n):
        return np.maximum(0.0, n @ d)[:, None] * inten

    return irr


def directional_plus_ambient(direction, intensity, ambient) -> QuadraticLighting:
    """Order-2 lighting of one directional light plus a uniform ambient term."""
    params = project_irradiance(directional_irradiance(direction, intensity))
    params[:, 9] += np.broadcast_to(np.asarray(ambient, float), (3,))
    return QuadraticLighting.from_params(params)
