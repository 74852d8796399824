import numpy as np
import pytest

from photorefine import synth
from photorefine.core import CameraIntrinsics, DepthMap, NormalMap, normals_from_depth
from photorefine.errors import ValidationError
from photorefine.fileio import read_ply
from photorefine.integrate import IntegrationConfig, export_mesh, integrate_normals, mesh_from_depth

K = CameraIntrinsics(60.0, 60.0, 15.5, 15.5, 32, 32)


def slanted_plane(K=K, n=(0.2, -0.1, -1.0), d=2.0):
    """Depth of the plane ``n . X = -d`` and its unit normal map."""
    n = np.asarray(n, float)
    n /= np.linalg.norm(n)
    u, v = K.pixel_grid()
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1)
    z = -d / (rays @ n)
    mask = np.ones(K.shape, bool)
    return DepthMap(z, mask), NormalMap(np.broadcast_to(n, K.shape + (3,)).copy(), mask)


def test_plane_is_a_fixed_point():
    depth, normals = slanted_plane()
    res = integrate_normals(normals, depth, None, K)
    assert res.converged
    assert np.allclose(res.depth.depth, depth.depth, rtol=1e-10)


def test_plane_is_recovered_from_a_scaled_prior():
    depth, normals = slanted_plane()
    prior = DepthMap(depth.depth * 1.1, depth.mask)
    res = integrate_normals(normals, prior, None, K)
    # the normals fix the shape exactly; the prior only fixes the scale
    ratio = res.depth.depth / depth.depth
    assert np.allclose(ratio, ratio.mean(), rtol=1e-8)
    assert ratio.mean() == pytest.approx(1.1, rel=1e-6)


def test_large_lambda_returns_the_prior():
    depth, normals = slanted_plane()
    prior = DepthMap(depth.depth + 0.01 * np.sin(np.arange(32))[None, :], depth.mask)
    res = integrate_normals(normals, prior, None, K, IntegrationConfig(lambda_depth=1e6))
    assert np.allclose(res.depth.depth, prior.depth, rtol=1e-6)


def test_energies_do_not_increase():
    depth, normals = slanted_plane()
    rng = np.random.default_rng(0)
    prior = DepthMap(depth.depth * np.exp(rng.normal(0, 0.01, K.shape)), depth.mask)
    res = integrate_normals(normals, prior, None, K)
    e = res.energies
    assert len(e) > 2
    assert all(b <= a * (1 + 1e-12) for a, b in zip(e, e[1:]))


def test_zero_confidence_returns_prior_exactly():
    depth, normals = slanted_plane()
    prior = DepthMap(depth.depth * 1.03, depth.mask)
    res = integrate_normals(normals, prior, np.zeros(K.shape), K)
    assert np.array_equal(res.depth.depth, prior.depth)


def test_multiplicative_gauge():
    scene_K = synth.default_intrinsics(64)
    scene = synth.SyntheticScene(poses=synth.wobble_poses(1), K=scene_K)
    f = synth.render_frame(scene, scene.poses[0])
    prior = synth.smooth_depth(f.depth, 3.0, 1)
    a = integrate_normals(f.normals, prior, None, scene_K)
    b = integrate_normals(f.normals, DepthMap(prior.depth * 2.5, prior.mask), None, scene_K)
    m = prior.mask
    assert np.allclose(b.depth.depth[m], 2.5 * a.depth.depth[m], rtol=1e-7)


def test_shape_mismatch():
    depth, normals = slanted_plane()
    small = DepthMap(np.ones((8, 8)), np.ones((8, 8), bool))
    with pytest.raises(ValidationError):
        integrate_normals(normals, small, None, K)
    with pytest.raises(ValidationError):
        integrate_normals(normals, depth, np.ones((3, 3)), K)


def test_mesh_of_a_two_by_two_block():
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    d = DepthMap(np.where(mask, 2.0, 0.0), mask)
    Kc = CameraIntrinsics(10.0, 10.0, 1.5, 1.5, 4, 4)
    verts, faces, vn = mesh_from_depth(d, Kc)
    assert len(verts) == 4 and len(faces) == 2
    assert np.allclose(vn, [0.0, 0.0, -1.0])


def test_mesh_of_a_plane():
    depth, normals = slanted_plane()
    verts, faces, vn = mesh_from_depth(depth, K)
    assert len(verts) == 32 * 32
    assert len(faces) == 2 * 31 * 31
    assert np.allclose(vn, normals.normals[0, 0], atol=1e-9)


def test_mesh_breaks_at_discontinuities():
    z = np.full((4, 4), 2.0)
    z[:, 2:] = 3.0
    d = DepthMap(z, np.ones((4, 4), bool))
    _, faces, _ = mesh_from_depth(d, CameraIntrinsics(10.0, 10.0, 1.5, 1.5, 4, 4))
    assert len(faces) == 2 * 3 * 2  # the middle column of cells is cut


def test_mesh_export_round_trip(tmp_path):
    depth, _ = slanted_plane()
    verts, faces, vn = export_mesh(tmp_path / "m.ply", depth, K)
    v2, f2, n2 = read_ply(tmp_path / "m.ply")
    assert np.array_equal(f2, faces)
    assert np.allclose(v2, verts, atol=1e-6) and np.allclose(n2, vn, atol=1e-6)


def test_normals_of_integrated_surface_follow_input():
    depth, normals = slanted_plane()
    res = integrate_normals(normals, DepthMap(depth.depth * 0.9, depth.mask), None, K)
    n = normals_from_depth(res.depth, K)
    inner = n.mask.copy()
    inner[[0, -1]] = False
    inner[:, [0, -1]] = False
    assert np.allclose(n.normals[inner], normals.normals[inner], atol=1e-8)
