import numpy as np
import pytest

from photorefine import synth
from photorefine.core import DepthMap, RigidPose, project
from photorefine.errors import SurfaceOutOfFrustum, ValidationError
from photorefine.shading import QuadraticLighting, render, shade_many


def test_reference_frame_is_the_rendered_model(frames, scene):
    ref = frames[0]
    expect = render(scene.lighting, ref.normals, ref.albedo)
    assert np.allclose(ref.image.pixels, expect, atol=1e-12)


def test_ambient_lighting_shows_albedo():
    scene = synth.SyntheticScene(lighting=QuadraticLighting.ambient(1.0), poses=synth.wobble_poses(2))
    f = synth.render_frame(scene, scene.poses[0])
    assert np.allclose(f.image.pixels[f.image.mask], f.albedo.albedo[f.image.mask], atol=1e-12)


def test_frame_radiance_uses_rotated_normals(frames, scene):
    f = frames[7]
    m = f.image.mask
    X = f.points[m]
    n_ref = scene.surface.normal(X)
    expect = scene.albedo_spec.evaluate(X) * shade_many(scene.lighting, n_ref @ f.pose.R.T)
    assert np.allclose(f.image.pixels[m], expect, atol=1e-9)
    # the stored point, moved by the pose, projects back onto its own pixel
    u, v = scene.K.pixel_grid()
    pu, pv, z = project(f.pose.apply(X), scene.K)
    assert np.allclose(pu, u[m], atol=1e-6) and np.allclose(pv, v[m], atol=1e-6)
    assert np.allclose(z, f.depth.depth[m], atol=1e-9)


def test_reference_pose_and_mask(frames):
    assert np.array_equal(frames[0].pose.R, np.eye(3))
    assert 0.2 < frames[0].depth.mask.mean() < 0.8


def test_smooth_depth_zero_strength_is_identity(frames):
    d = frames[0].depth
    assert synth.smooth_depth(d, 0.0) is d
    assert synth.smooth_depth(d, 4.0, 0) is d


def test_smooth_depth_keeps_a_plane():
    mask = np.zeros((40, 40), bool)
    mask[5:35, 8:30] = True
    yy, xx = np.mgrid[:40, :40]
    plane = np.where(mask, 2.0 + 0.01 * xx - 0.005 * yy, 0.0)
    for order in (1, 2):
        out = synth.smooth_depth(DepthMap(plane, mask), 3.0, 2, order)
        assert np.allclose(out.depth[mask], plane[mask], atol=1e-9)
    flat = DepthMap(np.where(mask, 1.7, 0.0), mask)
    assert np.allclose(synth.smooth_depth(flat, 3.0, 1, 0).depth[mask], 1.7)


def test_smooth_depth_removes_ripple_and_keeps_quadric():
    yy, xx = np.mgrid[:64, :64].astype(float)
    mask = (xx - 32) ** 2 + (yy - 32) ** 2 < 28**2
    quadric = 2.0 + 1e-4 * ((xx - 32) ** 2 + (yy - 32) ** 2)
    ripple = 0.005 * np.sin(2 * np.pi * xx / 6.0)
    d = DepthMap(np.where(mask, quadric + ripple, 0.0), mask)
    out = synth.smooth_depth(d, 4.0, 1)
    inner = (xx - 32) ** 2 + (yy - 32) ** 2 < 16**2
    before = np.sqrt(np.mean(ripple[inner] ** 2))
    after = np.sqrt(np.mean((out.depth - quadric)[inner] ** 2))
    assert after < 0.01 * before


def test_salt_pepper_density(frames):
    img = frames[0].image
    assert np.array_equal(synth.corrupt_salt_pepper(img, 0.0, 1).pixels, img.pixels)
    full = synth.corrupt_salt_pepper(img, 1.0, 1).pixels[img.mask]
    assert np.all((full == 0.0) | (full == 1.0))
    assert np.all(full == full[:, :1])  # whole pixels, not channels
    half = synth.corrupt_salt_pepper(img, 0.5, 2)
    changed = np.any(half.pixels != img.pixels, axis=2)[img.mask].mean()
    assert changed == pytest.approx(0.5, abs=0.02)
    assert not np.any(half.pixels[~img.mask])
    with pytest.raises(ValidationError):
        synth.corrupt_salt_pepper(img, 1.5, 0)


def test_salt_pepper_is_deterministic(frames):
    img = frames[3].image
    a = synth.corrupt_salt_pepper(img, 0.3, 9).pixels
    b = synth.corrupt_salt_pepper(img, 0.3, 9).pixels
    assert np.array_equal(a, b)


def test_perturb_poses(scene):
    poses = list(scene.poses)
    same = synth.perturb_poses(poses, 0.0, 0.0, 4)
    assert all(np.allclose(p.R, q.R) and np.allclose(p.T, q.T) for p, q in zip(poses, same))
    noisy = synth.perturb_poses(poses, 0.01, 1.0, 4)
    assert noisy[0] is poses[0]
    assert all(np.linalg.norm(p.T - q.T) > 0 for p, q in zip(poses[1:], noisy[1:]))


def test_translation_sigma_gives_mean_shift():
    K = synth.default_intrinsics()
    z = 1.2
    sigma = synth.translation_sigma_for_pixels(3.0, K, z)
    rng = np.random.default_rng(0)
    t = sigma * rng.normal(size=(200000, 2))
    shift = np.linalg.norm(t, axis=1) * K.fx / z
    assert shift.mean() == pytest.approx(3.0, rel=0.01)


def test_rendering_is_deterministic(scene):
    a = synth.render_frame(scene, scene.poses[5])
    b = synth.render_frame(scene, scene.poses[5])
    assert np.array_equal(a.image.pixels, b.image.pixels)
    assert np.array_equal(a.depth.depth, b.depth.depth)


def test_surface_out_of_frustum():
    far = synth.SyntheticScene(surface=synth.Sphere((5.0, 0.0, 1.5), 0.5), poses=synth.wobble_poses(1))
    with pytest.raises(SurfaceOutOfFrustum):
        synth.render_frame(far, far.poses[0])
    big = synth.SyntheticScene(surface=synth.Sphere((0.0, 0.0, 1.5), 1.2), poses=synth.wobble_poses(1))
    with pytest.raises(SurfaceOutOfFrustum):
        synth.render_frame(big, big.poses[0])


def test_pose_generators():
    w = synth.wobble_poses(20)
    o = synth.orbit_poses(10, 3.0)
    for poses in (w, o):
        assert np.allclose(poses[0].R, np.eye(3)) and np.allclose(poses[0].T, 0)
    from photorefine.core import rotation_angle_deg

    assert rotation_angle_deg(o[1].R) == pytest.approx(3.0, abs=1e-9)
    assert max(rotation_angle_deg(p.R) for p in w) > 20
