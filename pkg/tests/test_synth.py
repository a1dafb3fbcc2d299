import numpy as np
import pytest

from depthcal.depthmaps import project_points, project_subpixel
from depthcal.errors import EmptyScene
from depthcal.geometry import RigidTransform, compose
from depthcal.synth import (
    CAM_BASE_ROTATION,
    CalibrationCase,
    Rect,
    Scene,
    SceneConfig,
    generate_scene,
    make_case,
    render_camera_depth,
    scan_lidar,
)

SMALL = SceneConfig(seed=3, num_planes=4, num_boxes=5, width=320, height=96,
                    fx=240.0, fy=240.0, cx=160.0, cy=48.0,
                    lidar_rings=40, lidar_azimuth_steps=512,
                    lidar_elevation_deg=(-14.0, 4.0))


def test_same_seed_bit_identical():
    a = generate_scene(SMALL)
    b = generate_scene(SMALL)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert np.array_equal(a.camera_depth.values, b.camera_depth.values)
    assert np.array_equal(a.t_gt.rotation, b.t_gt.rotation)
    assert np.array_equal(a.t_gt.translation, b.t_gt.translation)


def test_different_seed_differs():
    a = generate_scene(SMALL)
    b = generate_scene(SceneConfig(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a.cloud.points, b.cloud.points)


def test_camera_depth_dense_and_positive():
    s = generate_scene(SMALL)
    assert s.camera_depth.valid.all()
    assert s.camera_depth.values.min() > 0


def test_cross_sensor_consistency():
    s = generate_scene(SMALL)
    uv, depth, in_front = project_subpixel(s.cloud.points, s.intrinsics, s.t_gt)
    h, w = s.camera_depth.shape
    inb = in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) \
        & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    assert inb.sum() > 500
    # bilinear sample of the rendered depth at the exact projection
    from scipy.ndimage import map_coordinates
    sampled = map_coordinates(s.camera_depth.values,
                              [uv[inb, 1], uv[inb, 0]], order=1)
    agree = np.abs(sampled - depth[inb]) <= 2.0 * SMALL.texture_amplitude + 1e-9
    assert agree.mean() >= 0.95


def test_lidar_sparsity_in_band():
    cfg = SceneConfig(seed=11)
    s = generate_scene(cfg)
    sparse, _ = project_points(s.cloud, s.intrinsics, s.t_gt)
    frac = sparse.valid.mean()
    assert 0.02 <= frac <= 0.25, frac


def test_single_fronto_parallel_plane_analytic():
    # untextured plane 10 m in front of the camera, identity-like setup
    t_gt = RigidTransform(CAM_BASE_ROTATION, np.zeros(3))
    plane = Rect(center=(10.0, 0.0, 0.0), axis1=(0, 1, 0), axis2=(0, 0, 1),
                 half1=3.0, half2=3.0, amplitude=0.0)
    backdrop = Rect(center=(60.0, 0.0, 0.0), axis1=(0, 1, 0), axis2=(0, 0, 1),
                    half1=80.0, half2=40.0, amplitude=0.0)
    scene = Scene((plane, backdrop))
    k = SMALL.intrinsics()
    depth = render_camera_depth(scene, k, t_gt)
    # plane extent: |y| <= 3, |z| <= 3 at x = 10 -> center block of pixels
    on_plane = np.abs(depth.values - 10.0) < 1e-9
    assert on_plane[48, 160]
    assert np.abs(depth.values[on_plane] - 10.0).max() < 1e-9
    assert (depth.values[~on_plane] > 10.0).all()


def test_empty_scene_raises():
    scene = Scene((Rect(center=(-30.0, 0.0, 0.0), axis1=(0, 1, 0),
                        axis2=(0, 0, 1), half1=5.0, half2=5.0),))
    k = SMALL.intrinsics()
    with pytest.raises(EmptyScene):
        render_camera_depth(scene, k, RigidTransform(CAM_BASE_ROTATION,
                                                     np.zeros(3)))
    with pytest.raises(EmptyScene):
        scan_lidar(scene, SMALL, max_range=10.0)


def test_make_case_zero_ranges():
    case = make_case(SMALL, 0.0, 0.0, seed=5)
    assert case.delta.is_close(RigidTransform.identity())
    assert case.t_init.is_close(case.scene.t_gt)


def test_make_case_answer_within_ranges():
    case = make_case(SMALL, 10.0, 0.25, seed=6)
    from depthcal.geometry import rotation_to_euler
    e = rotation_to_euler(case.delta.rotation)
    assert np.abs(np.degrees(e.as_array())).max() <= 10.0
    assert np.abs(case.delta.translation).max() <= 0.25
    assert compose(case.delta, case.t_init).is_close(case.scene.t_gt, tol=1e-9)


def test_make_case_reproducible_suite():
    cases_a = [make_case(SMALL, 10.0, 0.25, seed=s) for s in range(3)]
    cases_b = [make_case(SMALL, 10.0, 0.25, seed=s) for s in range(3)]
    for a, b in zip(cases_a, cases_b):
        assert np.array_equal(a.delta.rotation, b.delta.rotation)
        assert np.array_equal(a.scene.cloud.points, b.scene.cloud.points)
    # different perturbation seeds give different answers on the same scene
    assert not np.array_equal(cases_a[0].delta.translation,
                              cases_a[1].delta.translation)


def test_outlier_patch_region_and_area():
    cfg = SceneConfig(**{**SMALL.__dict__, "outlier_patch_fraction": 0.2})
    clean = generate_scene(SMALL)
    patched = generate_scene(cfg)
    assert patched.patch_region is not None
    v0, v1, u0, u1 = patched.patch_region
    area = (v1 - v0) * (u1 - u0) / (cfg.height * cfg.width)
    assert 0.15 <= area <= 0.25
    # outside the patch the render is identical; inside it differs
    mask = np.zeros(clean.camera_depth.shape, bool)
    mask[v0:v1, u0:u1] = True
    assert np.array_equal(clean.camera_depth.values[~mask],
                          patched.camera_depth.values[~mask])
    assert not np.allclose(clean.camera_depth.values[mask],
                           patched.camera_depth.values[mask])
    # the cloud is untouched
    assert np.array_equal(clean.cloud.points, patched.cloud.points)
