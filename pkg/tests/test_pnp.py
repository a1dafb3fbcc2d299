import math

import numpy as np
import pytest

from depthcal.depthmaps import CameraIntrinsics, DepthMap, PointCloud, SPARSE
from depthcal.errors import DegenerateConfiguration, InsufficientPoints, \
    NoConsensus
from depthcal.geometry import EulerAngles, RigidTransform, compose, \
    euler_to_rotation, invert, pose_error
from depthcal.matching import ProbabilisticFlowField
from depthcal.pnp import (
    Correspondence,
    RansacConfig,
    correspondences_from_flow,
    correspondences_to_csv,
    epnp,
    ransac_pnp,
    reprojection_errors,
)

K = CameraIntrinsics(fx=718.0, fy=718.0, cx=480.0, cy=160.0,
                     width=960, height=320)


def random_pose(rng, rot=0.6, trans=2.0):
    angles = EulerAngles(*rng.uniform(-rot, rot, 3))
    return RigidTransform(euler_to_rotation(angles), rng.uniform(-trans, trans, 3))


def synthetic_correspondences(rng, pose, n, depth=(4.0, 40.0), noise_px=0.0):
    """Forward-projection oracle: exact pixels of world points under pose."""
    u = rng.uniform(0, K.width - 1, n)
    v = rng.uniform(0, K.height - 1, n)
    z = rng.uniform(*depth, n)
    cam = np.column_stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    world = invert(pose).apply(cam)
    pix = np.column_stack([u, v])
    if noise_px > 0:
        pix = pix + rng.normal(0, noise_px, pix.shape)
    return [Correspondence(w, p) for w, p in zip(world, pix)]


def pose_gap(a, b):
    cos = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    ang = math.acos(min(1.0, max(-1.0, cos)))
    return ang, float(np.linalg.norm(a.translation - b.translation))


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------

def test_epnp_eight_points_exact():
    rng = np.random.default_rng(0)
    pose = random_pose(rng)
    corr = synthetic_correspondences(rng, pose, 8)
    got = epnp(corr, K)
    ang, dist = pose_gap(got, pose)
    assert ang < 1e-6
    assert dist < 1e-6


def test_epnp_insufficient_points():
    rng = np.random.default_rng(1)
    pose = random_pose(rng)
    corr = synthetic_correspondences(rng, pose, 3)
    with pytest.raises(InsufficientPoints):
        epnp(corr, K)


def test_epnp_collinear_degenerate():
    ts = np.linspace(0, 1, 8)
    pts = np.outer(ts, [1.0, 2.0, 0.5]) + [0.0, 0.0, 10.0]
    corr = [Correspondence(p, (400.0 + 10 * i, 150.0)) for i, p in enumerate(pts)]
    with pytest.raises(DegenerateConfiguration):
        epnp(corr, K)


def test_epnp_planar_case_exact():
    rng = np.random.default_rng(2)
    pose = random_pose(rng, rot=0.3, trans=1.0)
    # coplanar world points: z = linear function of x, y
    n = 20
    x = rng.uniform(-4, 4, n)
    y = rng.uniform(-3, 3, n)
    world = np.column_stack([x, y, 0.2 * x - 0.1 * y + 1.0])
    cam = pose.apply(world)
    keep = cam[:, 2] > 0.5
    cam = cam[keep]
    world = world[keep]
    # push the plane far enough in front of the camera
    world[:, 2] += 12.0
    cam = pose.apply(world)
    assert np.all(cam[:, 2] > 0.5)
    pix = np.column_stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx,
                           K.fy * cam[:, 1] / cam[:, 2] + K.cy])
    corr = [Correspondence(w, p) for w, p in zip(world, pix)]
    got = epnp(corr, K)
    ang, dist = pose_gap(got, pose)
    assert ang < 1e-6
    assert dist < 1e-6


def test_epnp_exact_over_random_sizes():
    rng = np.random.default_rng(3)
    for trial in range(100):
        pose = random_pose(rng)
        n = int(rng.integers(4, 201))
        corr = synthetic_correspondences(rng, pose, n)
        got = epnp(corr, K)
        ang, dist = pose_gap(got, pose)
        assert ang < 1e-6, (trial, n, ang)
        assert dist < 1e-6, (trial, n, dist)


def test_epnp_noise_degrades_gracefully():
    rng = np.random.default_rng(4)
    medians = []
    for noise in (0.1, 0.5, 1.0):
        errs = []
        for trial in range(20):
            pose = random_pose(np.random.default_rng(1000 + trial))
            corr = synthetic_correspondences(
                np.random.default_rng(2000 + trial), pose, 50, noise_px=noise)
            got = epnp(corr, K)
            ang, dist = pose_gap(got, pose)
            errs.append(ang + dist)
        medians.append(float(np.median(errs)))
    assert medians[0] <= medians[1] <= medians[2]


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def test_ransac_outlier_free():
    rng = np.random.default_rng(5)
    pose = random_pose(rng)
    corr = synthetic_correspondences(rng, pose, 100)
    got, mask = ransac_pnp(corr, K, RansacConfig(seed=1))
    assert mask.all()
    ang, dist = pose_gap(got, pose)
    assert ang < 1e-6
    assert dist < 1e-6


def test_ransac_rejects_injected_outliers():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        pose = random_pose(rng)
        corr = synthetic_correspondences(rng, pose, 100)
        out_idx = rng.choice(100, 30, replace=False)
        for i in out_idx:
            bad = Correspondence(corr[i].point3d,
                                 (rng.uniform(0, K.width - 1),
                                  rng.uniform(0, K.height - 1)),
                                 corr[i].weight)
            corr[i] = bad
        # guard the construction: injected pixels must truly be outliers
        errs = reprojection_errors(corr, K, pose)
        assert np.all(errs[out_idx] > 2.0)
        got, mask = ransac_pnp(corr, K, RansacConfig(seed=seed))
        assert not mask[out_idx].any()
        true_idx = np.setdiff1d(np.arange(100), out_idx)
        assert mask[true_idx].mean() >= 0.95
        ang, dist = pose_gap(got, pose)
        assert ang < 1e-4
        assert dist < 1e-4


def test_ransac_all_outliers_no_consensus():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-5, 5, (10, 3)) + [0, 0, 10]
    corr = [Correspondence(p, (rng.uniform(0, 959), rng.uniform(0, 319)))
            for p in pts]
    with pytest.raises(NoConsensus):
        ransac_pnp(corr, K, RansacConfig(seed=2, min_inliers=8))


def test_ransac_too_few_correspondences():
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    corr = synthetic_correspondences(rng, pose, 5)
    with pytest.raises(NoConsensus):
        ransac_pnp(corr, K, RansacConfig(min_inliers=12))


def test_ransac_order_invariant_for_fixed_seed():
    rng = np.random.default_rng(8)
    pose = random_pose(rng)
    corr = synthetic_correspondences(rng, pose, 60)
    for i in rng.choice(60, 15, replace=False):
        corr[i] = Correspondence(corr[i].point3d,
                                 (rng.uniform(0, 959), rng.uniform(0, 319)))
    got1, mask1 = ransac_pnp(corr, K, RansacConfig(seed=11))
    perm = rng.permutation(60)
    shuffled = [corr[i] for i in perm]
    got2, mask2 = ransac_pnp(shuffled, K, RansacConfig(seed=11))
    assert np.array_equal(got1.rotation, got2.rotation)
    assert np.array_equal(got1.translation, got2.translation)
    assert np.array_equal(mask1[perm], mask2)


def test_ransac_weighted_sampling_prefers_confident_points():
    # weights concentrate on the clean half; the pose must come out right
    rng = np.random.default_rng(9)
    pose = random_pose(rng)
    corr = synthetic_correspondences(rng, pose, 60)
    noisy = []
    for i, c in enumerate(corr):
        if i < 30:
            noisy.append(Correspondence(c.point3d, c.pixel2d, 1.0))
        else:
            noisy.append(Correspondence(
                c.point3d, (rng.uniform(0, 959), rng.uniform(0, 319)), 0.01))
    got, mask = ransac_pnp(noisy, K, RansacConfig(seed=3))
    ang, dist = pose_gap(got, pose)
    assert ang < 1e-4 and dist < 1e-4
    assert mask[:30].all()


# ---------------------------------------------------------------------------
# correspondences_from_flow
# ---------------------------------------------------------------------------

def _sparse_and_index(cloud, t):
    from depthcal.depthmaps import project_points
    return project_points(cloud, K, t)


def test_correspondences_zero_flow():
    rng = np.random.default_rng(10)
    pts = np.column_stack([rng.uniform(-4, 4, 200), rng.uniform(-1.2, 1.2, 200),
                           rng.uniform(5, 30, 200)])
    cloud = PointCloud(pts)
    sparse, index = _sparse_and_index(cloud, RigidTransform.identity())
    h, w = sparse.shape
    field = ProbabilisticFlowField(np.zeros((2, h, w)),
                                   np.full((h, w), 0.05),
                                   np.zeros((h, w)))
    corr = correspondences_from_flow(field, sparse, index, cloud)
    assert len(corr) == sparse.valid.sum()
    for c in corr:
        v, u = int(round(c.pixel2d[1])), int(round(c.pixel2d[0]))
        assert sparse.valid[v, u]
        assert c.pixel2d[0] == u and c.pixel2d[1] == v
        assert abs(c.weight - 1.0 / 1.05) < 1e-12


def test_correspondences_alpha_filter():
    rng = np.random.default_rng(11)
    pts = np.column_stack([rng.uniform(-4, 4, 50), rng.uniform(-1, 1, 50),
                           rng.uniform(5, 30, 50)])
    cloud = PointCloud(pts)
    sparse, index = _sparse_and_index(cloud, RigidTransform.identity())
    h, w = sparse.shape
    field = ProbabilisticFlowField(np.zeros((2, h, w)), np.ones((h, w)),
                                   np.ones((h, w)))
    assert correspondences_from_flow(field, sparse, index, cloud) == []


def test_oracle_flow_recovers_residual_transform():
    # inject exact ground-truth flow as mu; RANSAC must recover delta
    from depthcal.flow import ground_truth_flow
    rng = np.random.default_rng(12)
    pts = np.column_stack([rng.uniform(-8, 8, 4000), rng.uniform(-2, 3, 4000),
                           rng.uniform(4, 50, 4000)])
    cloud = PointCloud(pts)
    delta = RigidTransform(
        euler_to_rotation(EulerAngles(*np.radians([3.0, -2.0, 4.0]))),
        [0.12, -0.2, 0.08])
    ident = RigidTransform.identity()
    sparse, index = _sparse_and_index(cloud, ident)
    flow, mask = ground_truth_flow(cloud, K, ident, delta)
    h, w = sparse.shape
    mu = np.zeros((2, h, w))
    mu[0] = flow.du
    mu[1] = flow.dv
    alpha = np.where(mask.v, 0.0, 1.0)
    field = ProbabilisticFlowField(mu, np.full((h, w), 0.05), alpha)
    corr = correspondences_from_flow(field, sparse, index, cloud)
    assert len(corr) > 500
    got, _ = ransac_pnp(corr, K, RansacConfig(seed=4))
    err = pose_error(got, delta)
    assert err.rot_mean < 0.05
    assert err.trans_mean < 0.5


def test_frame_consistency_identity():
    rng = np.random.default_rng(13)
    t_init = random_pose(rng)
    result = random_pose(rng, rot=0.1, trans=0.3)
    delta = result  # by construction
    t_gt = compose(delta, t_init)
    a = pose_error(compose(result, t_init), t_gt)
    b = pose_error(result, delta)
    assert np.abs(a.trans_abs - b.trans_abs).max() < 1e-9
    assert np.abs(a.rot_abs - b.rot_abs).max() < 1e-9


def test_csv_export_round_trip_values():
    corr = [Correspondence((1.0, 2.0, 3.0), (400.5, 100.25), 0.75)]
    text = correspondences_to_csv(corr)
    lines = text.strip().split("\n")
    assert lines[0] == "x,y,z,u,v,weight"
    vals = [float(x) for x in lines[1].split(",")]
    assert vals == [1.0, 2.0, 3.0, 400.5, 100.25, 0.75]


def test_correspondence_weight_validated():
    with pytest.raises(ValueError):
        Correspondence((0, 0, 5), (10, 10), 1.5)
