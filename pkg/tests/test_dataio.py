import numpy as np
import pytest

from depthcal.dataio import (
    FrameBundle,
    export_cases,
    format_kitti_calib,
    load_frame,
    load_manifest,
    parse_kitti_calib,
    parse_velodyne_bin,
    read_depth_png,
    read_flow,
    read_prob_flow,
    write_depth_png,
    write_flow,
    write_prob_flow,
    write_velodyne_bin,
)
from depthcal.depthmaps import DENSE, DepthMap, PointCloud, SPARSE
from depthcal.errors import (
    DecodeError,
    EmptyFile,
    MalformedLine,
    MissingKey,
    TruncatedFile,
    UnsupportedBitDepth,
)
from depthcal.flow import FlowField
from depthcal.matching import ProbabilisticFlowField

# hand-checked values from the KITTI odometry calibration convention
KITTI_FIXTURE = """\
P0: 718.856 0.0 607.1928 0.0 0.0 718.856 185.2157 0.0 0.0 0.0 1.0 0.0
P2: 718.856 0.0 607.1928 45.38225 0.0 718.856 185.2157 -0.1130887 0.0 0.0 1.0 0.003779761
Tr: 0.000427680238558 -0.999967248494602 -0.008084491683471 -0.011984599277133 -0.007210626507497 0.008081198471645 -0.999941316450383 -0.054039847297480 0.999966882316909 0.000485948581039 -0.007206933692422 -0.292196864868591
"""


# ---------------------------------------------------------------------------
# velodyne
# ---------------------------------------------------------------------------

def test_velodyne_single_record():
    data = np.array([1.0, 2.0, 3.0, 0.5], dtype="<f4").tobytes()
    cloud = parse_velodyne_bin(data)
    assert np.allclose(cloud.points, [[1.0, 2.0, 3.0]])
    assert np.allclose(cloud.intensity, [0.5])


def test_velodyne_truncated():
    data = np.zeros(4, dtype="<f4").tobytes() + b"x"
    with pytest.raises(TruncatedFile):
        parse_velodyne_bin(data)


def test_velodyne_empty():
    with pytest.raises(EmptyFile):
        parse_velodyne_bin(b"")


def test_velodyne_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-80, 80, (10_000, 3)).astype(np.float32).astype(float)
    intens = rng.uniform(0, 1, 10_000).astype(np.float32).astype(float)
    cloud = PointCloud(pts, intens)
    back = parse_velodyne_bin(write_velodyne_bin(cloud))
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.intensity, cloud.intensity)


# ---------------------------------------------------------------------------
# calib text
# ---------------------------------------------------------------------------

def test_calib_fixture_values():
    k, tr = parse_kitti_calib(KITTI_FIXTURE)
    assert k.fx == pytest.approx(718.856)
    assert k.cx == pytest.approx(607.1928)
    assert k.fy == pytest.approx(718.856)
    assert k.cy == pytest.approx(185.2157)
    assert tr.translation[2] == pytest.approx(-0.292196864868591)


def test_calib_identity_tr():
    text = ("P2: 100 0 50 0 0 100 40 0 0 0 1 0\n"
            "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    _, tr = parse_kitti_calib(text)
    assert np.allclose(tr.rotation, np.eye(3))
    assert np.allclose(tr.translation, 0.0)


def test_calib_missing_key():
    with pytest.raises(MissingKey):
        parse_kitti_calib("P2: 100 0 50 0 0 100 40 0 0 0 1 0\n")
    with pytest.raises(MissingKey):
        parse_kitti_calib("Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n")


def test_calib_malformed():
    with pytest.raises(MalformedLine):
        parse_kitti_calib("P2: 1 2 3\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(MalformedLine):
        parse_kitti_calib("P2: a 0 50 0 0 100 40 0 0 0 1 0\n"
                          "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n")


def test_calib_format_round_trip():
    from depthcal.geometry import EulerAngles, euler_to_rotation
    from depthcal.depthmaps import CameraIntrinsics
    k = CameraIntrinsics(718.856, 718.856, 607.1928, 185.2157, 1242, 375)
    t = type(
        "X", (), {})  # placeholder to avoid confusion; use real transform
    from depthcal.geometry import RigidTransform
    t = RigidTransform(euler_to_rotation(EulerAngles(0.01, -0.02, 0.3)),
                       [0.1, -0.05, -0.29])
    k2, t2 = parse_kitti_calib(format_kitti_calib(k, t),
                               width=1242, height=375)
    assert k2.fx == k.fx and k2.cx == k.cx
    assert np.abs(t2.rotation - t.rotation).max() < 1e-9
    assert np.abs(t2.translation - t.translation).max() < 1e-9


# ---------------------------------------------------------------------------
# depth png
# ---------------------------------------------------------------------------

def test_depth_png_conventions(tmp_path):
    values = np.zeros((4, 6))
    valid = np.zeros((4, 6), bool)
    values[1, 2], valid[1, 2] = 1.0, True       # stores 256
    values[2, 3], valid[2, 3] = 300.0, True     # clamps to 65535
    p = tmp_path / "d.png"
    write_depth_png(DepthMap(values, valid, SPARSE), p)
    from PIL import Image
    stored = np.asarray(Image.open(p))
    assert stored[1, 2] == 256
    assert stored[2, 3] == 65535
    assert stored[0, 0] == 0
    back = read_depth_png(p)
    assert back.values[1, 2] == 1.0
    assert not back.valid[0, 0]


def test_depth_png_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(1)
    values = rng.uniform(0.1, 100.0, (32, 48))
    dense = DepthMap(values, np.ones((32, 48), bool), DENSE)
    p = tmp_path / "q.png"
    write_depth_png(dense, p)
    back = read_depth_png(p)
    assert back.valid.all()
    assert np.abs(back.values - values).max() <= 1.0 / 512.0 + 1e-12


def test_depth_png_rejects_8bit(tmp_path):
    from PIL import Image
    p = tmp_path / "bad.png"
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(p)
    with pytest.raises(UnsupportedBitDepth):
        read_depth_png(p)


def test_depth_png_rejects_garbage(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"this is not a png")
    with pytest.raises(DecodeError):
        read_depth_png(p)


# ---------------------------------------------------------------------------
# flow binaries
# ---------------------------------------------------------------------------

def test_flow_binary_round_trip():
    rng = np.random.default_rng(2)
    du = rng.normal(0, 3, (10, 14)).astype(np.float32).astype(float)
    dv = rng.normal(0, 3, (10, 14)).astype(np.float32).astype(float)
    defined = rng.random((10, 14)) < 0.6
    flow = FlowField(du, dv, defined)
    blob = write_flow(flow)
    assert blob[:4] == b"DFL1"
    assert len(blob) == 12 + 10 * 14 * 9
    back = read_flow(blob)
    assert np.array_equal(back.du, flow.du)
    assert np.array_equal(back.dv, flow.dv)
    assert np.array_equal(back.defined, flow.defined)


def test_prob_flow_binary_round_trip():
    rng = np.random.default_rng(3)
    mu = rng.normal(0, 5, (2, 6, 9)).astype(np.float32).astype(float)
    s2 = rng.uniform(0.05, 90, (6, 9)).astype(np.float32).astype(float)
    a = rng.uniform(0, 1, (6, 9)).astype(np.float32).astype(float)
    field = ProbabilisticFlowField(mu, s2, a)
    blob = write_prob_flow(field)
    assert blob[:4] == b"PFL1"
    assert len(blob) == 12 + 6 * 9 * 16
    back = read_prob_flow(blob)
    assert np.array_equal(back.mu, field.mu)
    assert np.array_equal(back.sigma2, field.sigma2)
    assert np.array_equal(back.alpha, field.alpha)


def test_flow_binary_rejects_corruption():
    flow = FlowField.zero((4, 4))
    blob = write_flow(flow)
    with pytest.raises(DecodeError):
        read_flow(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedFile):
        read_flow(blob[:-3])


# ---------------------------------------------------------------------------
# manifest + export
# ---------------------------------------------------------------------------

def test_export_and_reload_cases(tmp_path):
    from depthcal.synth import SceneConfig, make_case
    cfg = SceneConfig(seed=9, num_planes=3, num_boxes=3, width=160, height=64,
                      fx=120.0, fy=120.0, cx=80.0, cy=32.0,
                      lidar_rings=24, lidar_azimuth_steps=256)
    cases = [make_case(SceneConfig(**{**cfg.__dict__, "seed": 9 + i}),
                       10.0, 0.25, seed=100 + i) for i in range(2)]
    manifest_path = export_cases(cases, tmp_path / "data", 10.0, 0.25)
    man = load_manifest(manifest_path)
    assert len(man.frames) == 2
    assert man.width == 160 and man.height == 64
    assert man.rot_range_deg == 10.0
    for case, bundle in zip(cases, man.frames):
        assert bundle.seed == case.perturbation_seed
        cloud, depth = load_frame(bundle)
        # cloud round-trips through float32
        assert np.abs(cloud.points - case.scene.cloud.points).max() < 1e-4
        assert np.abs(depth.values - case.scene.camera_depth.values).max() \
            <= 1.0 / 512.0 + 1e-12
        assert np.abs(bundle.t_gt.rotation - case.scene.t_gt.rotation).max() \
            < 1e-12
        assert bundle.intrinsics.fx == case.scene.intrinsics.fx


def test_manifest_missing_file(tmp_path):
    (tmp_path / "manifest.json").write_text(
        '{"width": 8, "height": 8, "frames": '
        '[{"id": "0", "cloud": "nope.bin", "depth_cam": "nope.png", '
        '"calib": "c.txt"}]}')
    (tmp_path / "c.txt").write_text(
        "P2: 100 0 4 0 0 100 4 0 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)
