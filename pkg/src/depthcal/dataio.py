"""On-disk formats: KITTI-style frames plus the toolkit's own binary fields.

Directory layout consumed and produced here:

    <root>/manifest.json
    <root>/calib.txt                      (optional shared calibration)
    <root>/frames/<id>/cloud.bin          (KITTI velodyne records)
    <root>/frames/<id>/depth_cam.png      (16-bit PNG, meters = value / 256)
    <root>/frames/<id>/calib.txt          (per-frame override, synthetic data)

Calibration text files hold "KEY: v1 ... v12" lines; P2 is the 3x4 projection
(fx, fy, cx, cy are read from it) and Tr the 3x4 LiDAR-to-camera transform,
both row-major. The manifest lists frames, their paths and per-frame
perturbation seeds so an experiment is fully reproducible from disk.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .depthmaps import CameraIntrinsics, DepthMap, PointCloud, DENSE, SPARSE
from .errors import (
    DecodeError,
    EmptyFile,
    MalformedLine,
    MissingKey,
    TruncatedFile,
    UnsupportedBitDepth,
)
from .flow import FlowField
from .geometry import RigidTransform
from .matching import ProbabilisticFlowField

DEPTH_SCALE = 256.0
_VELO_RECORD = 16  # four little-endian float32 per point


# ---------------------------------------------------------------------------
# velodyne binary clouds
# ---------------------------------------------------------------------------

def parse_velodyne_bin(data: bytes) -> PointCloud:
    if len(data) == 0:
        raise EmptyFile("velodyne file holds no records")
    if len(data) % _VELO_RECORD:
        raise TruncatedFile(
            f"length {len(data)} is not a multiple of {_VELO_RECORD}")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(float), rec[:, 3].astype(float))


def write_velodyne_bin(cloud: PointCloud) -> bytes:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    return rec.tobytes()


# ---------------------------------------------------------------------------
# calibration text
# ---------------------------------------------------------------------------

def _parse_12(line_value: str, key: str) -> np.ndarray:
    parts = line_value.split()
    if len(parts) != 12:
        raise MalformedLine(f"{key}: expected 12 values, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as e:
        raise MalformedLine(f"{key}: non-numeric value ({e})") from e
    return vals.reshape(3, 4)


def parse_kitti_calib(text: str, width: int = 1242, height: int = 375):
    """Extract intrinsics from P2 and the LiDAR-to-camera transform from Tr.

    The image size is not stored in KITTI calib files, so it is supplied by
    the caller (the manifest carries it for toolkit data).
    """
    entries = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, value = line.split(":", 1)
        entries[key.strip()] = value.strip()
    if "P2" not in entries:
        raise MissingKey("calibration file lacks a P2 line")
    if "Tr" not in entries:
        raise MissingKey("calibration file lacks a Tr line")
    p2 = _parse_12(entries["P2"], "P2")
    tr = _parse_12(entries["Tr"], "Tr")
    k = CameraIntrinsics(fx=p2[0, 0], fy=p2[1, 1], cx=p2[0, 2], cy=p2[1, 2],
                         width=width, height=height)
    # files store rotations at limited precision; snap to the nearest
    # rotation but reject matrices that are not close to one
    r = tr[:, :3]
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > 1e-3 or np.linalg.det(r) < 0:
        raise MalformedLine(f"Tr rotation block is not a rotation (err {err:.2e})")
    from .geometry import orthonormalize
    return k, RigidTransform(orthonormalize(r), tr[:, 3])


def format_kitti_calib(k: CameraIntrinsics, t: RigidTransform) -> str:
    p2 = np.zeros((3, 4))
    p2[0, 0], p2[1, 1] = k.fx, k.fy
    p2[0, 2], p2[1, 2] = k.cx, k.cy
    p2[2, 2] = 1.0
    tr = np.hstack([t.rotation, t.translation[:, None]])
    fmt = lambda m: " ".join(repr(float(v)) for v in m.reshape(-1))
    return f"P2: {fmt(p2)}\nTr: {fmt(tr)}\n"


# ---------------------------------------------------------------------------
# 16-bit depth PNG
# ---------------------------------------------------------------------------

def write_depth_png(depth: DepthMap, path):
    """value = round(256 * meters), clamped to the representable range;
    invalid pixels store 0."""
    stored = np.zeros(depth.shape, dtype=np.uint16)
    quant = np.rint(depth.values[depth.valid] * DEPTH_SCALE)
    stored[depth.valid] = np.clip(quant, 1, 65535).astype(np.uint16)
    Image.fromarray(stored).save(path, format="PNG")


def read_depth_png(path, kind: str | None = None) -> DepthMap:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise DecodeError(f"cannot decode PNG: {e}") from e
    if img.mode not in ("I;16", "I;16B", "I"):
        raise UnsupportedBitDepth(f"expected 16-bit grayscale, got {img.mode}")
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.min() < 0 or arr.max() > 65535:
        raise UnsupportedBitDepth("stored values exceed 16-bit range")
    valid = arr > 0
    values = np.where(valid, arr / DEPTH_SCALE, 0.0)
    if kind is None:
        kind = DENSE if valid.all() else SPARSE
    return DepthMap(values, valid, kind)


# ---------------------------------------------------------------------------
# flow binaries
# ---------------------------------------------------------------------------

_DFL_DTYPE = np.dtype([("du", "<f4"), ("dv", "<f4"), ("defined", "u1")])
_PFL_DTYPE = np.dtype([("mu_u", "<f4"), ("mu_v", "<f4"),
                       ("sigma2", "<f4"), ("alpha", "<f4")])


def write_flow(flow: FlowField) -> bytes:
    h, w = flow.shape
    head = b"DFL1" + np.array([w, h], dtype="<u4").tobytes()
    rec = np.zeros(h * w, dtype=_DFL_DTYPE)
    rec["du"] = flow.du.reshape(-1)
    rec["dv"] = flow.dv.reshape(-1)
    rec["defined"] = flow.defined.reshape(-1)
    return head + rec.tobytes()


def read_flow(data: bytes) -> FlowField:
    if len(data) < 12 or data[:4] != b"DFL1":
        raise DecodeError("not a DFL1 flow blob")
    w, h = np.frombuffer(data[4:12], dtype="<u4")
    expect = 12 + int(w) * int(h) * _DFL_DTYPE.itemsize
    if len(data) != expect:
        raise TruncatedFile(f"expected {expect} bytes, got {len(data)}")
    rec = np.frombuffer(data[12:], dtype=_DFL_DTYPE)
    return FlowField(rec["du"].reshape(h, w).astype(float),
                     rec["dv"].reshape(h, w).astype(float),
                     rec["defined"].reshape(h, w) != 0)


def write_prob_flow(field: ProbabilisticFlowField) -> bytes:
    h, w = field.shape
    head = b"PFL1" + np.array([w, h], dtype="<u4").tobytes()
    rec = np.zeros(h * w, dtype=_PFL_DTYPE)
    rec["mu_u"] = field.mu[0].reshape(-1)
    rec["mu_v"] = field.mu[1].reshape(-1)
    rec["sigma2"] = field.sigma2.reshape(-1)
    rec["alpha"] = field.alpha.reshape(-1)
    return head + rec.tobytes()


def read_prob_flow(data: bytes) -> ProbabilisticFlowField:
    if len(data) < 12 or data[:4] != b"PFL1":
        raise DecodeError("not a PFL1 blob")
    w, h = np.frombuffer(data[4:12], dtype="<u4")
    expect = 12 + int(w) * int(h) * _PFL_DTYPE.itemsize
    if len(data) != expect:
        raise TruncatedFile(f"expected {expect} bytes, got {len(data)}")
    rec = np.frombuffer(data[12:], dtype=_PFL_DTYPE)
    mu = np.stack([rec["mu_u"].reshape(h, w), rec["mu_v"].reshape(h, w)])
    return ProbabilisticFlowField(mu.astype(float),
                                  rec["sigma2"].reshape(h, w).astype(float),
                                  rec["alpha"].reshape(h, w).astype(float))


# ---------------------------------------------------------------------------
# frames and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameBundle:
    """Paths plus calibration for one frame; t_gt is None for field data
    without an answer key."""

    frame_id: str
    cloud_path: str
    depth_path: str
    intrinsics: CameraIntrinsics
    t_gt: RigidTransform | None = None
    seed: int | None = None


@dataclass(frozen=True)
class Manifest:
    root: str
    frames: tuple
    width: int
    height: int
    rot_range_deg: float
    trans_range_m: float


def load_manifest(path) -> Manifest:
    """Read manifest.json (path to it or to its directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        doc = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    width, height = int(doc["width"]), int(doc["height"])
    pert = doc.get("perturbation", {})
    shared_calib = doc.get("calib")
    frames = []
    for fr in doc["frames"]:
        calib_rel = fr.get("calib", shared_calib)
        if calib_rel is None:
            raise MissingKey(f"frame {fr['id']}: no calibration available")
        calib_path = os.path.join(root, calib_rel)
        with open(calib_path) as fh:
            k, t_gt = parse_kitti_calib(fh.read(), width, height)
        cloud_path = os.path.join(root, fr["cloud"])
        depth_path = os.path.join(root, fr["depth_cam"])
        for p in (cloud_path, depth_path):
            if not os.path.exists(p):
                raise FileNotFoundError(p)
        frames.append(FrameBundle(str(fr["id"]), cloud_path, depth_path, k,
                                  t_gt, fr.get("seed")))
    return Manifest(root, tuple(frames), width, height,
                    float(pert.get("rot_deg", 0.0)),
                    float(pert.get("trans_m", 0.0)))


def load_frame(bundle: FrameBundle):
    """Materialize a frame: (cloud, dense camera depth)."""
    with open(bundle.cloud_path, "rb") as fh:
        cloud = parse_velodyne_bin(fh.read())
    depth = read_depth_png(bundle.depth_path)
    return cloud, depth


def export_cases(cases, out_dir, rot_range_deg: float,
                 trans_range_m: float) -> str:
    """Write CalibrationCases in the on-disk layout; returns manifest path.

    Each synthetic frame gets its own calib.txt because every scene carries
    its own ground-truth extrinsics.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    width = height = None
    for i, case in enumerate(cases):
        scene = case.scene
        frame_id = f"{i:06d}"
        fdir = os.path.join(out_dir, "frames", frame_id)
        os.makedirs(fdir, exist_ok=True)
        with open(os.path.join(fdir, "cloud.bin"), "wb") as fh:
            fh.write(write_velodyne_bin(scene.cloud))
        write_depth_png(scene.camera_depth, os.path.join(fdir, "depth_cam.png"))
        with open(os.path.join(fdir, "calib.txt"), "w") as fh:
            fh.write(format_kitti_calib(scene.intrinsics, scene.t_gt))
        entries.append({
            "id": frame_id,
            "cloud": f"frames/{frame_id}/cloud.bin",
            "depth_cam": f"frames/{frame_id}/depth_cam.png",
            "calib": f"frames/{frame_id}/calib.txt",
            "seed": int(case.perturbation_seed),
        })
        width, height = scene.intrinsics.width, scene.intrinsics.height
    doc = {
        "width": width,
        "height": height,
        "perturbation": {"rot_deg": rot_range_deg, "trans_m": trans_range_m},
        "frames": entries,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path
