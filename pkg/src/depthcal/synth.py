"""Deterministic ray-cast scenes for desk-scale calibration benchmarks.

World frame = LiDAR frame (x forward, y left, z up, sensor at the origin).
The camera looks roughly along +x through a KITTI-like axis permutation.
Scenes are corrugated rectangles (ground, walls, a far backdrop so every
camera pixel hits something) plus axis-aligned boxes. Both sensors ray-cast
the same analytic geometry; the corrugation perturbs the hit distance along
each ray (range texture), so the two sensors disagree by at most twice the
texture amplitude anywhere, while the depth maps still carry matchable
structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .depthmaps import DENSE, CameraIntrinsics, DepthMap, PointCloud
from .errors import EmptyScene
from .geometry import RigidTransform, compose, euler_to_rotation, \
    EulerAngles, invert, make_initial, sample_perturbation

# camera axes in the LiDAR frame: x_cam = -y, y_cam = -z, z_cam = +x
CAM_BASE_ROTATION = np.array([[0.0, -1.0, 0.0],
                              [0.0, 0.0, -1.0],
                              [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    num_planes: int = 6
    num_boxes: int = 8
    depth_range: tuple = (4.0, 60.0)
    lidar_rings: int = 64
    lidar_azimuth_steps: int = 1024
    lidar_elevation_deg: tuple = (-15.0, 3.0)
    width: int = 960
    height: int = 320
    fx: float = 718.0
    fy: float = 718.0
    cx: float = 480.0
    cy: float = 160.0
    texture_amplitude: float = 0.05
    outlier_patch_fraction: float = 0.0

    def __post_init__(self):
        if self.num_planes < 1 or self.num_boxes < 0:
            raise ValueError("need at least one plane")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise ValueError("depth_range must be positive and ordered")
        if self.lidar_rings < 1 or self.lidar_azimuth_steps < 1:
            raise ValueError("lidar pattern counts must be >= 1")
        if not (0.0 <= self.outlier_patch_fraction < 1.0):
            raise ValueError("outlier_patch_fraction must be in [0, 1)")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy,
                                self.width, self.height)


@dataclass(frozen=True)
class Rect:
    """Finite rectangle: center, two orthonormal in-plane axes with half
    extents, range-texture parameters."""

    center: np.ndarray
    axis1: np.ndarray
    axis2: np.ndarray
    half1: float
    half2: float
    amplitude: float = 0.0
    wavevector: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase: float = 0.0

    def __post_init__(self):
        for name in ("center", "axis1", "axis2", "wavevector"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))

    @property
    def normal(self):
        return np.cross(self.axis1, self.axis2)

    def intersect(self, origin, dirs, t_min):
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origin) @ n) / denom
        q = origin + t[:, None] * dirs - self.center
        ok = (np.abs(denom) > 1e-12) & (t > t_min) \
            & (np.abs(q @ self.axis1) <= self.half1) \
            & (np.abs(q @ self.axis2) <= self.half2)
        return np.where(ok, t, np.inf)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with range texture on its surface."""

    lo: np.ndarray
    hi: np.ndarray
    amplitude: float = 0.0
    wavevector: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "wavevector",
                           np.asarray(self.wavevector, dtype=float))

    def intersect(self, origin, dirs, t_min):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t1 = (self.lo - origin) * inv
        t2 = (self.hi - origin) * inv
        tnear = np.nanmax(np.minimum(t1, t2), axis=1)
        tfar = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tnear <= tfar) & (tnear > t_min)
        return np.where(ok, tnear, np.inf)


@dataclass(frozen=True)
class Scene:
    primitives: tuple

    def cast(self, origin, dirs, t_min=0.1, t_max=np.inf):
        """Nearest-hit ray cast with range texture applied to the winner.

        Returns (points (N, 3) with NaN rows for misses, hit mask (N,)).
        The z-buffer runs on the untextured geometry; the winning hit is then
        pushed along its ray by amplitude * sin(wavevector . base + phase).
        """
        origin = np.asarray(origin, dtype=float)
        dirs = np.asarray(dirs, dtype=float)
        all_t = np.stack([p.intersect(origin, dirs, t_min)
                          for p in self.primitives])
        winner = np.argmin(all_t, axis=0)
        t = all_t[winner, np.arange(dirs.shape[0])]
        hit = np.isfinite(t) & (t <= t_max)
        points = np.full(dirs.shape, np.nan)
        for pi, prim in enumerate(self.primitives):
            sel = hit & (winner == pi)
            if not sel.any():
                continue
            base = origin + t[sel, None] * dirs[sel]
            bump = prim.amplitude * np.sin(base @ prim.wavevector + prim.phase)
            points[sel] = origin + (t[sel] + bump)[:, None] * dirs[sel]
        return points, hit


@dataclass(frozen=True)
class SyntheticScene:
    """One rendered scene: LiDAR cloud, dense camera depth, calibration."""

    cloud: PointCloud
    camera_depth: DepthMap
    intrinsics: CameraIntrinsics
    t_gt: RigidTransform
    geometry: Scene
    patch_region: tuple | None = None   # (v0, v1, u0, u1), half-open


@dataclass(frozen=True)
class CalibrationCase:
    """A scene plus a perturbed starting pose; the answer key is delta.

    perturbation_seed reproduces delta via sample_perturbation and is what
    manifests store on export.
    """

    scene: SyntheticScene
    t_init: RigidTransform
    delta: RigidTransform
    perturbation_seed: int = 0


def _unit(v):
    return v / np.linalg.norm(v)


def _random_wavevector(rng, amplitude):
    if amplitude <= 0:
        return np.zeros(3), 0.0
    wavelength = rng.uniform(1.5, 5.0)
    direction = _unit(rng.normal(size=3))
    return direction * (2.0 * math.pi / wavelength), rng.uniform(0, 2 * math.pi)


def _build_geometry(cfg: SceneConfig, rng) -> Scene:
    lo, hi = cfg.depth_range
    amp = cfg.texture_amplitude
    prims = []

    # ground plane under the sensors
    k, ph = _random_wavevector(rng, amp)
    prims.append(Rect(center=(hi, 0.0, -1.7), axis1=(1, 0, 0), axis2=(0, 1, 0),
                      half1=1.5 * hi, half2=1.5 * hi,
                      amplitude=amp, wavevector=k, phase=ph))
    # far backdrop sized to cover the camera frustum with margin
    k, ph = _random_wavevector(rng, amp)
    prims.append(Rect(center=(hi, 0.0, 0.0), axis1=(0, 1, 0), axis2=(0, 0, 1),
                      half1=1.2 * hi, half2=0.6 * hi,
                      amplitude=amp, wavevector=k, phase=ph))

    half_az = math.atan(cfg.cx / cfg.fx) * 0.9
    for _ in range(cfg.num_planes - 1 if cfg.num_planes > 1 else 0):
        az = rng.uniform(-half_az, half_az)
        dist = rng.uniform(lo, 0.95 * hi)
        center = np.array([dist * math.cos(az), dist * math.sin(az),
                           rng.uniform(-1.0, 3.0)])
        normal = _unit(-center + rng.normal(0, 0.25 * dist, 3) * 0.3)
        seed_axis = np.array([0.0, 0.0, 1.0])
        if abs(normal @ seed_axis) > 0.9:
            seed_axis = np.array([0.0, 1.0, 0.0])
        a1 = _unit(np.cross(normal, seed_axis))
        a2 = np.cross(normal, a1)
        k, ph = _random_wavevector(rng, amp)
        prims.append(Rect(center=center, axis1=a1, axis2=a2,
                          half1=rng.uniform(3.0, 12.0),
                          half2=rng.uniform(2.0, 6.0),
                          amplitude=amp, wavevector=k, phase=ph))

    for _ in range(cfg.num_boxes):
        az = rng.uniform(-half_az, half_az)
        dist = rng.uniform(lo, 0.7 * hi)
        center = np.array([dist * math.cos(az), dist * math.sin(az),
                           rng.uniform(-1.2, 1.5)])
        size = rng.uniform(0.5, 4.0, 3)
        k, ph = _random_wavevector(rng, amp)
        prims.append(Box(lo=center - size / 2, hi=center + size / 2,
                         amplitude=amp, wavevector=k, phase=ph))
    return Scene(tuple(prims))


def _sample_camera_pose(rng) -> RigidTransform:
    jitter = euler_to_rotation(EulerAngles(*rng.uniform(-0.03, 0.03, 3)))
    rotation = jitter @ CAM_BASE_ROTATION
    center = np.array([0.2, 0.0, -0.08]) + rng.uniform(-0.1, 0.1, 3)
    return RigidTransform(rotation, -(rotation @ center))


def _lidar_directions(cfg: SceneConfig):
    elo, ehi = np.radians(cfg.lidar_elevation_deg)
    elev = np.linspace(elo, ehi, cfg.lidar_rings)
    azim = np.linspace(-math.pi, math.pi, cfg.lidar_azimuth_steps,
                       endpoint=False)
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    return np.column_stack([(np.cos(ee) * np.cos(aa)).ravel(),
                            (np.cos(ee) * np.sin(aa)).ravel(),
                            np.sin(ee).ravel()])


def render_camera_depth(scene: Scene, k: CameraIntrinsics,
                        t_gt: RigidTransform) -> DepthMap:
    """Per-pixel ray cast through the camera; depths are camera-frame z of
    the textured hits. Raises EmptyScene when any pixel misses everything."""
    uu, vv = np.meshgrid(np.arange(k.width), np.arange(k.height))
    dirs_cam = np.column_stack([
        (uu.ravel() - k.cx) / k.fx,
        (vv.ravel() - k.cy) / k.fy,
        np.ones(k.width * k.height)])
    t_inv = invert(t_gt)
    origin = t_inv.translation
    dirs = dirs_cam @ t_inv.rotation.T
    points, hit = scene.cast(origin, dirs)
    if not hit.all():
        raise EmptyScene(f"{(~hit).sum()} camera pixels hit no surface")
    depth = (points @ t_gt.rotation[2] + t_gt.translation[2])
    return DepthMap(depth.reshape(k.height, k.width),
                    np.ones((k.height, k.width), bool), DENSE)


def scan_lidar(scene: Scene, cfg: SceneConfig,
               max_range: float = 120.0) -> PointCloud:
    dirs = _lidar_directions(cfg)
    points, hit = scene.cast(np.zeros(3), dirs, t_max=max_range)
    if not hit.any():
        raise EmptyScene("no LiDAR ray hit a surface")
    return PointCloud(points[hit])


def _apply_outlier_patch(depth: DepthMap, cfg: SceneConfig, rng):
    frac = cfg.outlier_patch_fraction
    h, w = depth.shape
    ph = max(1, int(round(h * math.sqrt(frac))))
    pw = max(1, int(round(w * math.sqrt(frac))))
    v0 = int(rng.integers(0, h - ph + 1))
    u0 = int(rng.integers(0, w - pw + 1))
    lo, hi = cfg.depth_range
    base = rng.uniform(lo, hi)
    slope = rng.uniform(-0.02, 0.02, 2)
    vv, uu = np.meshgrid(np.arange(ph), np.arange(pw), indexing="ij")
    wobble = rng.uniform(0.05, 0.3)
    patch = base + slope[0] * vv + slope[1] * uu \
        + wobble * np.sin(vv * rng.uniform(0.1, 0.5)) \
        + wobble * np.sin(uu * rng.uniform(0.1, 0.5))
    values = depth.values.copy()
    values[v0:v0 + ph, u0:u0 + pw] = np.clip(patch, 0.5, 3.0 * hi)
    return DepthMap(values, depth.valid.copy(), DENSE), (v0, v0 + ph, u0, u0 + pw)


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    """Build the random arrangement and ray-cast both sensors against it.

    Deterministic per config seed: geometry, camera pose and the optional
    outlier patch each draw from their own derived substream.
    """
    geom = _build_geometry(cfg, np.random.default_rng([cfg.seed, 1]))
    t_gt = _sample_camera_pose(np.random.default_rng([cfg.seed, 0]))
    k = cfg.intrinsics()
    camera_depth = render_camera_depth(geom, k, t_gt)
    cloud = scan_lidar(geom, cfg)
    patch = None
    if cfg.outlier_patch_fraction > 0:
        camera_depth, patch = _apply_outlier_patch(
            camera_depth, cfg, np.random.default_rng([cfg.seed, 7]))
    return SyntheticScene(cloud, camera_depth, k, t_gt, geom, patch)


def make_case(cfg: SceneConfig, rot_range_deg: float, trans_range_m: float,
              seed: int) -> CalibrationCase:
    """Scene plus perturbed initial pose; the estimator must recover delta.

    The perturbation draws from ``seed`` (independent of the scene seed), so
    one scene can be reused under many perturbations and vice versa.
    """
    scene = generate_scene(cfg)
    delta = sample_perturbation(rot_range_deg, trans_range_m, seed)
    t_init, answer = make_initial(scene.t_gt, delta)
    return CalibrationCase(scene, t_init, answer, perturbation_seed=seed)
