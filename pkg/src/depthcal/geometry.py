"""Rigid SE(3) transforms, Euler conversions, perturbation sampling and pose errors.

Euler convention used everywhere in this package: intrinsic rotations applied
roll (about X) then pitch (about new Y) then yaw (about new Z), i.e.
``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``. All reported rotation metrics use this
single convention.

Pose errors are computed on the relative transform ``gt^-1 * est``, which makes
them invariant to a common left-composition of both poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


def _as_rotation(m) -> np.ndarray:
    r = np.asarray(m, dtype=float)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > _ORTHO_TOL:
        raise ValueError(f"rotation not orthonormal (max entry error {err:.3e})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > _ORTHO_TOL:
        raise ValueError(f"rotation determinant {det} != 1")
    return r


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: maps a point p to rotation @ p + translation.

    rotation is a 3x3 orthonormal matrix (det +1), translation a 3-vector in
    meters. Instances are immutable; the arrays are write-protected copies.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_rotation(self.rotation).copy()
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_close(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= tol
                and np.abs(self.translation - other.translation).max() <= tol)


@dataclass(frozen=True)
class EulerAngles:
    """roll/pitch/yaw in radians, each in (-pi, pi].

    gimbal_locked marks the degenerate |pitch| = pi/2 extraction where the
    yaw = 0 canonical solution was chosen.
    """

    roll: float
    pitch: float
    yaw: float
    gimbal_locked: bool = field(default=False, compare=False)

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])


def euler_to_rotation(angles: EulerAngles) -> np.ndarray:
    """Rotation matrix for intrinsic X-Y-Z angles (see module docstring)."""
    cr, sr = math.cos(angles.roll), math.sin(angles.roll)
    cp, sp = math.cos(angles.pitch), math.sin(angles.pitch)
    cy, sy = math.cos(angles.yaw), math.sin(angles.yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rx @ ry @ rz


def rotation_to_euler(m) -> EulerAngles:
    """Inverse of euler_to_rotation.

    Near gimbal lock (|m[0,2]| > 1 - 1e-9) the yaw = 0 solution is returned
    with gimbal_locked set.
    """
    return _euler_from_matrix(_as_rotation(m))


def _euler_from_matrix(r: np.ndarray) -> EulerAngles:
    s = r[0, 2]
    if abs(s) > 1.0 - 1e-9:
        # R = Rx(roll) @ Ry(+-pi/2) @ Rz(yaw): only roll -+ yaw is determined.
        pitch = math.copysign(math.pi / 2.0, s)
        if s > 0:
            roll = math.atan2(r[1, 0], r[1, 1])
        else:
            roll = math.atan2(-r[1, 0], r[1, 1])
        return EulerAngles(roll, pitch, 0.0, gimbal_locked=True)
    pitch = math.asin(min(1.0, max(-1.0, s)))
    roll = math.atan2(-r[1, 2], r[2, 2])
    yaw = math.atan2(-r[0, 1], r[0, 0])
    return EulerAngles(roll, pitch, yaw)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def sample_perturbation(rot_range_deg: float, trans_range_m: float,
                        seed: int) -> RigidTransform:
    """Random transform with Euler angles uniform in +-rot_range_deg and
    translation components uniform in +-trans_range_m. Deterministic per seed.

    Draw order is fixed: roll, pitch, yaw, then tx, ty, tz.
    """
    if rot_range_deg < 0 or trans_range_m < 0:
        raise ValueError("perturbation ranges must be >= 0")
    rng = np.random.default_rng(seed)
    limit = math.radians(rot_range_deg)
    roll, pitch, yaw = rng.uniform(-limit, limit, size=3)
    trans = rng.uniform(-trans_range_m, trans_range_m, size=3)
    rot = euler_to_rotation(EulerAngles(roll, pitch, yaw))
    return RigidTransform(rot, trans)


def make_initial(t_gt: RigidTransform,
                 delta: RigidTransform) -> tuple[RigidTransform, RigidTransform]:
    """Perturb ground-truth extrinsics.

    Returns (t_init, answer) with t_init = delta^-1 * t_gt so that the residual
    transform the estimator must recover is exactly delta.
    """
    return compose(invert(delta), t_gt), delta


@dataclass(frozen=True)
class PoseError:
    """Component-wise absolute pose error: translation in cm, rotation in deg."""

    trans_abs: np.ndarray  # |dx|, |dy|, |dz| in cm
    rot_abs: np.ndarray    # |droll|, |dpitch|, |dyaw| in deg
    trans_mean: float
    rot_mean: float

    def __post_init__(self):
        ta = np.asarray(self.trans_abs, dtype=float).reshape(3)
        ra = np.asarray(self.rot_abs, dtype=float).reshape(3)
        ta.flags.writeable = False
        ra.flags.writeable = False
        object.__setattr__(self, "trans_abs", ta)
        object.__setattr__(self, "rot_abs", ra)


def pose_error(est: RigidTransform, gt: RigidTransform) -> PoseError:
    """Absolute errors of est relative to gt, from the transform gt^-1 * est.

    Exactly zero when est equals gt bit-for-bit (no float residue from the
    matrix products).
    """
    if np.array_equal(est.rotation, gt.rotation):
        rot_deg = np.zeros(3)
    else:
        ang = _euler_from_matrix(gt.rotation.T @ est.rotation)
        rot_deg = np.abs(np.degrees(ang.as_array()))
    rel_t = gt.rotation.T @ (est.translation - gt.translation)
    trans_cm = np.abs(rel_t) * 100.0
    return PoseError(trans_cm, rot_deg,
                     float(trans_cm.mean()), float(rot_deg.mean()))


def to_kitti_line(t: RigidTransform) -> str:
    """Serialize as 12 numbers: the 3x4 matrix [R | t] in row-major order."""
    m = np.hstack([t.rotation, t.translation[:, None]])
    return " ".join(repr(float(v)) for v in m.reshape(-1))


def from_kitti_line(line: str) -> RigidTransform:
    vals = np.array([float(v) for v in line.split()], dtype=float)
    if vals.size != 12:
        raise ValueError(f"expected 12 values, got {vals.size}")
    m = vals.reshape(3, 4)
    return RigidTransform(m[:, :3], m[:, 3])


def orthonormalize(m) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD; used by solvers before
    constructing a RigidTransform."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r
