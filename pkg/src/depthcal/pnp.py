"""Pose recovery from 2D-3D correspondences: EPnP + Gauss-Newton + RANSAC.

The solver expresses the scene points as barycentric combinations of four
control points (three in the planar case), recovers the control points in the
camera frame from the nullspace of the projection constraints, fixes the
combination coefficients from the inter-control-point distances, and extracts
the pose by Procrustes alignment. The best candidate is polished with up to
ten Gauss-Newton steps on the reprojection residuals, the rotation updated
multiplicatively by an axis-angle increment.

RANSAC samples 4-point hypotheses (weight-biased by default) with one
dedicated RNG substream per hypothesis index, so results are deterministic
for a fixed seed no matter how hypotheses are scheduled. Correspondence
order does not matter either: rows are canonicalized internally before
sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .depthmaps import CameraIntrinsics, PointCloud
from .errors import DegenerateConfiguration, InsufficientPoints, NoConsensus
from .geometry import RigidTransform, orthonormalize

_RANK_TOL = 1e-9
DEFAULT_ALPHA_MAX = 0.5


@dataclass(frozen=True)
class Correspondence:
    """One 3-D point (solver frame, meters) matched to a sub-pixel image
    location, with a confidence weight in [0, 1]."""

    point3d: np.ndarray
    pixel2d: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.point3d, dtype=float).reshape(3)
        q = np.asarray(self.pixel2d, dtype=float).reshape(2)
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError("weight must lie in [0, 1]")
        object.__setattr__(self, "point3d", p)
        object.__setattr__(self, "pixel2d", q)


@dataclass(frozen=True)
class RansacConfig:
    reproj_threshold: float = 2.0   # pixels
    confidence: float = 0.99
    max_iterations: int = 1000
    min_inliers: int = 12
    seed: int = 0
    weighted_sampling: bool = True

    def __post_init__(self):
        if self.reproj_threshold <= 0:
            raise ValueError("reproj_threshold must be > 0")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def _arrays(correspondences):
    pts = np.array([c.point3d for c in correspondences])
    pix = np.array([c.pixel2d for c in correspondences])
    wts = np.array([c.weight for c in correspondences])
    return pts, pix, wts


def reprojection_errors(correspondences, k: CameraIntrinsics,
                        t: RigidTransform) -> np.ndarray:
    """Euclidean pixel error per correspondence; inf for points that land
    behind the camera."""
    pts, pix, _ = _arrays(correspondences)
    cam = t.apply(pts)
    err = np.full(len(pts), np.inf)
    front = cam[:, 2] > 1e-9
    z = cam[front, 2]
    u = k.fx * cam[front, 0] / z + k.cx
    v = k.fy * cam[front, 1] / z + k.cy
    err[front] = np.hypot(u - pix[front, 0], v - pix[front, 1])
    return err


# ---------------------------------------------------------------------------
# EPnP core
# ---------------------------------------------------------------------------

def _control_points(pts):
    """Centroid plus principal axes scaled by the singular values; detects
    collinear (degenerate) and planar configurations."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    scale = max(evals[0], _RANK_TOL)
    if evals[1] / scale < 1e-8:
        raise DegenerateConfiguration("points are (nearly) collinear")
    planar = evals[2] / scale < 1e-8
    axes = [centroid + evecs[:, i] * math.sqrt(max(evals[i], 0.0))
            for i in range(2 if planar else 3)]
    ctrl = np.vstack([centroid] + axes)
    return ctrl, planar


def _barycentric(pts, ctrl):
    m = ctrl.shape[0]
    a = np.vstack([ctrl.T, np.ones(m)])           # 4 x m
    b = np.vstack([pts.T, np.ones(len(pts))])     # 4 x n
    alphas, *_ = np.linalg.lstsq(a, b, rcond=None)
    return alphas.T                               # n x m


def _m_matrix(alphas, pix, k):
    n, m = alphas.shape
    M = np.zeros((2 * n, 3 * m))
    for j in range(m):
        a = alphas[:, j]
        M[0::2, 3 * j] = a * k.fx
        M[0::2, 3 * j + 2] = a * (k.cx - pix[:, 0])
        M[1::2, 3 * j + 1] = a * k.fy
        M[1::2, 3 * j + 2] = a * (k.cy - pix[:, 1])
    return M


def _pairwise_dist_sq(ctrl):
    m = ctrl.shape[0]
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    d = np.array([((ctrl[i] - ctrl[j]) ** 2).sum() for i, j in pairs])
    return pairs, d


def _beta_candidates(kernel, pairs, dist_w, m):
    """Initial beta vectors for kernel dimensions 1-3 via the linearized
    distance constraints."""
    diffs = []
    for (i, j) in pairs:
        diffs.append(kernel[3 * i:3 * i + 3, :] - kernel[3 * j:3 * j + 3, :])
    candidates = []

    # N = 1: single direction, closed-form scale
    v = np.array([d[:, 0] for d in diffs])
    num = (np.sqrt((v ** 2).sum(axis=1)) * np.sqrt(dist_w)).sum()
    den = ((v ** 2).sum(axis=1)).sum()
    b1 = np.zeros(kernel.shape[1])
    b1[0] = num / max(den, 1e-30)
    candidates.append(b1)

    # N = 2: unknowns (b11, b12, b22)
    if kernel.shape[1] >= 2:
        rows = []
        for d in diffs:
            v1, v2 = d[:, 0], d[:, 1]
            rows.append([v1 @ v1, 2 * v1 @ v2, v2 @ v2])
        sol, *_ = np.linalg.lstsq(np.array(rows), dist_w, rcond=None)
        b11, b12, b22 = sol
        beta1 = math.sqrt(abs(b11))
        beta2 = math.sqrt(abs(b22))
        if b12 < 0:
            beta2 = -beta2
        b = np.zeros(kernel.shape[1])
        b[0], b[1] = beta1, beta2
        candidates.append(b)

    # N = 3: unknowns (b11, b12, b13, b22, b23, b33)
    if kernel.shape[1] >= 3 and len(pairs) >= 6:
        rows = []
        for d in diffs:
            v1, v2, v3 = d[:, 0], d[:, 1], d[:, 2]
            rows.append([v1 @ v1, 2 * v1 @ v2, 2 * v1 @ v3,
                         v2 @ v2, 2 * v2 @ v3, v3 @ v3])
        sol, *_ = np.linalg.lstsq(np.array(rows), dist_w, rcond=None)
        b11, b12, b13, b22, b23, b33 = sol
        beta1 = math.sqrt(abs(b11))
        beta2 = math.sqrt(abs(b22)) * (1 if b12 >= 0 else -1)
        beta3 = math.sqrt(abs(b33)) * (1 if b13 >= 0 else -1)
        b = np.zeros(kernel.shape[1])
        b[0], b[1], b[2] = beta1, beta2, beta3
        candidates.append(b)
    return candidates


def _refine_betas(kernel, pairs, dist_w, beta, iterations=6):
    """Small Gauss-Newton on the control-point distance residuals."""
    nb = kernel.shape[1]
    for _ in range(iterations):
        cc = (kernel @ beta).reshape(-1, 3)
        res = []
        jac = []
        for (i, j), dw in zip(pairs, dist_w):
            diff = cc[i] - cc[j]
            res.append(diff @ diff - dw)
            kd = kernel[3 * i:3 * i + 3, :] - kernel[3 * j:3 * j + 3, :]
            jac.append(2.0 * diff @ kd)
        res = np.array(res)
        jac = np.array(jac).reshape(len(pairs), nb)
        try:
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.abs(step).max() < 1e-12:
            break
    return beta


def _pose_from_betas(kernel, beta, alphas, pts):
    cc = (kernel @ beta).reshape(-1, 3)
    cam = alphas @ cc
    if (cam[:, 2] < 0).sum() > len(cam) / 2:   # cheirality: flip the sign
        cc = -cc
        cam = -cam
    # Procrustes between world points and their camera-frame reconstruction
    cw = pts - pts.mean(axis=0)
    cm = cam - cam.mean(axis=0)
    h = cw.T @ cm
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cam.mean(axis=0) - r @ pts.mean(axis=0)
    return RigidTransform(orthonormalize(r), t)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _exp_so3(w):
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3) + _skew(w)
    a = w / angle
    s = _skew(a)
    return np.eye(3) + math.sin(angle) * s + (1 - math.cos(angle)) * (s @ s)


def _gauss_newton(pts, pix, wts, k, pose, iterations=10):
    """Refine pose on weighted reprojection residuals; rotation updated as
    R <- exp(w) R."""
    r, t = pose.rotation.copy(), pose.translation.copy()
    sw = np.sqrt(np.maximum(wts, 1e-12))
    for _ in range(iterations):
        cam = pts @ r.T + t
        z = cam[:, 2]
        if np.any(z <= 1e-9):
            break
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
        res = np.column_stack([u - pix[:, 0], v - pix[:, 1]]) * sw[:, None]
        inv_z = 1.0 / z
        duc = np.column_stack([k.fx * inv_z, np.zeros(len(z)),
                               -k.fx * cam[:, 0] * inv_z ** 2])
        dvc = np.column_stack([np.zeros(len(z)), k.fy * inv_z,
                               -k.fy * cam[:, 1] * inv_z ** 2])
        rp = cam - t
        # d(cam)/d(omega) = -skew(rp) for the update R <- exp(omega) R
        zeros = np.zeros(len(pts))
        dc_dw = np.stack([
            np.column_stack([zeros, rp[:, 2], -rp[:, 1]]),
            np.column_stack([-rp[:, 2], zeros, rp[:, 0]]),
            np.column_stack([rp[:, 1], -rp[:, 0], zeros]),
        ], axis=1)  # (n, 3, 3), [i] = -skew(rp_i)
        jac = np.zeros((len(pts), 2, 6))
        jac[:, 0, :3] = np.einsum("nc,ncw->nw", duc, dc_dw)
        jac[:, 0, 3:] = duc
        jac[:, 1, :3] = np.einsum("nc,ncw->nw", dvc, dc_dw)
        jac[:, 1, 3:] = dvc
        jac *= sw[:, None, None]
        a = jac.reshape(-1, 6)
        b = -res.reshape(-1)
        try:
            step, *_ = np.linalg.lstsq(a, b, rcond=None)
        except np.linalg.LinAlgError:
            break
        r = orthonormalize(_exp_so3(step[:3]) @ r)
        t = t + step[3:]
        if np.abs(step).max() < 1e-14:
            break
    return RigidTransform(r, t)


def epnp(correspondences, k: CameraIntrinsics,
         gn_iterations: int = 10) -> RigidTransform:
    """Pose from >= 4 correspondences (3 control points when coplanar).

    Evaluates the kernel-dimension candidates, refines each beta set on the
    distance constraints, keeps the candidate with the lowest reprojection
    error and polishes it with Gauss-Newton on the reprojection residuals.
    """
    if len(correspondences) < 4:
        raise InsufficientPoints(f"need >= 4 points, got {len(correspondences)}")
    pts, pix, wts = _arrays(correspondences)
    ctrl, planar = _control_points(pts)
    alphas = _barycentric(pts, ctrl)
    m = _m_matrix(alphas, pix, k)
    _, _, vt = np.linalg.svd(m, full_matrices=True)
    kdim = 3 if planar else 4
    kernel = vt[-kdim:][::-1].T    # columns: smallest singular vectors first
    pairs, dist_w = _pairwise_dist_sq(ctrl)

    best = None
    best_err = np.inf
    for beta in _beta_candidates(kernel, pairs, dist_w, ctrl.shape[0]):
        beta = _refine_betas(kernel, pairs, dist_w, beta)
        try:
            pose = _pose_from_betas(kernel, beta, alphas, pts)
        except np.linalg.LinAlgError:
            continue
        err = reprojection_errors(correspondences, k, pose)
        mean_err = float(np.mean(np.minimum(err, 1e12)))
        if mean_err < best_err:
            best, best_err = pose, mean_err
    if best is None:
        raise DegenerateConfiguration("no EPnP candidate produced a pose")
    return _gauss_newton(pts, pix, wts, k, best, iterations=gn_iterations)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def ransac_pnp(correspondences, k: CameraIntrinsics,
               cfg: RansacConfig = RansacConfig()):
    """Robust pose fit; returns (transform, inlier mask in input order).

    Hypothesis i draws its 4-point sample from RNG substream (seed, i) over
    the canonicalized correspondence order, biased by the weights unless
    weighted_sampling is off. The iteration budget adapts to the best inlier
    ratio at the configured confidence; the final pose is re-estimated on
    all inliers of the best hypothesis and the mask recomputed once from it.
    """
    n = len(correspondences)
    if n < max(4, cfg.min_inliers):
        raise NoConsensus(
            f"{n} correspondences cannot reach min_inliers={cfg.min_inliers}")
    pts, pix, wts = _arrays(correspondences)
    canon = np.lexsort((wts, pix[:, 1], pix[:, 0],
                        pts[:, 2], pts[:, 1], pts[:, 0]))
    ordered = [correspondences[i] for i in canon]

    if cfg.weighted_sampling and wts[canon].sum() > 0:
        probs = wts[canon] / wts[canon].sum()
    else:
        probs = np.full(n, 1.0 / n)

    best_count = -1
    best_err = np.inf
    best_inl = None
    needed = cfg.max_iterations
    i = 0
    while i < min(needed, cfg.max_iterations):
        rng = np.random.default_rng([cfg.seed, i])
        sample = rng.choice(n, size=4, replace=False, p=probs)
        i += 1
        try:
            pose = epnp([ordered[s] for s in sample], k)
        except (InsufficientPoints, DegenerateConfiguration):
            continue
        err = reprojection_errors(ordered, k, pose)
        inl = err <= cfg.reproj_threshold
        count = int(inl.sum())
        mean_err = float(err[inl].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count, best_err, best_inl = count, mean_err, inl
            ratio = count / n
            if ratio >= 1.0:
                needed = i
            elif ratio > 0:
                denom = math.log(max(1.0 - ratio ** 4, 1e-12))
                needed = min(cfg.max_iterations,
                             math.ceil(math.log(1.0 - cfg.confidence) / denom))

    if best_inl is None or best_count < cfg.min_inliers:
        raise NoConsensus(
            f"best consensus {max(best_count, 0)} < min_inliers={cfg.min_inliers}")

    subset = [ordered[j] for j in np.nonzero(best_inl)[0]]
    final = epnp(subset, k)
    final_err = reprojection_errors(ordered, k, final)
    final_inl = final_err <= cfg.reproj_threshold
    if int(final_inl.sum()) < cfg.min_inliers:
        final_inl = best_inl

    mask = np.zeros(n, dtype=bool)
    mask[canon] = final_inl
    return final, mask


def correspondences_from_flow(field, sparse, index, cloud: PointCloud,
                              alpha_max: float = DEFAULT_ALPHA_MAX,
                              margin_frac: float = 0.1):
    """Turn a probabilistic flow field into PnP correspondences.

    For every valid sparse pixel whose outlier probability is at most
    alpha_max: the 3-D point is looked up through the projection index map
    (in whatever frame the caller's cloud is expressed; the pipeline passes
    the initial-pose frame so the recovered transform is the residual), the
    image location is pixel + mu, and the weight is (1 - alpha) / (1 + sigma2).
    Targets outside the image bounds expanded by margin_frac are dropped.
    """
    h, w = sparse.shape
    out = []
    vs, us = np.nonzero(sparse.valid)
    mu_u, mu_v = field.mu[0], field.mu[1]
    for v, u in zip(vs, us):
        a = field.alpha[v, u]
        if a > alpha_max:
            continue
        tu = u + mu_u[v, u]
        tv = v + mu_v[v, u]
        if not (-margin_frac * w <= tu <= (w - 1) + margin_frac * w):
            continue
        if not (-margin_frac * h <= tv <= (h - 1) + margin_frac * h):
            continue
        weight = float((1.0 - a) / (1.0 + field.sigma2[v, u]))
        out.append(Correspondence(cloud.points[index[v, u]], (tu, tv), weight))
    return out


def correspondences_to_csv(correspondences) -> str:
    """CSV export (x, y, z, u, v, weight), one row per correspondence."""
    lines = ["x,y,z,u,v,weight"]
    for c in correspondences:
        vals = [*c.point3d, *c.pixel2d, c.weight]
        lines.append(",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"
