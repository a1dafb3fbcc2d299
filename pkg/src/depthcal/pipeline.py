"""End-to-end orchestration: staged calibration, batch evaluation, reports.

One frame flows as: project the cloud under the initial pose (z-buffered
sparse map + point index), complete and normalize both depth maps, extract
features, weight the LiDAR side by the reliability map, build the correlation
volume, infer the probabilistic flow (or substitute the oracle flow when
configured), turn it into weighted 2D-3D correspondences and solve
RANSAC-EPnP. The recovered transform is the residual pose: composing it with
the initial pose reproduces the ground truth.

The flow-source switch is the backbone of verification: "oracle" isolates
the correspondence-to-PnP chain with exact flow, "oracle_noisy" adds seeded
Gaussian pixel noise to characterize sensitivity, "estimated" exercises the
full classical matcher.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .depthmaps import CameraIntrinsics, DepthMap, PointCloud, \
    complete_depth, normalize_depth, project_points
from .errors import CalibError, PipelineStageError
from .flow import FlowField, ground_truth_flow
from .geometry import RigidTransform, compose, invert, pose_error, \
    sample_perturbation, to_kitti_line
from .matching import ProbabilisticFlowField, apply_reliability, \
    correlation_volume, extract_features, infer_flow, reliability_map
from .pnp import RansacConfig, correspondences_from_flow, ransac_pnp
from .synth import CalibrationCase

FLOW_SOURCES = ("estimated", "oracle", "oracle_noisy")


@dataclass(frozen=True)
class PipelineConfig:
    # depth completion
    completion_max_depth: float = 100.0
    completion_dilate: int = 5
    completion_close: int = 5
    completion_fill: int = 7
    completion_median: int = 5
    # normalization and projection
    normalize_clip: float = 80.0
    z_min: float = 0.1
    # matcher
    matcher_tau: float = 4.0
    matcher_radius: int = 4
    matcher_iterations: int = 4
    matcher_levels: int = 4
    matcher_l2_normalize: bool = True
    matcher_kappa_min: float = 1e-6
    matcher_sigma2_min: float = 0.05
    matcher_sigma2_max: float = 100.0
    # loss ablation flags
    loss_strict_zero_mask: bool = False
    loss_literal_log_term: bool = False
    # correspondence filter + RANSAC
    alpha_max: float = 0.5
    ransac_threshold: float = 2.0
    ransac_confidence: float = 0.99
    ransac_max_iterations: int = 1000
    ransac_min_inliers: int = 12
    ransac_seed: int = 0
    ransac_weighted: bool = True
    # flow source
    flow_source: str = "estimated"
    oracle_noise_px: float = 0.0
    # reporting
    include_timings: bool = True

    def __post_init__(self):
        if self.flow_source not in FLOW_SOURCES:
            raise ValueError(f"flow_source must be one of {FLOW_SOURCES}")

    def ransac(self) -> RansacConfig:
        return RansacConfig(self.ransac_threshold, self.ransac_confidence,
                            self.ransac_max_iterations, self.ransac_min_inliers,
                            self.ransac_seed, self.ransac_weighted)


# flat config-file keys, namespaced by module
_CONFIG_KEYS = {
    "completion.max_depth": ("completion_max_depth", float),
    "completion.dilate_kernel": ("completion_dilate", int),
    "completion.close_kernel": ("completion_close", int),
    "completion.fill_kernel": ("completion_fill", int),
    "completion.median_kernel": ("completion_median", int),
    "normalize.max_clip": ("normalize_clip", float),
    "projection.z_min": ("z_min", float),
    "matcher.tau": ("matcher_tau", float),
    "matcher.radius": ("matcher_radius", int),
    "matcher.iterations": ("matcher_iterations", int),
    "matcher.levels": ("matcher_levels", int),
    "matcher.l2_normalize": ("matcher_l2_normalize", bool),
    "matcher.kappa_min": ("matcher_kappa_min", float),
    "matcher.sigma2_min": ("matcher_sigma2_min", float),
    "matcher.sigma2_max": ("matcher_sigma2_max", float),
    "losses.strict_zero_mask": ("loss_strict_zero_mask", bool),
    "losses.literal_log_term": ("loss_literal_log_term", bool),
    "pnp.alpha_max": ("alpha_max", float),
    "ransac.reproj_threshold": ("ransac_threshold", float),
    "ransac.confidence": ("ransac_confidence", float),
    "ransac.max_iterations": ("ransac_max_iterations", int),
    "ransac.min_inliers": ("ransac_min_inliers", int),
    "ransac.seed": ("ransac_seed", int),
    "ransac.weighted_sampling": ("ransac_weighted", bool),
    "flow.source": ("flow_source", str),
    "flow.noise_px": ("oracle_noise_px", float),
    "report.include_timings": ("include_timings", bool),
}


def parse_config(text: str) -> PipelineConfig:
    """Flat "key = value" document, keys namespaced by module; '#' comments."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        field_name, typ = _CONFIG_KEYS[key]
        if typ is bool:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"config line {lineno}: bad boolean '{value}'")
            overrides[field_name] = value.lower() in ("true", "1", "yes")
        else:
            try:
                overrides[field_name] = typ(value)
            except ValueError as e:
                raise ValueError(f"config line {lineno}: {e}") from e
    return PipelineConfig(**overrides)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Echoed into every report, keyed by the config-file names."""
    inverse = {field_name: key for key, (field_name, _) in _CONFIG_KEYS.items()}
    return {inverse[f.name]: getattr(cfg, f.name) for f in fields(cfg)
            if f.name in inverse}


@dataclass(frozen=True)
class Frame:
    """In-memory frame handed to calibrate()."""

    frame_id: str
    cloud: PointCloud
    camera_depth: DepthMap
    intrinsics: CameraIntrinsics
    t_gt: RigidTransform | None = None
    seed: int = 0


class _StageTimer:
    def __init__(self):
        self.timings = {}

    def run(self, stage, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except CalibError as e:
            raise PipelineStageError(stage, e) from e
        self.timings[stage] = (time.perf_counter() - t0) * 1000.0
        return out


def _oracle_field(frame: Frame, t_init, cfg, shape):
    """Exact flow (optionally noisy) in ProbabilisticFlowField form."""
    if frame.t_gt is None:
        raise CalibError("oracle flow needs ground-truth extrinsics")
    cloud_init = frame.cloud.transformed(t_init)
    residual = compose(frame.t_gt, invert(t_init))
    flow, mask = ground_truth_flow(cloud_init, frame.intrinsics,
                                   RigidTransform.identity(), residual)
    mu = np.stack([flow.du, flow.dv])
    if cfg.flow_source == "oracle_noisy" and cfg.oracle_noise_px > 0:
        rng = np.random.default_rng([frame.seed, 11])
        mu = mu + rng.normal(0.0, cfg.oracle_noise_px, mu.shape)
    sigma2 = np.full(shape, cfg.matcher_sigma2_min)
    alpha = np.where(mask.v, 0.0, 1.0)
    return ProbabilisticFlowField(mu, sigma2, alpha)


def calibrate(frame: Frame, t_init: RigidTransform, cfg: PipelineConfig):
    """Run the staged pipeline on one frame.

    Returns (residual transform, row dict). Composing the result with t_init
    gives the estimated ground-truth extrinsics. Any stage error is re-raised
    as PipelineStageError tagged with the stage name.
    """
    k = frame.intrinsics
    timer = _StageTimer()
    cloud_init = frame.cloud.transformed(t_init)
    ident = RigidTransform.identity()

    sparse, index = timer.run(
        "project", lambda: project_points(cloud_init, k, ident, cfg.z_min))

    if cfg.flow_source == "estimated":
        dense_l = timer.run("complete", lambda: complete_depth(
            sparse, cfg.completion_max_depth, cfg.completion_dilate,
            cfg.completion_close, cfg.completion_fill, cfg.completion_median))
        norm_l = normalize_depth(dense_l, cfg.normalize_clip)
        norm_c = timer.run("normalize", lambda: normalize_depth(
            frame.camera_depth, cfg.normalize_clip))

        def _features():
            f_l = extract_features(norm_l)
            f_c = extract_features(norm_c)
            rel = reliability_map(sparse, cfg.matcher_tau)
            return apply_reliability(f_l, rel), f_c
        f_lw, f_c = timer.run("features", _features)
        vol = timer.run("correlation", lambda: correlation_volume(
            f_lw, f_c, cfg.matcher_levels, cfg.matcher_l2_normalize))
        field = timer.run("infer_flow", lambda: infer_flow(
            vol, FlowField.zero(sparse.shape), cfg.matcher_iterations,
            cfg.matcher_radius, 1.0, cfg.matcher_kappa_min,
            cfg.matcher_sigma2_min, cfg.matcher_sigma2_max))
    else:
        field = timer.run("oracle_flow", lambda: _oracle_field(
            frame, t_init, cfg, sparse.shape))

    corr = timer.run("correspond", lambda: correspondences_from_flow(
        field, sparse, index, cloud_init, cfg.alpha_max))
    estimate, inliers = timer.run(
        "ransac", lambda: ransac_pnp(corr, k, cfg.ransac()))

    row = {
        "frame_id": frame.frame_id,
        "estimate": to_kitti_line(estimate),
        "num_correspondences": len(corr),
        "num_inliers": int(inliers.sum()),
        "alpha_mean": float(field.alpha.mean()),
        "alpha_median": float(np.median(field.alpha)),
        "sigma2_mean": float(field.sigma2.mean()),
        "sigma2_median": float(np.median(field.sigma2)),
    }
    if cfg.include_timings:
        row["timings_ms"] = {k_: round(v, 3) for k_, v in timer.timings.items()}
        row["total_ms"] = round(sum(timer.timings.values()), 3)
    return estimate, row


def _error_fields(estimate, answer):
    err = pose_error(estimate, answer)
    return {
        "trans_cm": [float(v) for v in err.trans_abs],
        "rot_deg": [float(v) for v in err.rot_abs],
        "trans_mean_cm": err.trans_mean,
        "rot_mean_deg": err.rot_mean,
    }


def run_case(case: CalibrationCase, cfg: PipelineConfig,
             frame_id: str = "case") -> dict:
    """Calibrate one synthetic case and attach errors vs its answer key."""
    frame = Frame(frame_id, case.scene.cloud, case.scene.camera_depth,
                  case.scene.intrinsics, case.scene.t_gt,
                  seed=case.perturbation_seed)
    estimate, row = calibrate(frame, case.t_init, cfg)
    row.update(_error_fields(estimate, case.delta))
    init_err = pose_error(RigidTransform.identity(), case.delta)
    row["initial_trans_mean_cm"] = init_err.trans_mean
    row["initial_rot_mean_deg"] = init_err.rot_mean
    return row


def _case_worker(args):
    case, cfg, frame_id = args
    try:
        return run_case(case, cfg, frame_id)
    except PipelineStageError as e:
        return {"frame_id": frame_id, "error": str(e), "stage": e.stage}


def _bundle_worker(args):
    bundle, rot_deg, trans_m, cfg = args
    from .dataio import load_frame
    try:
        cloud, depth = load_frame(bundle)
        frame = Frame(bundle.frame_id, cloud, depth, bundle.intrinsics,
                      bundle.t_gt, seed=bundle.seed or 0)
        if bundle.t_gt is not None and bundle.seed is not None:
            delta = sample_perturbation(rot_deg, trans_m, bundle.seed)
            t_init = compose(invert(delta), bundle.t_gt)
            estimate, row = calibrate(frame, t_init, cfg)
            row.update(_error_fields(estimate, delta))
            init_err = pose_error(RigidTransform.identity(), delta)
            row["initial_trans_mean_cm"] = init_err.trans_mean
            row["initial_rot_mean_deg"] = init_err.rot_mean
        else:
            estimate, row = calibrate(frame, bundle.t_gt
                                      or RigidTransform.identity(), cfg)
        return row
    except (PipelineStageError, CalibError, OSError) as e:
        stage = getattr(e, "stage", "load")
        return {"frame_id": bundle.frame_id, "error": str(e), "stage": stage}


@dataclass(frozen=True)
class CalibrationReport:
    rows: tuple
    aggregates: dict
    config: dict
    num_failures: int

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "aggregates": self.aggregates,
            "frames": list(self.rows),
            "num_failures": self.num_failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _aggregate(rows) -> dict:
    good = [r for r in rows if "error" not in r and "trans_cm" in r]
    if not good:
        return {"num_cases": 0}
    trans = np.array([r["trans_cm"] for r in good])
    rot = np.array([r["rot_deg"] for r in good])
    tmean = np.array([r["trans_mean_cm"] for r in good])
    rmean = np.array([r["rot_mean_deg"] for r in good])

    def stats(fn):
        return {
            "trans_cm": {"mean": fn(tmean), "x": fn(trans[:, 0]),
                         "y": fn(trans[:, 1]), "z": fn(trans[:, 2])},
            "rot_deg": {"mean": fn(rmean), "roll": fn(rot[:, 0]),
                        "pitch": fn(rot[:, 1]), "yaw": fn(rot[:, 2])},
        }
    return {
        "num_cases": len(good),
        "mean": stats(lambda a: float(np.mean(a))),
        "median": stats(lambda a: float(np.median(a))),
    }


def evaluate(cases, cfg: PipelineConfig, workers: int = 1) -> CalibrationReport:
    """Calibrate every case; per-case failures are recorded, not raised."""
    jobs = [(case, cfg, f"{i:06d}") for i, case in enumerate(cases)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_case_worker, jobs))
    else:
        rows = [_case_worker(j) for j in jobs]
    failures = sum(1 for r in rows if "error" in r)
    return CalibrationReport(tuple(rows), _aggregate(rows),
                             config_to_dict(cfg), failures)


def evaluate_manifest(manifest, cfg: PipelineConfig,
                      workers: int = 1) -> CalibrationReport:
    """Same as evaluate but driven from an on-disk manifest."""
    jobs = [(b, manifest.rot_range_deg, manifest.trans_range_m, cfg)
            for b in manifest.frames]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_bundle_worker, jobs))
    else:
        rows = [_bundle_worker(j) for j in jobs]
    failures = sum(1 for r in rows if "error" in r)
    return CalibrationReport(tuple(rows), _aggregate(rows),
                             config_to_dict(cfg), failures)


def format_table(report: CalibrationReport) -> str:
    """Aligned text table mirroring the standard benchmark column order."""
    agg = report.aggregates
    if agg.get("num_cases", 0) == 0:
        return "no successful cases\n"
    hdr = (f"{'':8s}  {'Translation (cm)':>32s}    {'Rotation (deg)':>32s}\n"
           f"{'':8s}  {'Mean':>8s}{'X':>8s}{'Y':>8s}{'Z':>8s}    "
           f"{'Mean':>8s}{'Roll':>8s}{'Pitch':>8s}{'Yaw':>8s}\n")
    lines = [hdr]
    for name in ("mean", "median"):
        s = agg[name]
        t, r = s["trans_cm"], s["rot_deg"]
        lines.append(
            f"{name:8s}  {t['mean']:8.3f}{t['x']:8.3f}{t['y']:8.3f}"
            f"{t['z']:8.3f}    {r['mean']:8.3f}{r['roll']:8.3f}"
            f"{r['pitch']:8.3f}{r['yaw']:8.3f}\n")
    lines.append(f"cases: {agg['num_cases']}   "
                 f"failures: {report.num_failures}\n")
    return "".join(lines)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

_COLOR_ANCHORS = np.array([
    [48, 18, 227], [38, 104, 255], [31, 181, 252],
    [86, 235, 182], [184, 247, 88], [249, 196, 35], [230, 83, 14],
], dtype=float)  # blue (near) .. red (far), BGR-ish ramp stored as RGB


def _depth_colors(depths, max_depth):
    t = np.clip(depths / max_depth, 0.0, 1.0) * (len(_COLOR_ANCHORS) - 1)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, len(_COLOR_ANCHORS) - 1)
    frac = (t - i0)[:, None]
    return ((1 - frac) * _COLOR_ANCHORS[i0] + frac * _COLOR_ANCHORS[i1]) \
        .astype(np.uint8)


def render_overlay(frame: Frame, t: RigidTransform,
                   max_depth: float = 80.0) -> np.ndarray:
    """Depth-colored LiDAR splats over the grayscale camera depth canvas."""
    from .depthmaps import project_subpixel
    k = frame.intrinsics
    gray = (255.0 * (1.0 - np.clip(frame.camera_depth.values / max_depth,
                                   0.0, 1.0))).astype(np.uint8)
    img = np.stack([gray] * 3, axis=-1)
    uv, depth, in_front = project_subpixel(frame.cloud.points, k, t)
    u = np.rint(uv[:, 0]).astype(float)
    v = np.rint(uv[:, 1]).astype(float)
    ok = in_front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    if not ok.any():
        raise CalibError("no LiDAR point projects into the overlay")
    colors = _depth_colors(depth[ok], max_depth)
    img[v[ok].astype(int), u[ok].astype(int)] = colors
    return img


def overlay_consistency(frame: Frame, t: RigidTransform,
                        tol: float) -> float:
    """Fraction of projected LiDAR points whose depth agrees with the camera
    depth map (bilinearly sampled at the exact projection) within tol."""
    from scipy.ndimage import map_coordinates
    from .depthmaps import project_subpixel
    k = frame.intrinsics
    uv, depth, in_front = project_subpixel(frame.cloud.points, k, t)
    ok = in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1) \
        & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1)
    if not ok.any():
        raise CalibError("no LiDAR point projects into the image")
    sampled = map_coordinates(frame.camera_depth.values,
                              [uv[ok, 1], uv[ok, 0]], order=1)
    return float((np.abs(sampled - depth[ok]) <= tol).mean())
