"""Classical depth-feature matching producing a probabilistic flow field.

Replaces a learned encoder/decoder with deterministic machinery:

* per-cell descriptors of the depth maps at 1/8 resolution, built from
  masked cell aggregates so the LiDAR side uses only real measurements:
  local depth contrast, signed gradients and the Laplacian of the cell-mean
  grid at three scales. Local contrast is used instead of absolute depth
  because the residual transform between the two maps shifts absolute depth
  values by up to several meters at range while leaving local differences
  nearly intact;
* a distance-transform reliability map over the sparse LiDAR samples;
* an all-pairs multi-scale correlation volume (dot products over cells);
* flow inference by neighborhood-consensus peak search: per-cell windows of
  correlation scores are averaged over neighboring source cells
  (reliability-weighted cost-volume filtering), which resolves the aperture
  ambiguity of smooth depth regions, with sub-cell quadratic refinement.
  Moving the estimate costs a quadratic distance penalty, so weak
  correlation ridges cannot drag a good initial flow away.

The output distribution parameters keep the contract a learned decoder
would provide: a strong, consistent match gives low variance and low
outlier probability; flat, ambiguous or mismatched content (occlusions,
corrupted regions) gives large sigma2 and alpha near 1. The outlier
probability is the complement of the consensus match quality, normalized to
be invariant to feature scaling; on smooth depth scenes a plain
second-peak ratio saturates near 1 everywhere and cannot separate outliers
from ordinary surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .depthmaps import DepthMap, NormalizedDepthMap
from .errors import ShapeMismatch
from .flow import FlowField

CELL = 8                 # feature-grid cell size in pixels
DEFAULT_TAU = 4.0        # reliability decay length, feature-grid cells
DEFAULT_LEVELS = 4
DEFAULT_RADIUS = 4       # search radius, cells
DEFAULT_ITERATIONS = 4
DEFAULT_SMOOTH_RADIUS = 3   # consensus averaging radius, cells
DEFAULT_DRIFT_PENALTY = 0.02  # per squared cell, in window-normalized units
DEFAULT_ALPHA_RADIUS = 8
KAPPA_MIN = 1e-6
SIGMA2_MIN = 0.05
SIGMA2_MAX = 100.0

_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class FeatureMap:
    """C x h x w descriptor grid at 1/CELL of the input resolution."""

    channels: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=float)
        if c.ndim != 3:
            raise ShapeMismatch("channels must be C x h x w")
        if not np.all(np.isfinite(c)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "channels", c)

    @property
    def num_channels(self):
        return self.channels.shape[0]

    @property
    def grid_shape(self):
        return self.channels.shape[1:]


@dataclass(frozen=True)
class ReliabilityMap:
    """Per-cell confidence in [0, 1], high near real LiDAR measurements."""

    r: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        if r.min() < 0.0 or r.max() > 1.0:
            raise ValueError("reliability must lie in [0, 1]")
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class CorrelationVolume:
    """levels[k] has shape (h, w, h / 2^k, w / 2^k): all-pairs similarities
    between source cells and 2^k-pooled target cells."""

    levels: list
    num_channels: int = 0
    l2_normalized: bool = False

    @property
    def grid_shape(self):
        return self.levels[0].shape[:2]


@dataclass(frozen=True)
class ProbabilisticFlowField:
    """Full-resolution flow distribution: mean (2, H, W), shared variance
    (H, W) and outlier probability (H, W)."""

    mu: np.ndarray
    sigma2: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        s2 = np.asarray(self.sigma2, dtype=float)
        a = np.asarray(self.alpha, dtype=float)
        if mu.ndim != 3 or mu.shape[0] != 2 or mu.shape[1:] != s2.shape \
                or s2.shape != a.shape:
            raise ShapeMismatch("mu must be (2, H, W) matching sigma2/alpha")
        if np.any(s2 <= 0):
            raise ValueError("sigma2 must be strictly positive")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)
        object.__setattr__(self, "alpha", a)

    @property
    def shape(self):
        return self.sigma2.shape


def _pool2(a: np.ndarray, f: int) -> np.ndarray:
    h, w = a.shape
    if h % f or w % f:
        raise ShapeMismatch(f"grid {a.shape} not divisible by {f}")
    return a.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def cell_mean_grid(values: np.ndarray, valid: np.ndarray | None = None,
                   cell: int = CELL) -> np.ndarray:
    """Per-cell mean of values; with a validity mask, only valid pixels
    contribute and empty cells are filled by growing normalized box blurs
    of the occupied ones (deterministic)."""
    h, w = values.shape
    if h % cell or w % cell:
        raise ShapeMismatch(f"image {values.shape} not divisible by {cell}")
    if valid is None:
        return _pool2(values, cell)
    vsum = (values * valid).reshape(h // cell, cell, w // cell, cell) \
        .sum(axis=(1, 3))
    count = valid.reshape(h // cell, cell, w // cell, cell) \
        .sum(axis=(1, 3)).astype(float)
    grid = np.where(count > 0, vsum / np.maximum(count, 1.0), 0.0)
    holes = count == 0
    ksize = 3
    while holes.any():
        num = ndimage.uniform_filter(np.where(count > 0, vsum, 0.0), ksize)
        den = ndimage.uniform_filter(count, ksize)
        fill = holes & (den > 1e-12)
        grid[fill] = (num / np.maximum(den, 1e-12))[fill]
        holes &= ~fill
        ksize += 2
        if ksize > 4 * max(grid.shape):
            break
    return grid


def extract_features(norm: NormalizedDepthMap, valid: np.ndarray | None = None,
                     cell: int = CELL) -> FeatureMap:
    """Cell descriptors of a normalized depth map (12 channels).

    The map is reduced to its cell-mean grid (masked by ``valid`` when the
    underlying data is sparse); at cell-grid scales 1, 2 and 4 the channels
    are the local depth contrast (mean minus a wider box blur), the signed
    u/v gradients and the Laplacian. Channels are standardized to zero mean
    and unit variance over the map, so a constant map yields all-zero
    features.
    """
    grid = cell_mean_grid(norm.values, valid, cell)
    chans = []
    for s in (1, 2, 4):
        ms = ndimage.uniform_filter(grid, s) if s > 1 else grid
        gv, gu = np.gradient(ms)
        chans.append(ms - ndimage.uniform_filter(grid, 2 * s + 3))
        chans.append(gu)
        chans.append(gv)
        chans.append(ndimage.convolve(ms, _LAPLACIAN, mode="nearest"))
    stack = np.stack(chans)
    mean = stack.mean(axis=(1, 2), keepdims=True)
    std = stack.std(axis=(1, 2), keepdims=True)
    return FeatureMap((stack - mean) / np.maximum(std, 1e-12))


def reliability_map(sparse: DepthMap, tau: float = DEFAULT_TAU,
                    cell: int = CELL) -> ReliabilityMap:
    """exp(-dist / tau) with dist the Euclidean distance (in feature cells)
    to the nearest cell containing at least one valid sparse sample."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    h_px, w_px = sparse.shape
    if h_px % cell or w_px % cell:
        raise ShapeMismatch(f"image {sparse.shape} not divisible by cell {cell}")
    occupied = sparse.valid.reshape(h_px // cell, cell,
                                    w_px // cell, cell).any(axis=(1, 3))
    if not occupied.any():
        return ReliabilityMap(np.zeros(occupied.shape))
    dist = ndimage.distance_transform_edt(~occupied)
    return ReliabilityMap(np.exp(-dist / tau))


def apply_reliability(f: FeatureMap, r: ReliabilityMap) -> FeatureMap:
    if f.grid_shape != r.r.shape:
        raise ShapeMismatch("feature grid and reliability map shapes differ")
    return FeatureMap(f.channels * r.r[None])


def correlation_volume(f_src: FeatureMap, f_tgt: FeatureMap,
                       num_levels: int = DEFAULT_LEVELS,
                       l2_normalize: bool = False) -> CorrelationVolume:
    """All-pairs dot products between source cells and pooled target cells.

    Level k pools the target features by 2^k (channel-wise average) before
    the dot product; every entry is divided by sqrt(C) for scale stability.
    With l2_normalize the per-cell feature vectors of both maps are first
    scaled to unit length (zero vectors stay zero), making entries cosine
    similarities over sqrt(C).
    """
    if f_src.num_channels != f_tgt.num_channels:
        raise ShapeMismatch("channel counts differ")
    if f_src.grid_shape != f_tgt.grid_shape:
        raise ShapeMismatch("feature grids differ")
    c, h, w = f_src.channels.shape
    factor = 2 ** (num_levels - 1)
    if h % factor or w % factor:
        raise ShapeMismatch(
            f"grid {h}x{w} not divisible by 2^(levels-1) = {factor}")

    src = f_src.channels
    tgt = f_tgt.channels
    if l2_normalize:
        src = src / np.maximum(np.linalg.norm(src, axis=0, keepdims=True), 1e-12)
        tgt = tgt / np.maximum(np.linalg.norm(tgt, axis=0, keepdims=True), 1e-12)

    scale = 1.0 / np.sqrt(c)
    levels = []
    for k in range(num_levels):
        f = 2 ** k
        if f == 1:
            pooled = tgt
        else:
            pooled = tgt.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
        vol = np.einsum("chw,cmn->hwmn", src, pooled) * scale
        levels.append(vol)
    return CorrelationVolume(levels, num_channels=c, l2_normalized=l2_normalize)


def _quadratic_peak_arrays(sm, s0, sp):
    """Vectorized parabola vertex offset and curvature magnitude."""
    denom = sm - 2.0 * s0 + sp
    curvature = np.maximum(2.0 * s0 - sm - sp, 0.0)
    safe = np.where(denom < 0.0, denom, -1.0)
    delta = np.where(denom < 0.0, 0.5 * (sm - sp) / safe, 0.0)
    return np.clip(delta, -0.5, 0.5), curvature


def _gather_window(level, cy, cx, radius, weights, smooth_radius, ii, jj):
    """Scores at displacements within +-radius of per-cell centers, each
    displacement slice averaged over neighboring source cells (weighted)."""
    hk, wk = level.shape[2:]
    n = 2 * radius + 1
    h, w = cy.shape
    out = np.empty((n, n, h, w))
    if smooth_radius > 0:
        wsum = ndimage.uniform_filter(weights, 2 * smooth_radius + 1)
    for dy in range(-radius, radius + 1):
        ty = np.clip(cy + dy, 0, hk - 1)
        for dx in range(-radius, radius + 1):
            tx = np.clip(cx + dx, 0, wk - 1)
            s = level[ii, jj, ty, tx]
            if smooth_radius > 0:
                s = ndimage.uniform_filter(s * weights, 2 * smooth_radius + 1) \
                    / np.maximum(wsum, 1e-12)
            out[dy + radius, dx + radius] = s
    return out


def infer_flow(vol: CorrelationVolume, init: FlowField,
               iterations: int = DEFAULT_ITERATIONS,
               radius: int = DEFAULT_RADIUS,
               curvature_scale: float = 1.0,
               kappa_min: float = KAPPA_MIN,
               sigma2_min: float = SIGMA2_MIN,
               sigma2_max: float = SIGMA2_MAX,
               smooth_radius: int = DEFAULT_SMOOTH_RADIUS,
               drift_penalty: float = DEFAULT_DRIFT_PENALTY,
               alpha_radius: int = DEFAULT_ALPHA_RADIUS,
               weights: np.ndarray | None = None,
               cell: int = CELL) -> ProbabilisticFlowField:
    """Neighborhood-consensus flow refinement with variance and outlier maps.

    Starting from the cell-averaged init flow, each iteration gathers the
    finest-level correlation within ``radius`` cells of the current estimate,
    averages every displacement slice over neighboring source cells
    (``smooth_radius``, optionally weighted), normalizes the window by its
    peak and picks the displacement maximizing score minus
    ``drift_penalty`` times squared cell distance from the current estimate,
    so moves must earn their distance. The peak is refined by 1-D quadratic
    fits along u and v; windows with no positive evidence leave the estimate
    unchanged. After the last iteration sigma2 comes from the fit curvatures
    and alpha is the complement of the consensus match quality at the final
    estimate (cosine when the volume is L2-normalized, high-quantile
    normalized otherwise), 1 where there is no positive evidence at all.
    Cell-level results are upsampled bilinearly by the cell factor.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    h, w = vol.grid_shape
    hh, ww = h * cell, w * cell
    if init.shape != (hh, ww):
        raise ShapeMismatch(f"init flow must be {(hh, ww)}, got {init.shape}")
    level0 = vol.levels[0]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    wts = np.maximum(np.ones((h, w)) if weights is None else
                     np.asarray(weights, dtype=float), 1e-3)
    if wts.shape != (h, w):
        raise ShapeMismatch("weights must match the feature grid")

    init_u = np.where(init.defined, init.du, 0.0)
    init_v = np.where(init.defined, init.dv, 0.0)
    mu_u = _pool2(init_u, cell) / cell
    mu_v = _pool2(init_v, cell) / cell

    curv_u = np.zeros((h, w))
    curv_v = np.zeros((h, w))
    n = 2 * radius + 1
    dg = np.arange(-radius, radius + 1)
    dist2 = (dg[:, None] ** 2 + dg[None, :] ** 2).reshape(n * n, 1, 1)
    for _ in range(iterations):
        cy = np.clip(np.round(ii + mu_v), 0, h - 1).astype(int)
        cx = np.clip(np.round(jj + mu_u), 0, w - 1).astype(int)
        g = _gather_window(level0, cy, cx, radius, wts, smooth_radius, ii, jj)
        flat = g.reshape(n * n, h, w)
        peak = flat.max(axis=0)
        move_ok = peak > 0.0
        normed = flat / np.maximum(peak, 1e-12)
        best = (normed - drift_penalty * dist2).argmax(axis=0)
        by, bx = np.unravel_index(best, (n, n))
        bym = np.clip(by - 1, 0, n - 1)
        byp = np.clip(by + 1, 0, n - 1)
        bxm = np.clip(bx - 1, 0, n - 1)
        bxp = np.clip(bx + 1, 0, n - 1)
        s0 = g[by, bx, ii, jj]
        dyq, cv = _quadratic_peak_arrays(g[bym, bx, ii, jj], s0,
                                         g[byp, bx, ii, jj])
        dxq, cu = _quadratic_peak_arrays(g[by, bxm, ii, jj], s0,
                                         g[by, bxp, ii, jj])
        edge_y = (by == 0) | (by == n - 1)
        edge_x = (bx == 0) | (bx == n - 1)
        dyq = np.where(edge_y, 0.0, dyq)
        cv = np.where(edge_y, 0.0, cv)
        dxq = np.where(edge_x, 0.0, dxq)
        cu = np.where(edge_x, 0.0, cu)
        mu_u = np.where(move_ok, cx + (bx - radius) + dxq - jj, mu_u)
        mu_v = np.where(move_ok, cy + (by - radius) + dyq - ii, mu_v)
        curv_u = np.where(move_ok, cu, curv_u)
        curv_v = np.where(move_ok, cv, curv_v)

    kappa = 0.5 * (curv_u + curv_v)
    sigma2 = np.clip(curvature_scale / np.maximum(kappa, kappa_min),
                     sigma2_min, sigma2_max)

    # outlier probability: complement of the consensus quality at the final
    # estimate, over a wider window so the reference peak is meaningful
    cy = np.clip(np.round(ii + mu_v), 0, h - 1).astype(int)
    cx = np.clip(np.round(jj + mu_u), 0, w - 1).astype(int)
    ga = _gather_window(level0, cy, cx, alpha_radius, wts, smooth_radius,
                        ii, jj)
    s_here = ga[alpha_radius, alpha_radius]
    if vol.l2_normalized and vol.num_channels > 0:
        quality = s_here * np.sqrt(vol.num_channels)
    else:
        positives = s_here[s_here > 0]
        ref = np.quantile(positives, 0.95) if positives.size else 0.0
        quality = s_here / ref if ref > 0 else np.zeros_like(s_here)
    alpha = np.where(s_here <= 0.0, 1.0, np.clip(1.0 - quality, 0.0, 1.0))

    mu_full = np.stack([_upsample(mu_u * cell, cell, (hh, ww)),
                        _upsample(mu_v * cell, cell, (hh, ww))])
    sigma2_full = np.clip(_upsample(sigma2, cell, (hh, ww)),
                          sigma2_min, sigma2_max)
    alpha_full = np.clip(_upsample(alpha, cell, (hh, ww)), 0.0, 1.0)
    return ProbabilisticFlowField(mu_full, sigma2_full, alpha_full)


def _upsample(grid: np.ndarray, cell: int, shape) -> np.ndarray:
    hh, ww = shape
    ys = (np.arange(hh) + 0.5) / cell - 0.5
    xs = (np.arange(ww) + 0.5) / cell - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")
