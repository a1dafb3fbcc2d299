"""Depth-map generation: point cloud projection, completion, normalization.

Both sensors end up as dense depth maps on the camera pixel grid, which is
what makes the downstream matching an intra-modality problem. LiDAR clouds
are projected with a z-buffer into a sparse map, then completed with a
classical morphological pipeline (invert / dilate / close / fill / median on
inverted depths, so nearer surfaces win under dilation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyInput, EmptyProjection
from .geometry import RigidTransform

DEFAULT_Z_MIN = 0.1       # minimum camera-frame depth for projection (m)
DEFAULT_MAX_CLIP = 80.0   # normalization clip (m), KITTI depth convention
COMPLETION_MAX_DEPTH = 100.0


@dataclass(frozen=True)
class PointCloud:
    """N points in a sensor frame, meters. Optional per-point intensity [0,1]."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise ValueError(f"points must be (N>=1, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.intensity is not None:
            i = np.asarray(self.intensity, dtype=float).reshape(-1)
            if i.shape[0] != p.shape[0]:
                raise ValueError("intensity length must match point count")
            object.__setattr__(self, "intensity", i)

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.points), self.intensity)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus image size, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


SPARSE = "sparse"
DENSE = "dense"


@dataclass(frozen=True)
class DepthMap:
    """H x W depth grid in meters with a validity mask.

    kind is "sparse" or "dense"; a dense map has every pixel valid. Valid
    pixels hold positive finite depths.
    """

    values: np.ndarray
    valid: np.ndarray
    kind: str = SPARSE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2 or v.shape != m.shape:
            raise ValueError("values and valid must be matching 2-D arrays")
        if self.kind not in (SPARSE, DENSE):
            raise ValueError(f"kind must be '{SPARSE}' or '{DENSE}'")
        if self.kind == DENSE and not m.all():
            raise ValueError("dense map must have every pixel valid")
        vv = v[m]
        if vv.size and not (np.all(np.isfinite(vv)) and np.all(vv > 0)):
            raise ValueError("valid pixels must hold positive finite depths")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class NormalizedDepthMap:
    """Depth map affinely mapped into [-1, 1], with the scale that was used."""

    values: np.ndarray
    min_depth: float
    max_depth: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.min() < -1.0 - 1e-12 or v.max() > 1.0 + 1e-12:
            raise ValueError("normalized values must lie in [-1, 1]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def project_points(cloud: PointCloud, k: CameraIntrinsics, t: RigidTransform,
                   z_min: float = DEFAULT_Z_MIN):
    """Project a cloud into a sparse depth map with nearest-depth z-buffering.

    Pixel coordinates are rounded to the nearest integer. Points behind the
    camera (depth <= z_min) or outside the image are dropped. Ties at equal
    depth go to the lowest point index, so the result is deterministic.

    Returns (sparse DepthMap, index map) where index[v, u] is the winning
    cloud point index, -1 where no point landed.
    """
    cam = t.apply(cloud.points)
    z = cam[:, 2]
    front = z > z_min
    if not front.any():
        raise EmptyProjection("no point in front of the camera")
    idx = np.nonzero(front)[0]
    cam = cam[front]
    z = z[front]
    u = np.rint(k.fx * cam[:, 0] / z + k.cx).astype(int)
    v = np.rint(k.fy * cam[:, 1] / z + k.cy).astype(int)
    inb = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    if not inb.any():
        raise EmptyProjection("no point lands inside the image")
    u, v, z, idx = u[inb], v[inb], z[inb], idx[inb]

    # stable winner per pixel: sort by (pixel, depth, original index)
    pix = v * k.width + u
    order = np.lexsort((idx, z, pix))
    pix, z, idx = pix[order], z[order], idx[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]

    values = np.zeros((k.height, k.width))
    valid = np.zeros((k.height, k.width), dtype=bool)
    index = np.full((k.height, k.width), -1, dtype=int)
    flat_v = pix[first] // k.width
    flat_u = pix[first] % k.width
    values[flat_v, flat_u] = z[first]
    valid[flat_v, flat_u] = True
    index[flat_v, flat_u] = idx[first]
    return DepthMap(values, valid, SPARSE), index


def project_subpixel(points, k: CameraIntrinsics, t: RigidTransform,
                     z_min: float = DEFAULT_Z_MIN):
    """Continuous pixel coordinates of points under t.

    Returns (uv (N, 2), depth (N,), in_front (N,)). Coordinates for points at
    or behind z_min are NaN.
    """
    cam = t.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = cam[:, 2]
    in_front = z > z_min
    uv = np.full((len(z), 2), np.nan)
    zf = z[in_front]
    uv[in_front, 0] = k.fx * cam[in_front, 0] / zf + k.cx
    uv[in_front, 1] = k.fy * cam[in_front, 1] / zf + k.cy
    return uv, z, in_front


def _diamond_kernel(size: int) -> np.ndarray:
    r = size // 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    return (np.abs(x) + np.abs(y)) <= r


def complete_depth(sparse: DepthMap,
                   max_depth: float = COMPLETION_MAX_DEPTH,
                   dilate_kernel: int = 5,
                   close_kernel: int = 5,
                   fill_kernel: int = 7,
                   median_kernel: int = 5) -> DepthMap:
    """Fill a sparse depth map to a dense one.

    Fixed pipeline on inverted depths (max_depth - d, invalid pixels 0):
    dilation with a diamond kernel, morphological close with a full kernel,
    hole fill by iterated dilation until no empty pixel remains, then a
    median filter. Original valid pixels are restored before the median, so
    input depths survive up to the median filter's perturbation.

    Depths must be below max_depth; anything larger is clipped just under it.
    """
    if not sparse.valid.any():
        raise EmptyInput("sparse map has no valid pixel")
    inv = np.zeros(sparse.shape)
    src = np.minimum(sparse.values[sparse.valid], max_depth - 0.5)
    inv[sparse.valid] = max_depth - src

    out = ndimage.grey_dilation(inv, footprint=_diamond_kernel(dilate_kernel))
    out = ndimage.grey_closing(out, footprint=np.ones((close_kernel,) * 2, bool))
    # iterate 7x7 dilation into remaining holes until everything is covered
    full = np.ones((fill_kernel,) * 2, bool)
    empty = out <= 0.0
    while empty.any():
        grown = ndimage.grey_dilation(out, footprint=full)
        if not (grown[empty] > 0).any():
            raise EmptyInput("hole fill cannot reach isolated region")
        out[empty] = grown[empty]
        empty = out <= 0.0
    out[sparse.valid] = inv[sparse.valid]
    out = ndimage.median_filter(out, size=median_kernel)
    return DepthMap(max_depth - out, np.ones(sparse.shape, dtype=bool), DENSE)


def normalize_depth(dense: DepthMap,
                    max_clip: float = DEFAULT_MAX_CLIP) -> NormalizedDepthMap:
    """Map a dense depth map into [-1, 1] over the fixed range [0, max_clip].

    value = 2 * min(d, max_clip) / max_clip - 1, so 0 m maps to -1 and
    anything at or beyond the clip maps to +1. The fixed range keeps both
    sensors' maps on one scale.
    """
    if dense.kind != DENSE:
        raise ValueError("normalize_depth expects a dense map")
    clipped = np.clip(dense.values, 0.0, max_clip)
    return NormalizedDepthMap(2.0 * clipped / max_clip - 1.0, 0.0, max_clip)
