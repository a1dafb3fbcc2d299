"""Depth-flow fields: ground truth from a known pose pair, masks and warping.

A flow field lives on the pixel grid of the LiDAR projection (the map
rendered under the initial extrinsics) and points toward where the same
content sits in the camera depth map: target = pixel + flow(pixel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depthmaps import DENSE, CameraIntrinsics, DepthMap, PointCloud, \
    project_points, project_subpixel
from .errors import ShapeMismatch
from .geometry import RigidTransform


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (du, dv) in pixels with a definedness mask."""

    du: np.ndarray
    dv: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        du = np.asarray(self.du, dtype=float)
        dv = np.asarray(self.dv, dtype=float)
        d = np.asarray(self.defined, dtype=bool)
        if not (du.shape == dv.shape == d.shape) or du.ndim != 2:
            raise ShapeMismatch("du, dv, defined must be matching 2-D grids")
        if d.any() and not np.all(np.isfinite(du[d]) & np.isfinite(dv[d])):
            raise ValueError("defined pixels must hold finite flow")
        object.__setattr__(self, "du", du)
        object.__setattr__(self, "dv", dv)
        object.__setattr__(self, "defined", d)

    @property
    def shape(self):
        return self.du.shape

    @staticmethod
    def zero(shape) -> "FlowField":
        z = np.zeros(shape)
        return FlowField(z, z.copy(), np.ones(shape, dtype=bool))


@dataclass(frozen=True)
class ValidMask:
    """Boolean grid selecting pixels that carry flow supervision."""

    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=bool))

    @property
    def shape(self):
        return self.v.shape


def ground_truth_flow(cloud: PointCloud, k: CameraIntrinsics,
                      t_init: RigidTransform, t_gt: RigidTransform):
    """Exact flow between the projections of a cloud under two poses.

    The field lives on the rounded z-buffered projection under t_init; its
    value is the difference of the two sub-pixel projections of the winning
    point, so equal poses give identically zero flow and a rigid shift gives
    a uniform field with no rounding noise.

    Returns (FlowField, ValidMask); the mask is true where the source pixel
    won the z-buffer and the target projection is in front of the camera and
    inside the image.
    """
    sparse, index = project_points(cloud, k, t_init)
    uv_init, _, _ = project_subpixel(cloud.points, k, t_init)
    uv_gt, _, in_front = project_subpixel(cloud.points, k, t_gt)

    h, w = sparse.shape
    du = np.zeros((h, w))
    dv = np.zeros((h, w))
    defined = np.zeros((h, w), dtype=bool)
    mask = np.zeros((h, w), dtype=bool)

    vs, us = np.nonzero(sparse.valid)
    pt = index[vs, us]
    ok = in_front[pt]
    vs, us, pt = vs[ok], us[ok], pt[ok]
    du[vs, us] = uv_gt[pt, 0] - uv_init[pt, 0]
    dv[vs, us] = uv_gt[pt, 1] - uv_init[pt, 1]
    defined[vs, us] = True
    inb = ((uv_gt[pt, 0] >= 0) & (uv_gt[pt, 0] <= w - 1)
           & (uv_gt[pt, 1] >= 0) & (uv_gt[pt, 1] <= h - 1))
    mask[vs[inb], us[inb]] = True
    return FlowField(du, dv, defined), ValidMask(mask)


def valid_mask_from_sparse(sparse: DepthMap, flow: FlowField,
                           strict_zero_excluded: bool = False) -> ValidMask:
    """Supervision mask: sparse depth present and flow defined.

    With strict_zero_excluded the literal textbook rule is applied instead:
    pixels whose ground-truth flow is exactly zero are dropped too. That rule
    discards perfectly aligned correspondences, so it is off by default and
    exists for ablation.
    """
    if sparse.shape != flow.shape:
        raise ShapeMismatch("sparse map and flow shapes differ")
    v = sparse.valid & flow.defined
    if strict_zero_excluded:
        v &= (flow.du != 0.0) | (flow.dv != 0.0)
    return ValidMask(v)


def warp(depth_map: DepthMap, flow: FlowField) -> DepthMap:
    """Move depth content along the flow.

    Sparse maps are forward-splatted: each valid pixel lands at the nearest
    integer of pixel + flow, nearest depth winning on collision. Dense maps
    are resampled bilinearly at pixel - flow, which realizes the same shift
    for locally constant flow.
    """
    if depth_map.shape != flow.shape:
        raise ShapeMismatch("map and flow shapes differ")
    h, w = depth_map.shape
    if depth_map.kind == DENSE:
        from scipy.ndimage import map_coordinates
        vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([vv - flow.dv, uu - flow.du])
        values = map_coordinates(depth_map.values, coords, order=1,
                                 mode="nearest")
        return DepthMap(values, np.ones((h, w), bool), DENSE)

    vs, us = np.nonzero(depth_map.valid & flow.defined)
    tu = np.rint(us + flow.du[vs, us]).astype(int)
    tv = np.rint(vs + flow.dv[vs, us]).astype(int)
    inb = (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
    tu, tv = tu[inb], tv[inb]
    depth = depth_map.values[vs[inb], us[inb]]
    src = vs[inb] * w + us[inb]

    values = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    pix = tv * w + tu
    order = np.lexsort((src, depth, pix))
    pix, depth = pix[order], depth[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    values[pix[first] // w, pix[first] % w] = depth[first]
    valid[pix[first] // w, pix[first] % w] = True
    return DepthMap(values, valid, depth_map.kind)
