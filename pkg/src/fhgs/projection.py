"""Geometry kernel: splat transforms, pixel-ray/splat intersection, screen bounds.

The intersection is solved as an explicit ray-plane hit followed by a change
of basis into the scaled tangent frame. This is algebraically the same as
inverting the homogeneous splat-to-screen map but stays stable for thin
splats. All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, GaussianScene, Primitive, decode_frame, decode_frames, sigmoid

NEAR_PLANE = 1e-4
PARALLEL_EPS = 1e-9
SCALE_EPS = 1e-12
DEFAULT_CUTOFF_SIGMA = 3.0


@dataclass
class SplatTransform:
    """Homogeneous map from local tangent coordinates (u, v, 1, 1) to world space."""

    matrix: np.ndarray  # (4, 4)

    def apply(self, u: float, v: float) -> np.ndarray:
        h = self.matrix @ np.array([u, v, 1.0, 1.0])
        return h[:3] / h[3]


@dataclass
class Intersection:
    u: float
    v: float
    z: float
    G: float


def build_transform(prim: Primitive) -> SplatTransform:
    """Translation * rotation * scale factorization of the tangent-plane embedding."""
    t_u, t_v, _ = prim.frame()
    s_u, s_v = prim.scales
    H = np.zeros((4, 4), dtype=np.float64)
    H[:3, 0] = s_u * t_u
    H[:3, 1] = s_v * t_v
    H[:3, 3] = np.asarray(prim.position, dtype=np.float64)
    H[3, 3] = 1.0
    return SplatTransform(H)


def eval_gaussian(u, v):
    """Unnormalized planar gaussian density exp(-(u^2 + v^2) / 2)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.exp(-0.5 * (u * u + v * v))


def pixel_ray(camera: Camera, row: int, col: int) -> np.ndarray:
    """Camera-frame direction through the pixel center, z-normalized to 1."""
    return np.array(
        [(col + 0.5 - camera.cx) / camera.fx, (row + 0.5 - camera.cy) / camera.fy, 1.0]
    )


def intersect(camera: Camera, pixel, prim: Primitive, *, near: float = NEAR_PLANE,
              parallel_eps: float = PARALLEL_EPS, scale_eps: float = SCALE_EPS):
    """Exact pixel-ray / splat-plane intersection.

    Returns an Intersection with local coordinates (u, v), camera depth z and
    density G, or None when the ray is parallel to the plane, the hit is
    behind the near plane, or the splat is degenerate.
    """
    row, col = pixel
    d = pixel_ray(camera, row, col)
    t_u, t_v, t_w = prim.frame()
    s_u, s_v = prim.scales
    if s_u < scale_eps or s_v < scale_eps:
        return None
    R, t = camera.rotation(), camera.translation()
    m = R @ np.asarray(prim.position, dtype=np.float64) + t
    e_u, e_v, n = R @ t_u, R @ t_v, R @ t_w
    ndotd = float(n @ d)
    if abs(ndotd) / float(np.linalg.norm(d)) < parallel_eps:
        return None
    z = float(n @ m) / ndotd
    if z <= near:
        return None
    delta = z * d - m
    u = float(delta @ e_u) / s_u
    v = float(delta @ e_v) / s_v
    return Intersection(u=u, v=v, z=z, G=float(eval_gaussian(u, v)))


def screen_bounds(prim: Primitive, camera: Camera,
                  cutoff_sigma: float = DEFAULT_CUTOFF_SIGMA, *, near: float = NEAR_PLANE):
    """Conservative pixel AABB containing every pixel with u^2 + v^2 <= cutoff^2.

    Returns (row0, row1, col0, col1) inclusive, or None when the splat center
    and all four corners of its cutoff patch sit behind the camera. When the
    patch straddles the camera plane the full image is returned.
    """
    scene = GaussianScene.from_primitives([prim], dtype=np.float64)
    boxes, onscreen = screen_bounds_many(scene, camera, cutoff_sigma, near=near)
    if not onscreen[0]:
        return None
    return tuple(int(x) for x in boxes[0])


def screen_bounds_many(scene: GaussianScene, camera: Camera,
                       cutoff_sigma: float = DEFAULT_CUTOFF_SIGMA, *, near: float = NEAR_PLANE):
    """Vectorized screen_bounds: (N, 4) int boxes plus an on-screen mask."""
    n = len(scene)
    R, t = camera.rotation(), camera.translation()
    frames = decode_frames(scene.rotations.astype(np.float64))
    pos = scene.positions.astype(np.float64)
    s = np.exp(scene.log_scales.astype(np.float64))
    centers = pos @ R.T + t
    ext_u = (cutoff_sigma * s[:, 0])[:, None] * (frames[:, :, 0] @ R.T)
    ext_v = (cutoff_sigma * s[:, 1])[:, None] * (frames[:, :, 1] @ R.T)
    # Corners of the square patch |u|,|v| <= cutoff that contains the cutoff disk.
    corners = np.stack(
        [centers + su * ext_u + sv * ext_v for su in (-1.0, 1.0) for sv in (-1.0, 1.0)],
        axis=1,
    )  # (N, 4, 3)
    corner_front = corners[:, :, 2] > near
    center_front = centers[:, 2] > near
    onscreen = center_front | np.any(corner_front, axis=1)

    boxes = np.zeros((n, 4), dtype=np.int64)
    all_front = np.all(corner_front, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * corners[:, :, 0] / corners[:, :, 2] + camera.cx
        py = camera.fy * corners[:, :, 1] / corners[:, :, 2] + camera.cy
    # Pixel (r, c) is a candidate when its center (c+0.5, r+0.5) can fall inside
    # the projected patch; pad by one pixel against rounding.
    c0 = np.floor(np.min(px, axis=1) - 0.5).astype(np.int64) - 1
    c1 = np.ceil(np.max(px, axis=1) - 0.5).astype(np.int64) + 1
    r0 = np.floor(np.min(py, axis=1) - 0.5).astype(np.int64) - 1
    r1 = np.ceil(np.max(py, axis=1) - 0.5).astype(np.int64) + 1
    boxes[:, 0] = np.clip(r0, 0, camera.height - 1)
    boxes[:, 1] = np.clip(r1, 0, camera.height - 1)
    boxes[:, 2] = np.clip(c0, 0, camera.width - 1)
    boxes[:, 3] = np.clip(c1, 0, camera.width - 1)
    # Patch partially behind the camera: projection is unbounded, keep everything.
    straddle = onscreen & ~all_front
    boxes[straddle] = [0, camera.height - 1, 0, camera.width - 1]
    # Entirely in front but projecting outside the image -> empty box.
    empty = all_front & ((r0 > camera.height - 1) | (r1 < 0)
                         | (c0 > camera.width - 1) | (c1 < 0))
    onscreen = onscreen & ~empty
    return boxes, onscreen


@dataclass
class CameraFrameGeometry:
    """Per-primitive quantities in one camera's frame, shared by render passes."""

    centers: np.ndarray    # (N, 3) camera-frame splat centers
    e_u: np.ndarray        # (N, 3) camera-frame tangent axes (unit)
    e_v: np.ndarray
    normals: np.ndarray    # (N, 3) camera-frame plane normals (unit)
    scales: np.ndarray     # (N, 2)
    opacities: np.ndarray  # (N,)
    depths: np.ndarray     # (N,) camera z of centers
    tw_world: np.ndarray   # (N, 3) world-frame normals, for the normal channel
    frames_world: np.ndarray  # (N, 3, 3) world tangent frames
    quats_unit: np.ndarray    # (N, 4) renormalized quaternions


def camera_frame_geometry(scene: GaussianScene, camera: Camera, dtype=np.float64) -> CameraFrameGeometry:
    R = camera.rotation().astype(dtype)
    t = camera.translation().astype(dtype)
    q = scene.rotations.astype(dtype)
    q = q / np.sqrt(np.sum(q * q, axis=1, keepdims=True))
    frames = decode_frames(q)
    centers = scene.positions.astype(dtype) @ R.T + t
    return CameraFrameGeometry(
        centers=centers,
        e_u=frames[:, :, 0] @ R.T,
        e_v=frames[:, :, 1] @ R.T,
        normals=frames[:, :, 2] @ R.T,
        scales=np.exp(scene.log_scales.astype(dtype)),
        opacities=sigmoid(scene.opacity_logits.astype(dtype)),
        depths=centers[:, 2].copy(),
        tw_world=frames[:, :, 2].copy(),
        frames_world=frames,
        quats_unit=q,
    )


def dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise 3-vector dot via plain ufuncs; bitwise layout-independent."""
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2]


def intersect_pairs(geom: CameraFrameGeometry, rays: np.ndarray, ray_norms: np.ndarray,
                    pix: np.ndarray, prim: np.ndarray, *, near: float = NEAR_PLANE,
                    parallel_eps: float = PARALLEL_EPS, scale_eps: float = SCALE_EPS,
                    cutoff_sq: float = DEFAULT_CUTOFF_SIGMA ** 2):
    """Vectorized intersection for (pixel, primitive) candidate pairs.

    rays is (H*W, 3) with z-normalized directions, ray_norms its row norms.
    Returns (u, v, z, ndotd, valid); entries where valid is False are
    misses (parallel, behind near plane, degenerate, or outside the cutoff).
    """
    d = rays[pix]
    n = geom.normals[prim]
    m = geom.centers[prim]
    ndotd = dot3(n, d)
    ndotm = dot3(n, m)
    parallel = np.abs(ndotd) < parallel_eps * ray_norms[pix]
    safe = np.where(parallel, 1.0, ndotd)
    z = ndotm / safe
    delta = z[:, None] * d - m
    s = geom.scales[prim]
    u = dot3(delta, geom.e_u[prim]) / s[:, 0]
    v = dot3(delta, geom.e_v[prim]) / s[:, 1]
    valid = (
        ~parallel
        & (z > near)
        & (s[:, 0] >= scale_eps)
        & (s[:, 1] >= scale_eps)
        & (u * u + v * v <= cutoff_sq)
    )
    return u, v, z, ndotd, valid


def camera_rays(camera: Camera, dtype=np.float64):
    """All pixel-center rays, flattened row-major: (H*W, 3) plus norms."""
    cols = (np.arange(camera.width, dtype=dtype) + 0.5 - camera.cx) / camera.fx
    rows = (np.arange(camera.height, dtype=dtype) + 0.5 - camera.cy) / camera.fy
    dx, dy = np.meshgrid(cols, rows)
    rays = np.stack([dx.ravel(), dy.ravel(), np.ones(camera.width * camera.height, dtype=dtype)], axis=1)
    return rays, np.sqrt(np.sum(rays * rays, axis=1))
