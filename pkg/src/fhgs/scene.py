"""Persistent domain types: planar gaussian primitives, cameras, feature maps.

All heavy per-primitive state lives in `GaussianScene` as structure-of-arrays;
`Primitive` is the per-element view used at API boundaries and in tests.
Feature vectors are frozen: nothing in this package ever writes to them after
initialization, and `feature_checksum` lets callers assert that.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    """A domain object was built from non-finite or out-of-range values."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else out[()]


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def decode_frame(q):
    """Decode a quaternion (w, x, y, z) into the tangent frame (t_u, t_v, t_w).

    The quaternion is renormalized internally. The returned triple is
    right-handed orthonormal and equals the columns of the rotation matrix;
    t_w = t_u x t_v is the splat normal.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(q)):
        raise InvalidParameterError(f"quaternion must be finite, got {q!r}")
    n = float(np.sqrt(np.dot(q, q)))
    if n < 1e-8:
        raise InvalidParameterError("quaternion has near-zero norm")
    R = decode_frames(q[None, :] / n)[0]
    return R[:, 0], R[:, 1], R[:, 2]


def decode_frames(quats: np.ndarray) -> np.ndarray:
    """Batch quaternion decode: (N, 4) -> (N, 3, 3) rotation matrices.

    Quaternions are renormalized; columns are (t_u, t_v, t_w).
    """
    q = np.asarray(quats)
    norm = np.sqrt(np.sum(q * q, axis=1, keepdims=True))
    w, x, y, z = (q / norm).T
    R = np.empty(q.shape[:1] + (3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def frame_jacobians(q: np.ndarray):
    """Partial derivatives of the frame columns w.r.t. raw quaternion entries.

    Returns (dt_u, dt_v, dt_w), each (N, 3, 4): [:, i, j] = d t[i] / d q[j],
    evaluated at the (assumed unit) quaternion. Callers project onto the unit
    sphere tangent space separately.
    """
    q = np.asarray(q)
    w, x, y, z = q.T
    zero = np.zeros_like(w)
    dt_u = np.stack(
        [
            np.stack([zero, zero, -4 * y, -4 * z], axis=-1),
            np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1),
            np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1),
        ],
        axis=1,
    )
    dt_v = np.stack(
        [
            np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1),
            np.stack([zero, -4 * x, zero, -4 * z], axis=-1),
            np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1),
        ],
        axis=1,
    )
    dt_w = np.stack(
        [
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1),
            np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1),
            np.stack([zero, -4 * x, -4 * y, zero], axis=-1),
        ],
        axis=1,
    )
    return dt_u, dt_v, dt_w


@dataclass
class Primitive:
    """One planar gaussian: position, tangent frame, scales, opacity, color, frozen feature."""

    position: np.ndarray      # (3,) world units
    rotation: np.ndarray      # (4,) unit quaternion (w, x, y, z)
    log_scales: np.ndarray    # (2,) log of tangent-plane extents (s_u, s_v)
    opacity_logit: float
    color: np.ndarray         # (3,) linear RGB in [0, 1]
    feature: np.ndarray       # (d,) unit L2 norm, frozen

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scales, dtype=np.float64))

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.float64(self.opacity_logit)))

    def frame(self):
        return decode_frame(self.rotation)


@dataclass
class GaussianScene:
    """Structure-of-arrays primitive set. float32 at rest; cast up for checks."""

    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4)
    log_scales: np.ndarray     # (N, 2)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3)
    features: np.ndarray       # (N, d) frozen

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def primitive(self, i: int) -> Primitive:
        return Primitive(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scales=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
            feature=self.features[i].copy(),
        )

    @classmethod
    def from_primitives(cls, prims, dtype=np.float32) -> "GaussianScene":
        prims = list(prims)
        d = len(prims[0].feature) if prims else 0
        return cls(
            positions=np.array([p.position for p in prims], dtype=dtype).reshape(-1, 3),
            rotations=np.array([p.rotation for p in prims], dtype=dtype).reshape(-1, 4),
            log_scales=np.array([p.log_scales for p in prims], dtype=dtype).reshape(-1, 2),
            opacity_logits=np.array([p.opacity_logit for p in prims], dtype=dtype).reshape(-1),
            colors=np.array([p.color for p in prims], dtype=dtype).reshape(-1, 3),
            features=np.array([p.feature for p in prims], dtype=dtype).reshape(-1, d),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.colors.copy(), self.features.copy(),
        )

    def astype(self, dtype) -> "GaussianScene":
        return GaussianScene(
            self.positions.astype(dtype), self.rotations.astype(dtype),
            self.log_scales.astype(dtype), self.opacity_logits.astype(dtype),
            self.colors.astype(dtype), self.features.astype(dtype),
        )

    def feature_checksum(self) -> str:
        """SHA-256 over the raw feature bytes; training must never change it."""
        buf = np.ascontiguousarray(self.features)
        return hashlib.sha256(buf.tobytes()).hexdigest()


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a 4x4 world-to-camera transform."""

    id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) row-major

    def rotation(self) -> np.ndarray:
        return np.asarray(self.world_to_camera, dtype=np.float64)[:3, :3]

    def translation(self) -> np.ndarray:
        return np.asarray(self.world_to_camera, dtype=np.float64)[:3, 3]

    def center(self) -> np.ndarray:
        R, t = self.rotation(), self.translation()
        return -R.T @ t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation().T + self.translation()

    def project(self, points: np.ndarray):
        """World points -> (continuous image xy, camera depth)."""
        cam = self.to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * cam[:, 0] / z + self.cx
            y = self.fy * cam[:, 1] / z + self.cy
        return np.stack([x, y], axis=1), z

    def violations(self) -> list:
        out = []
        W = np.asarray(self.world_to_camera, dtype=np.float64)
        if W.shape != (4, 4) or not np.all(np.isfinite(W)):
            return [f"camera {self.id}: malformed world_to_camera"]
        R = W[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            out.append(f"camera {self.id}: non-orthonormal rotation")
        elif np.linalg.det(R) < 0:
            out.append(f"camera {self.id}: improper rotation (det -1)")
        if not (self.fx > 0 and self.fy > 0):
            out.append(f"camera {self.id}: non-positive focal length")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            out.append(f"camera {self.id}: principal point outside image")
        return out


@dataclass
class FeatureMap:
    """Per-view H x W x d grid of unit-norm target features."""

    view_id: int
    data: np.ndarray  # (H, W, d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def renormalize(self, tol: float = 1e-5) -> int:
        """L2-normalize every pixel in place; returns how many were off by > tol."""
        norms = np.linalg.norm(self.data, axis=2, keepdims=True)
        off = int(np.count_nonzero(np.abs(norms[..., 0] - 1.0) > tol))
        safe = np.where(norms > 0, norms, 1.0)
        self.data /= safe
        return off


# point_id -> [(view_id, row, col), ...]
CorrespondenceIndex = dict


@dataclass
class SceneInit:
    """Everything needed to initialize training: sparse points, views, targets."""

    point_ids: np.ndarray      # (P,)
    point_positions: np.ndarray  # (P, 3)
    point_colors: np.ndarray   # (P, 3)
    cameras: list              # [Camera]
    images: dict = field(default_factory=dict)        # view_id -> (H, W, 3) float in [0,1]
    feature_maps: dict = field(default_factory=dict)  # view_id -> FeatureMap


def validate_scene(init: SceneInit) -> list:
    """Check every SceneInit invariant; returns a list of violation strings.

    Never raises and never mutates the input; an empty list means the scene
    is well formed.
    """
    out = []
    if not np.all(np.isfinite(init.point_positions)):
        out.append("non-finite point position")
    if len(set(int(i) for i in init.point_ids)) != len(init.point_ids):
        out.append("duplicate point ids")
    for cam in init.cameras:
        out.extend(cam.violations())
    cam_ids = {cam.id for cam in init.cameras}
    dims = set()
    for vid, fmap in init.feature_maps.items():
        if vid not in cam_ids:
            out.append(f"feature map for unknown view {vid}")
        dims.add(fmap.channels)
        norms = np.linalg.norm(fmap.data, axis=2)
        bad = np.count_nonzero(np.abs(norms - 1.0) > 1e-5)
        if bad:
            out.append(f"non-unit feature: view {vid} has {bad} off-norm pixels")
    if len(dims) > 1:
        out.append(f"inconsistent feature channel counts: {sorted(dims)}")
    for vid, img in init.images.items():
        if vid not in cam_ids:
            out.append(f"image for unknown view {vid}")
        if not np.all(np.isfinite(img)):
            out.append(f"non-finite image data: view {vid}")
    return out


def validate_index(index: CorrespondenceIndex, init: SceneInit) -> list:
    """Check the point->pixel correspondence index against its scene."""
    out = []
    cams = {cam.id: cam for cam in init.cameras}
    for pid, entries in index.items():
        for vid, row, col in entries:
            cam = cams.get(vid)
            if cam is None:
                out.append(f"point {pid}: unknown view {vid}")
            elif not (0 <= row < cam.height and 0 <= col < cam.width):
                out.append(f"point {pid}: pixel ({row},{col}) outside view {vid}")
    return out
