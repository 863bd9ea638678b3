"""Dataset I/O, point-feature fusion, the synthetic scene generator, checkpoints.

On-disk layout of a dataset directory:

    cameras.json            pinhole cameras, world-to-camera row-major
    images/<view>.ppm       8-bit binary P6 ground-truth images
    features/<view>.fmap    float32 target feature maps (format below)
    points.txt              sparse points: `id x y z r g b` per line

.fmap: magic "FMAP", u32 version=1, u32 height, u32 width, u32 channels,
then H*W*C little-endian float32, row-major with channels last. The file
size must equal 20 + 4*H*W*C bytes.

Checkpoint: magic "FHGS", u32 version=1, u32 count, u32 feature dim, then
per-primitive float32 records (position 3, rotation 4, log scales 2, opacity
logit 1, color 3, feature d), all little-endian.
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .scene import (Camera, CorrespondenceIndex, FeatureMap, GaussianScene,
                    SceneInit, inverse_sigmoid, validate_scene)

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
CHECKPOINT_MAGIC = b"FHGS"
CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    """A dataset file is missing, truncated, or inconsistent."""


# ---------------------------------------------------------------------------
# Elementary formats
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """8-bit binary P6 from a float image in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """P6 -> float image in [0, 1]; raises DatasetError on malformed input."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary P6 file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise DatasetError(f"{path}: expected maxval 255, got {maxval}")
    expected = w * h * 3
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DatasetError(f"{path}: expected {expected} pixel bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def write_fmap(path, data: np.ndarray):
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<IIII", FMAP_VERSION, h, w, c))
        fh.write(arr.tobytes())


def read_fmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FMAP_MAGIC:
        raise DatasetError(f"{path}: missing FMAP magic")
    version, h, w, c = struct.unpack("<IIII", raw[4:20])
    if version != FMAP_VERSION:
        raise DatasetError(f"{path}: unsupported fmap version {version}")
    expected = 20 + 4 * h * w * c
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw[20:], dtype="<f4").reshape(h, w, c).copy()


_CAMERA_KEYS = {"id", "width", "height", "fx", "fy", "cx", "cy", "world_to_camera"}


def write_cameras(path, cameras):
    rows = []
    for cam in cameras:
        rows.append({
            "id": int(cam.id), "width": int(cam.width), "height": int(cam.height),
            "fx": float(cam.fx), "fy": float(cam.fy),
            "cx": float(cam.cx), "cy": float(cam.cy),
            "world_to_camera": [float(x) for x in np.asarray(cam.world_to_camera).reshape(16)],
        })
    Path(path).write_text(json.dumps(rows, indent=1))


def read_cameras(path):
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from e
    cameras = []
    for row in rows:
        unknown = set(row) - _CAMERA_KEYS
        if unknown:
            warnings.warn(f"{path}: ignoring unknown camera keys {sorted(unknown)}")
        missing = _CAMERA_KEYS - set(row)
        if missing:
            raise DatasetError(f"{path}: camera missing keys {sorted(missing)}")
        W = np.array(row["world_to_camera"], dtype=np.float64)
        if W.size != 16:
            raise DatasetError(f"{path}: world_to_camera must hold 16 numbers")
        cameras.append(Camera(
            id=int(row["id"]), width=int(row["width"]), height=int(row["height"]),
            fx=float(row["fx"]), fy=float(row["fy"]),
            cx=float(row["cx"]), cy=float(row["cy"]),
            world_to_camera=W.reshape(4, 4),
        ))
    return cameras


def write_points(path, ids, positions, colors):
    with open(path, "w") as fh:
        for pid, pos, col in zip(ids, positions, colors):
            fh.write(f"{int(pid)} {pos[0]:.17g} {pos[1]:.17g} {pos[2]:.17g} "
                     f"{col[0]:.17g} {col[1]:.17g} {col[2]:.17g}\n")


def read_points(path):
    ids, positions, colors = [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DatasetError(f"{path}:{ln}: expected `id x y z r g b`, got {len(parts)} fields")
        ids.append(int(parts[0]))
        positions.append([float(x) for x in parts[1:4]])
        colors.append([float(x) for x in parts[4:7]])
    return (np.array(ids, dtype=np.int64),
            np.array(positions, dtype=np.float64).reshape(-1, 3),
            np.array(colors, dtype=np.float64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

def load_dataset(path) -> SceneInit:
    """Parse and validate a dataset directory into a SceneInit.

    Feature maps are renormalized to unit length; a warning is emitted with
    the off-norm pixel count when any needed it.
    """
    root = Path(path)
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"missing {cam_path}")
    cameras = read_cameras(cam_path)
    pts_path = root / "points.txt"
    if not pts_path.exists():
        raise DatasetError(f"missing {pts_path}")
    ids, positions, colors = read_points(pts_path)

    images, fmaps = {}, {}
    renorm_total = 0
    for cam in cameras:
        img_path = root / "images" / f"{cam.id}.ppm"
        f_path = root / "features" / f"{cam.id}.fmap"
        if not img_path.exists():
            raise DatasetError(f"missing view component: {img_path}")
        if not f_path.exists():
            raise DatasetError(f"missing view component: {f_path}")
        img = read_ppm(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{img_path}: image is {img.shape[:2]}, camera says "
                               f"({cam.height}, {cam.width})")
        data = read_fmap(f_path)
        if data.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{f_path}: feature map is {data.shape[:2]}, camera says "
                               f"({cam.height}, {cam.width})")
        fmap = FeatureMap(view_id=cam.id, data=data.astype(np.float64))
        renorm_total += fmap.renormalize()
        images[cam.id] = img
        fmaps[cam.id] = fmap
    dims = {f.channels for f in fmaps.values()}
    if len(dims) > 1:
        raise DatasetError(f"feature channel mismatch across views: {sorted(dims)}")
    if renorm_total:
        warnings.warn(f"renormalized {renorm_total} off-norm feature pixels")
    init = SceneInit(point_ids=ids, point_positions=positions, point_colors=colors,
                     cameras=cameras, images=images, feature_maps=fmaps)
    problems = validate_scene(init)
    if problems:
        raise DatasetError("invalid dataset: " + "; ".join(problems))
    return init


# ---------------------------------------------------------------------------
# Correspondence index and feature fusion
# ---------------------------------------------------------------------------

def build_index(init: SceneInit) -> CorrespondenceIndex:
    """Map each point to every view where its projection lands in bounds.

    No occlusion test: sparse reconstruction points are assumed visible where
    they project with positive depth, matching track semantics.
    """
    index: CorrespondenceIndex = {int(pid): [] for pid in init.point_ids}
    for cam in init.cameras:
        xy, z = cam.project(init.point_positions)
        cols = np.floor(xy[:, 0]).astype(np.int64)
        rows = np.floor(xy[:, 1]).astype(np.int64)
        ok = (z > 0) & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
        for i in np.flatnonzero(ok):
            index[int(init.point_ids[i])].append((cam.id, int(rows[i]), int(cols[i])))
    return {pid: entries for pid, entries in index.items() if entries}


def fuse_point_features(init: SceneInit, index: CorrespondenceIndex, seed: int = 0):
    """Sample each point's frozen feature from one random visible view.

    Returns (point_ids, features) for the points present in the index, in
    the order they appear in init. Features are L2-normalized; sampling is
    uniform over visible views with a seeded generator, once at init time.
    """
    rng = np.random.default_rng(seed)
    kept_ids, feats = [], []
    for pid in init.point_ids:
        entries = index.get(int(pid))
        if not entries:
            continue
        vid, row, col = entries[int(rng.integers(len(entries)))]
        f = np.asarray(init.feature_maps[vid].data[row, col], dtype=np.float64)
        n = np.linalg.norm(f)
        feats.append(f / n if n > 0 else f)
        kept_ids.append(int(pid))
    d = init.feature_maps[init.cameras[0].id].channels if init.cameras else 0
    return np.array(kept_ids, dtype=np.int64), np.array(feats, dtype=np.float64).reshape(-1, d)


def build_initial_scene(init: SceneInit, seed: int = 0,
                        init_opacity: float = 0.1, scale_factor: float = 0.6) -> tuple:
    """Initialize primitives from the sparse points: identity-ish frames,
    nearest-neighbor scales, fused frozen features.

    Returns (GaussianScene, CorrespondenceIndex, excluded_point_count).
    """
    index = build_index(init)
    kept_ids, feats = fuse_point_features(init, index, seed=seed)
    excluded = len(init.point_ids) - len(kept_ids)
    id_to_row = {int(pid): i for i, pid in enumerate(init.point_ids)}
    rows = np.array([id_to_row[int(pid)] for pid in kept_ids], dtype=np.int64)
    pos = init.point_positions[rows]
    col = np.clip(init.point_colors[rows], 0.0, 1.0)

    n = len(rows)
    if n == 0:
        raise DatasetError("no initializable points: nothing projects into any view")
    if n >= 4:
        tree = cKDTree(pos)
        dists, _ = tree.query(pos, k=4)
        nn = scale_factor * np.mean(dists[:, 1:], axis=1)
    else:
        nn = np.full(n, 0.1)
    nn = np.maximum(nn, 1e-6)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    scene = GaussianScene(
        positions=pos.astype(np.float32),
        rotations=quats.astype(np.float32),
        log_scales=np.log(np.stack([nn, nn], axis=1)).astype(np.float32),
        opacity_logits=np.full(n, inverse_sigmoid(init_opacity), dtype=np.float32),
        colors=col.astype(np.float32),
        features=feats.astype(np.float32),
    )
    return scene, index, excluded


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(scene: GaussianScene, path):
    n, d = len(scene), scene.feature_dim
    rec = np.hstack([
        scene.positions.astype("<f4"), scene.rotations.astype("<f4"),
        scene.log_scales.astype("<f4"),
        scene.opacity_logits.astype("<f4")[:, None],
        scene.colors.astype("<f4"), scene.features.astype("<f4"),
    ])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, n, d))
        fh.write(np.ascontiguousarray(rec).tobytes())


def load_checkpoint(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: missing checkpoint magic")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    width = 13 + d
    expected = 16 + 4 * n * width
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, got {len(raw)}")
    rec = np.frombuffer(raw[16:], dtype="<f4").reshape(n, width)
    return GaussianScene(
        positions=rec[:, 0:3].copy(), rotations=rec[:, 3:7].copy(),
        log_scales=rec[:, 7:9].copy(), opacity_logits=rec[:, 9].copy(),
        colors=rec[:, 10:13].copy(), features=rec[:, 13:].copy(),
    )


# ---------------------------------------------------------------------------
# Synthetic analytic scenes
# ---------------------------------------------------------------------------

def _ring_cameras(n_views: int, width: int, height: int, radius: float = 2.3,
                  elevation: float = 0.55, fov_scale: float = 0.72):
    cams = []
    fx = 0.5 * width / fov_scale
    for k in range(n_views):
        ang = 2.0 * np.pi * k / n_views
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang), elevation])
        fwd = -eye / np.linalg.norm(eye)
        up_hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up_hint)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # world -> camera rows
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        cams.append(Camera(id=k, width=width, height=height, fx=fx, fy=fx,
                           cx=width / 2.0, cy=height / 2.0, world_to_camera=W))
    return cams


def _object_features(n_objects: int, dim: int, rng, max_cos: float = 0.3):
    """Background gets the first basis vector; objects get random unit vectors
    with pairwise (and against-background) cosine below max_cos, by rejection."""
    feats = [np.eye(dim)[0]]
    while len(feats) < n_objects + 1:
        f = rng.normal(size=dim)
        f /= np.linalg.norm(f)
        if all(abs(float(f @ g)) < max_cos for g in feats):
            feats.append(f)
    return np.array(feats)  # row 0 = background


def _sphere_layout(n_objects: int, rng):
    if n_objects == 1:
        return np.zeros((1, 3)), np.array([0.8])
    ring = 0.78
    centers = []
    for k in range(n_objects):
        ang = 2.0 * np.pi * k / n_objects
        centers.append([ring * np.cos(ang), ring * np.sin(ang), 0.0])
    gap = 2.0 * ring * np.sin(np.pi / n_objects)
    radius = min(0.72, 0.48 * gap)
    return np.array(centers), np.full(n_objects, radius)


_PALETTE = np.array([
    [1.00, 0.00, 0.00], [0.10, 0.35, 0.95], [0.95, 0.80, 0.10],
    [0.10, 0.85, 0.30], [0.85, 0.15, 0.85], [0.10, 0.85, 0.85],
])


def _trace_spheres(cam: Camera, centers, radii):
    """Per-pixel nearest sphere id (-1 = background) and hit points."""
    rows = np.arange(cam.height)
    cols = np.arange(cam.width)
    dx = (cols + 0.5 - cam.cx) / cam.fx
    dy = (rows + 0.5 - cam.cy) / cam.fy
    DX, DY = np.meshgrid(dx, dy)
    dirs_cam = np.stack([DX, DY, np.ones_like(DX)], axis=-1).reshape(-1, 3)
    R = cam.rotation()
    origin = cam.center()
    dirs = dirs_cam @ R  # camera -> world
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n_pix = dirs.shape[0]
    best_t = np.full(n_pix, np.inf)
    best_id = np.full(n_pix, -1, dtype=np.int64)
    for i, (c, r) in enumerate(zip(centers, radii)):
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - r * r)
        hit = disc >= 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        ok = hit & (t > 1e-6) & (t < best_t)
        best_t[ok] = t[ok]
        best_id[ok] = i
    points = origin + dirs * np.where(np.isfinite(best_t), best_t, 0.0)[:, None]
    return best_id.reshape(cam.height, cam.width), points.reshape(cam.height, cam.width, 3)


def synth_scene(out_dir, n_objects: int = 2, feature_dim: int = 16, n_views: int = 12,
                width: int = 128, height: int = 128, seed: int = 0,
                points_per_object: int = 350, force: bool = False) -> dict:
    """Write an analytic sphere dataset to out_dir; returns a manifest dict.

    Ground-truth images come from exact ray-sphere intersection (flat colors
    on black); every feature-map pixel holds the canonical unit feature of
    the object covering it (or the background vector). Sparse points sample
    the sphere surfaces with 1% radial noise.
    """
    if n_objects < 2:
        raise ValueError("need at least 2 objects")
    if n_views < 3:
        raise ValueError("need at least 3 cameras")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use force)")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    centers, radii = _sphere_layout(n_objects, rng)
    colors = _PALETTE[np.arange(n_objects) % len(_PALETTE)]
    feats = _object_features(n_objects, feature_dim, rng)
    cams = _ring_cameras(n_views, width, height)

    for cam in cams:
        obj_id, _ = _trace_spheres(cam, centers, radii)
        img = np.zeros((height, width, 3))
        fmap = np.empty((height, width, feature_dim))
        fmap[:] = feats[0]
        for i in range(n_objects):
            m = obj_id == i
            img[m] = colors[i]
            fmap[m] = feats[i + 1]
        write_ppm(out / "images" / f"{cam.id}.ppm", img)
        write_fmap(out / "features" / f"{cam.id}.fmap", fmap)
    write_cameras(out / "cameras.json", cams)

    ids, positions, point_colors = [], [], []
    pid = 0
    for i in range(n_objects):
        dirs = rng.normal(size=(points_per_object, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        r = radii[i] * (1.0 + 0.01 * rng.normal(size=points_per_object))
        pts = centers[i] + dirs * r[:, None]
        for p in pts:
            ids.append(pid)
            positions.append(p)
            point_colors.append(colors[i])
            pid += 1
    write_points(out / "points.txt", ids, positions, point_colors)

    return {
        "out": str(out), "objects": n_objects, "feature_dim": feature_dim,
        "views": n_views, "width": width, "height": height, "seed": seed,
        "points": pid,
    }
