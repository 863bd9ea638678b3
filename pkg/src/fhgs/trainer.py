"""Optimization loop: loss mixing, Adam, adaptive densify/prune, logging.

Frozen features are the contract here: the optimizer has no parameter group
for them, densification children copy the parent's vector bit-exactly, and a
checksum is asserted every step when `check_features` is on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses, metrics
from .backward import backward_frame
from .dual_drive import LossBundle, SimilarityActivation
from .rasterizer import RenderOptions, render_from_cache, render_training
from .scene import GaussianScene, SceneInit, decode_frames, sigmoid

LOG_HEADER = "iter,l_rgb,l_gt,l_cf,total,psnr,fe,fl1,n_primitives,elapsed_s"


class TrainingAbort(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


class DegenerateSceneError(RuntimeError):
    """Pruning removed every primitive."""


@dataclass
class TrainConfig:
    iters: int = 10000
    lambda1: float = 1.0
    lambda2: float = 0.1
    sim_threshold: float = 0.5
    slope: float = 20.0
    lambda_ssim: float = 0.2
    pure_l1: bool = False
    lr_position: float = 1.6e-4          # scaled by scene extent, decays exponentially
    lr_position_final_ratio: float = 0.01
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = -1               # -1 -> 0.75 * iters
    grad_threshold: float = 0.3          # tau_pos, screen-pixel gradient units
    prune_opacity: float = 0.005
    split_scale_fraction: float = 0.01   # of scene extent; larger splats split
    split_shrink: float = 1.6
    seed: int = 0
    deterministic: bool = True
    traversal: str = "standard"
    invert_polarity_cf: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    eval_interval: int = 200
    check_features: bool = True

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.densify_stop >= 0 and self.iters > 0:
            # an explicit window must be well formed; the default window
            # simply never fires when the run is too short
            if not (self.densify_start < self.densify_stop <= self.iters):
                raise ValueError("densify window must satisfy start < stop <= iters")

    def resolved_densify_stop(self) -> int:
        return int(0.75 * self.iters) if self.densify_stop < 0 else self.densify_stop

    def activation(self) -> SimilarityActivation:
        return SimilarityActivation(self.sim_threshold, self.slope)

    def render_options(self, dtype=np.float32) -> RenderOptions:
        # The direct engine is the tile traversal with pixel-exact candidate
        # generation; outputs are bit-identical (asserted in tests).
        return RenderOptions(traversal=self.traversal, background=self.background,
                             dtype=dtype, invert_polarity_cf=self.invert_polarity_cf,
                             engine="direct")

    @property
    def effective_lambda_ssim(self) -> float:
        return 0.0 if self.pure_l1 else self.lambda_ssim


_GROUPS = (
    ("positions", "lr_position"),
    ("rotations", "lr_rotation"),
    ("log_scales", "lr_scale"),
    ("opacity_logits", "lr_opacity"),
    ("colors", "lr_color"),
)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, scene: GaussianScene) -> "OptimizerState":
        m = {name: np.zeros_like(getattr(scene, name)) for name, _ in _GROUPS}
        v = {name: np.zeros_like(getattr(scene, name)) for name, _ in _GROUPS}
        return cls(m=m, v=v)


def adam_step(scene: GaussianScene, grads, state: OptimizerState, config: TrainConfig,
              lr_overrides: dict = None):
    """One Adam update over every parameter group; quaternions renormalized,
    features untouched."""
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, lr_name in _GROUPS:
        lr = (lr_overrides or {}).get(name, getattr(config, lr_name))
        g = getattr(grads, name).astype(np.float32)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + config.adam_eps)
        getattr(scene, name)[...] -= update
    q = scene.rotations
    q /= np.sqrt(np.sum(q * q, axis=1, keepdims=True))


def total_loss(l_rgb: float, lgt: float, lcf: float, config: TrainConfig) -> LossBundle:
    return LossBundle(l_rgb=l_rgb, l_gt=lgt, l_cf=lcf,
                      lambda1=config.lambda1, lambda2=config.lambda2)


def scene_extent(init: SceneInit) -> float:
    pts = init.point_positions
    centroid = pts.mean(axis=0)
    return float(np.max(np.linalg.norm(pts - centroid, axis=1)))


def densify_and_prune(scene: GaussianScene, state: OptimizerState, grad_accum: np.ndarray,
                      grad_count: np.ndarray, config: TrainConfig, extent: float,
                      rng: np.random.Generator):
    """Clone small / split large high-gradient primitives, prune transparent ones.

    Children inherit the parent feature bit-exactly; new optimizer moments are
    zero. Returns (scene, state, stats).
    """
    n = len(scene)
    mean_g = grad_accum / np.maximum(grad_count, 1.0)
    over = mean_g > config.grad_threshold
    max_scale = np.exp(np.max(scene.log_scales, axis=1))
    split = over & (max_scale > config.split_scale_fraction * extent)
    clone = over & ~split
    prune = sigmoid(scene.opacity_logits) < config.prune_opacity
    keep = ~(prune | split)

    pieces = {name: [getattr(scene, name)[keep]] for name, _ in _GROUPS}
    pieces["features"] = [scene.features[keep]]

    if np.any(clone):
        for name, _ in _GROUPS:
            pieces[name].append(getattr(scene, name)[clone].copy())
        pieces["features"].append(scene.features[clone].copy())

    n_split = int(np.count_nonzero(split))
    if n_split:
        idx = np.flatnonzero(split)
        rep = np.repeat(idx, 2)
        frames = decode_frames(scene.rotations[rep].astype(np.float64))
        s = np.exp(scene.log_scales[rep].astype(np.float64))
        uv = rng.standard_normal((2 * n_split, 2))
        offs = (frames[:, :, 0] * (s[:, 0] * uv[:, 0])[:, None]
                + frames[:, :, 1] * (s[:, 1] * uv[:, 1])[:, None])
        pieces["positions"].append((scene.positions[rep] + offs).astype(scene.positions.dtype))
        pieces["rotations"].append(scene.rotations[rep].copy())
        pieces["log_scales"].append(
            (scene.log_scales[rep] - np.float32(np.log(config.split_shrink))).astype(scene.log_scales.dtype))
        pieces["opacity_logits"].append(scene.opacity_logits[rep].copy())
        pieces["colors"].append(scene.colors[rep].copy())
        pieces["features"].append(scene.features[rep].copy())

    new_scene = GaussianScene(
        positions=np.concatenate(pieces["positions"]),
        rotations=np.concatenate(pieces["rotations"]),
        log_scales=np.concatenate(pieces["log_scales"]),
        opacity_logits=np.concatenate(pieces["opacity_logits"]),
        colors=np.concatenate(pieces["colors"]),
        features=np.concatenate(pieces["features"]),
    )
    if len(new_scene) == 0:
        raise DegenerateSceneError("densify/prune removed every primitive")

    new_state = OptimizerState.zeros(new_scene)
    n_keep = int(np.count_nonzero(keep))
    for name, _ in _GROUPS:
        new_state.m[name][:n_keep] = state.m[name][keep]
        new_state.v[name][:n_keep] = state.v[name][keep]
    new_state.step = state.step
    stats = {"pruned": int(np.count_nonzero(prune)), "cloned": int(np.count_nonzero(clone)),
             "split": n_split, "n": len(new_scene)}
    return new_scene, new_state, stats


@dataclass
class TrainResult:
    scene: GaussianScene
    rows: list
    aborted: bool = False
    message: str = ""

    def csv(self) -> str:
        return "\n".join([LOG_HEADER] + [r["csv"] for r in self.rows]) + "\n"


def _screen_grad_norm(grads, cache, camera):
    """Per-primitive screen-scaled positional gradient magnitude for densify."""
    gp = np.linalg.norm(grads.positions, axis=1)
    z = np.maximum(cache.geom.depths.astype(np.float64), 1e-4)
    return gp * (0.5 * (camera.fx + camera.fy)) / z


def train(init: SceneInit, config: TrainConfig, scene: GaussianScene = None,
          log_path=None, init_seed: int = None) -> TrainResult:
    """Run the full optimization; reproducible given (seed, deterministic).

    `scene` overrides the default point-cloud initialization (used by tests).
    """
    from .ingestion import build_initial_scene

    if scene is None:
        scene, _, _ = build_initial_scene(
            init, seed=config.seed if init_seed is None else init_seed)
    else:
        scene = scene.copy()
    extent = scene_extent(init)
    act = config.activation()
    opts = config.render_options()
    state = OptimizerState.zeros(scene)
    views = sorted(init.images.keys())
    cam_by_id = {c.id: c for c in init.cameras}
    rng_views = np.random.default_rng(config.seed)
    rng_densify = np.random.default_rng(config.seed + 1)
    densify_stop = config.resolved_densify_stop()

    grad_accum = np.zeros(len(scene))
    grad_count = np.zeros(len(scene))
    checksum = scene.feature_checksum()
    known_features = {scene.features[i].tobytes() for i in range(len(scene))}
    rows = []
    order = []
    t0 = time.perf_counter()

    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write(LOG_HEADER + "\n")

    def emit(it, bundle, psnr, fe, fl1, n_prims):
        elapsed = 0.0 if config.deterministic else time.perf_counter() - t0
        line = (f"{it},{bundle.l_rgb:.9g},{bundle.l_gt:.9g},{bundle.l_cf:.9g},"
                f"{bundle.total:.9g},{psnr:.9g},{fe:.9g},{fl1},{n_prims},{elapsed:.9g}")
        rows.append({"iter": it, "l_rgb": bundle.l_rgb, "l_gt": bundle.l_gt,
                     "l_cf": bundle.l_cf, "total": bundle.total, "psnr": psnr,
                     "fe": fe, "fl1": fl1, "n_primitives": n_prims, "csv": line})
        if log_fh:
            log_fh.write(line + "\n")

    try:
        for it in range(config.iters):
            if it % len(views) == 0:
                order = list(views)
                rng_views.shuffle(order)
            vid = order[it % len(views)]
            camera = cam_by_id[vid]
            gt = init.images[vid]
            fgt = init.feature_maps[vid].data

            fwd = render_training(scene, camera, fgt.astype(opts.dtype), act, opts)
            l_rgb, g_img = losses.rgb_loss(fwd.image, gt, config.effective_lambda_ssim)
            bundle = total_loss(l_rgb, fwd.lgt, fwd.lcf, config)
            if not bundle.finite():
                raise TrainingAbort(f"non-finite loss at iteration {it}")
            # log values must come from this forward's cache, before the step
            # and any densification reindex the scene
            psnr = metrics.psnr(fwd.image, gt)
            if config.eval_interval and it % config.eval_interval == 0:
                feat_img = render_from_cache(scene, fwd.cache, "feature")
                fl1 = f"{float(np.mean(np.abs(feat_img - fgt.astype(opts.dtype)))):.9g}"
            else:
                fl1 = ""

            grads = backward_frame(scene, fwd.cache, g_img, config.lambda1, config.lambda2)
            if not grads.finite():
                raise TrainingAbort(f"non-finite gradient at iteration {it}")

            decay = (config.lr_position_final_ratio
                     ** (it / max(config.iters - 1, 1)))
            adam_step(scene, grads, state, config,
                      lr_overrides={"positions": config.lr_position * extent * decay})

            if config.check_features and scene.feature_checksum() != checksum:
                raise TrainingAbort("frozen feature vectors were modified")

            seen = np.zeros(len(scene), bool)
            seen[fwd.cache.frag_prim[fwd.cache.live]] = True
            grad_accum += _screen_grad_norm(grads, fwd.cache, camera) * seen
            grad_count += seen

            if (config.densify_start <= it < densify_stop
                    and it % config.densify_interval == 0):
                scene, state, _ = densify_and_prune(
                    scene, state, grad_accum, grad_count, config, extent, rng_densify)
                grad_accum = np.zeros(len(scene))
                grad_count = np.zeros(len(scene))
                checksum = scene.feature_checksum()
                for i in range(len(scene)):
                    fb = scene.features[i].tobytes()
                    if fb not in known_features:
                        raise TrainingAbort("densification invented a feature vector")

            emit(it, bundle, psnr, bundle.l_gt, fl1, len(scene))
    except TrainingAbort as e:
        return TrainResult(scene=scene, rows=rows, aborted=True, message=str(e))
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(scene=scene, rows=rows)
