"""Hand-derived gradients: loss -> blend weights -> alpha -> geometry.

The frozen feature vectors have no gradient slot anywhere in this module;
every other primitive parameter (position, rotation, log scales, opacity
logit, color) receives analytic contributions that are validated against
central finite differences by `fd_check`.

Per-pixel sweeps reuse the cumulative sums recorded by the forward traversal:
the clustering-loss gradient needs one reverse re-indexed pass, and the
weight-to-alpha chain needs one reverse running sum over the compositing
order. Both stay linear in the fragment count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, projection, rasterizer
from .dual_drive import SimilarityActivation
from .rasterizer import FrameCache, RenderOptions
from .scene import Camera, GaussianScene, frame_jacobians


@dataclass
class GradBuffer:
    """Per-primitive gradient accumulators; deliberately no feature slot."""

    positions: np.ndarray       # (N, 3)
    rotations: np.ndarray       # (N, 4), projected to the quaternion tangent space
    log_scales: np.ndarray      # (N, 2)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3)
    near_parallel_skips: int = 0
    degenerate_misses: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "GradBuffer":
        return cls(
            positions=np.zeros((n, 3), dtype),
            rotations=np.zeros((n, 4), dtype),
            log_scales=np.zeros((n, 2), dtype),
            opacity_logits=np.zeros(n, dtype),
            colors=np.zeros((n, 3), dtype),
        )

    def finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.positions, self.rotations, self.log_scales,
                      self.opacity_logits, self.colors)
        )

    def add_(self, other: "GradBuffer"):
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors += other.colors
        self.near_parallel_skips += other.near_parallel_skips
        return self


def grad_w_lgt(sigma):
    """d(l_gt)/dw for one fragment is its frozen polarity value."""
    return sigma


def grad_w_lcf(w: np.ndarray, sigma: np.ndarray, features: np.ndarray) -> np.ndarray:
    """O(N) gradient of the clustering term w.r.t. every fragment weight.

    Arrays are ordered far to near (the accumulation order). The direct term
    reuses the far-side cumulative sums; the cross term is a reverse-indexed
    running sum of (sigma * w) and (sigma * w * f) over nearer fragments.
    """
    w = np.asarray(w, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    n = w.shape[0]
    if n == 0:
        return np.zeros(0)
    W_far = np.concatenate([[0.0], np.cumsum(w)[:-1]])
    F_far = np.vstack([np.zeros((1, f.shape[1])), np.cumsum(w[:, None] * f, axis=0)[:-1]])
    direct = sigma * (W_far - np.sum(F_far * f, axis=1))
    sw = sigma * w
    A = np.cumsum(sw[::-1])[::-1] - sw                       # sum over nearer fragments
    B = (np.cumsum((sw[:, None] * f)[::-1], axis=0)[::-1] - sw[:, None] * f)
    cross = A - np.sum(B * f, axis=1)
    return direct + cross


def grad_w_lcf_naive(w: np.ndarray, sigma: np.ndarray, features: np.ndarray) -> np.ndarray:
    """O(N^2) evaluation of the same two-term formula; test oracle only."""
    w = np.asarray(w, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    n = w.shape[0]
    out = np.zeros(n)
    for k in range(n):
        direct = 0.0
        for j in range(k):
            direct += w[j] * (1.0 - float(f[k] @ f[j]))
        out[k] = sigma[k] * direct
        for i in range(k + 1, n):
            out[k] += sigma[i] * w[i] * (1.0 - float(f[i] @ f[k]))
    return out


def grad_alpha(alpha: np.ndarray, T_excl: np.ndarray, g_w: np.ndarray) -> np.ndarray:
    """Chain dL/dw -> dL/dalpha along one pixel's compositing order.

    dL/da_k = T_k * g_w_k - (1 / (1 - a_k)) * sum over later-composited j of
    g_w_j * w_j, realized with a single reverse running sum.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    T_excl = np.asarray(T_excl, dtype=np.float64)
    g_w = np.asarray(g_w, dtype=np.float64)
    w = alpha * T_excl
    gw_w = g_w * w
    after = np.cumsum(gw_w[::-1])[::-1] - gw_w
    return T_excl * g_w - after / (1.0 - alpha)


def _rect_sweeps(cache: FrameCache, feats, lambda1, lambda2, g_w_rgb):
    """Vectorized per-pixel sweeps: total dL/dw then dL/dalpha, flat arrays."""
    opts = cache.opts
    dtype = cache.w.dtype.type
    F = cache.n_fragments
    hw = cache.camera.width * cache.camera.height
    far_is_prefix = opts.traversal == "paper_literal"
    far_excl = rasterizer._exclusive_cumsum if far_is_prefix else rasterizer._rev_exclusive_cumsum
    near_excl = rasterizer._rev_exclusive_cumsum if far_is_prefix else rasterizer._exclusive_cumsum

    g_w = np.array(g_w_rgb, dtype=dtype, copy=True)
    if lambda1 != 0.0:
        g_w += dtype(lambda1 / hw) * cache.sigma
    g_alpha = np.zeros(F, dtype)
    scale2 = dtype(lambda2 / hw)

    cf_sigma = rasterizer.cf_polarity(cache)
    frag_feats = feats[cache.frag_prim] if lambda2 != 0.0 else None
    far_sums = cache._far_sums if cache._far_sums is not None else [None] * len(cache.rect_blocks())
    for block, (rows, idx, mask) in enumerate(cache.rect_blocks()):
        sel = idx[mask]
        if lambda2 != 0.0:
            wr = rasterizer._gather_rect(cache.w, idx, mask)
            sig = rasterizer._gather_rect(cf_sigma, idx, mask)
            sw = sig * wr
            if far_sums[block] is not None:
                W_far, dot_far = far_sums[block]
            else:
                W_far = far_excl(wr)
                dot_far = np.zeros_like(wr)
            A_near = near_excl(sw)
            dot_near = np.zeros_like(wr)
            for c0, c1 in rasterizer._channel_groups(idx.size, feats.shape[1]):
                f_r = frag_feats[:, c0:c1][idx] * mask[:, :, None]
                if far_sums[block] is None:
                    dot_far += np.sum(far_excl(wr[:, :, None] * f_r) * f_r, axis=2)
                dot_near += np.sum(near_excl(sw[:, :, None] * f_r) * f_r, axis=2)
            g_lcf = sig * (W_far - dot_far) + (A_near - dot_near)
            g_w[sel] += scale2 * g_lcf[mask]
        # w -> alpha chain along the compositing axis.
        gw_r = np.zeros(idx.shape, dtype)
        gw_r[mask] = g_w[sel]
        live_r = np.zeros(idx.shape, bool)
        live_r[mask] = cache.live[sel]
        gw_r *= live_r
        w_r = rasterizer._gather_rect(cache.w, idx, mask)
        T_r = rasterizer._gather_rect(cache.T_excl, idx, mask)
        a_r = rasterizer._gather_rect(cache.alpha, idx, mask)
        after = rasterizer._rev_exclusive_cumsum(gw_r * w_r)
        ga = T_r * gw_r - after / (1.0 - a_r)
        ga *= live_r
        g_alpha[sel] = ga[mask]
    g_w *= cache.live
    return g_w, g_alpha


def grad_geometry(scene: GaussianScene, cache: FrameCache, g_alpha: np.ndarray,
                  g_image_flat: np.ndarray = None) -> GradBuffer:
    """Chain per-fragment dL/dalpha into the GradBuffer.

    alpha = opacity * G(u, v); the (u, v) Jacobians against position,
    quaternion and log scales come from the ray-plane intersection. Clamped
    fragments are flat; nearly edge-on intersections (|n.d| < 1e-6 * |d|) are
    guarded to zero and counted. When g_image_flat is given, the linear color
    gradient dL/dc_k = w_k * g_image is accumulated too.
    """
    n = len(scene)
    grads = GradBuffer.zeros(n, dtype=np.float64)
    F = cache.n_fragments
    if F == 0:
        return grads
    pix, prim = cache.frag_pix, cache.frag_prim
    geom = cache.geom

    if g_image_flat is not None:
        for ch in range(3):
            grads.colors[:, ch] = np.bincount(
                prim, weights=(cache.w * g_image_flat[pix, ch]).astype(np.float64), minlength=n)

    # alpha = opacity * G(u, v); clamped fragments are flat.
    unclamped = ~cache.alpha_clamped
    ga = (np.asarray(g_alpha) * unclamped).astype(np.float64)
    op = geom.opacities[prim].astype(np.float64)
    G = cache.G.astype(np.float64)
    grads.opacity_logits = np.bincount(
        prim, weights=ga * G * op * (1.0 - op), minlength=n)

    # Geometry guard: nearly edge-on intersections contribute no gradient.
    rn = cache.ray_norms[pix].astype(np.float64)
    ndotd = cache.ndotd.astype(np.float64)
    ok = np.abs(ndotd) >= 1e-6 * rn
    grads.near_parallel_skips = int(np.count_nonzero(~ok & (ga != 0)))
    ga = np.where(ok, ga, 0.0)

    alpha_full = (op * G)
    u = cache.u.astype(np.float64)
    v = cache.v.astype(np.float64)
    g_u = ga * (-u) * alpha_full
    g_v = ga * (-v) * alpha_full

    s = geom.scales.astype(np.float64)
    su, sv = s[prim, 0], s[prim, 1]
    grads.log_scales[:, 0] = np.bincount(prim, weights=g_u * (-u), minlength=n)
    grads.log_scales[:, 1] = np.bincount(prim, weights=g_v * (-v), minlength=n)

    d = cache.rays[pix].astype(np.float64)
    d_eu = projection.dot3(d, geom.e_u[prim].astype(np.float64))
    d_ev = projection.dot3(d, geom.e_v[prim].astype(np.float64))
    inv_nd = 1.0 / ndotd

    # Position: dL/dp = t_w * sum(g_u (d.e_u) / (n.d)) / s_u - t_u * sum(g_u) / s_u + (v terms).
    A_u = np.bincount(prim, weights=g_u * d_eu * inv_nd, minlength=n)
    A_v = np.bincount(prim, weights=g_v * d_ev * inv_nd, minlength=n)
    B_u = np.bincount(prim, weights=g_u, minlength=n)
    B_v = np.bincount(prim, weights=g_v, minlength=n)
    fw = geom.frames_world.astype(np.float64)
    t_u, t_v, t_w = fw[:, :, 0], fw[:, :, 1], fw[:, :, 2]
    s_all = np.exp(scene.log_scales.astype(np.float64))
    grads.positions = (
        t_w * ((A_u / s_all[:, 0] + A_v / s_all[:, 1]))[:, None]
        - t_u * (B_u / s_all[:, 0])[:, None]
        - t_v * (B_v / s_all[:, 1])[:, None]
    )

    # Rotation: accumulate frame-column gradients, then chain through the
    # quaternion Jacobian and project onto the unit-sphere tangent space.
    R = cache.camera.rotation()
    delta_cam = cache.z.astype(np.float64)[:, None] * d - geom.centers[prim].astype(np.float64)
    delta_w = delta_cam @ R  # camera -> world orientation
    g_tu = np.zeros((n, 3))
    g_tv = np.zeros((n, 3))
    g_tw = np.zeros((n, 3))
    coef_w = -(g_u * d_eu / su + g_v * d_ev / sv) * inv_nd
    for i in range(3):
        g_tu[:, i] = np.bincount(prim, weights=(g_u / su) * delta_w[:, i], minlength=n)
        g_tv[:, i] = np.bincount(prim, weights=(g_v / sv) * delta_w[:, i], minlength=n)
        g_tw[:, i] = np.bincount(prim, weights=coef_w * delta_w[:, i], minlength=n)
    dt_u, dt_v, dt_w = frame_jacobians(geom.quats_unit.astype(np.float64))
    g_q = (
        np.einsum("nij,ni->nj", dt_u, g_tu)
        + np.einsum("nij,ni->nj", dt_v, g_tv)
        + np.einsum("nij,ni->nj", dt_w, g_tw)
    )
    q = geom.quats_unit.astype(np.float64)
    grads.rotations = g_q - q * np.sum(q * g_q, axis=1, keepdims=True)
    return grads


def backward_frame(scene: GaussianScene, cache: FrameCache, g_image: np.ndarray,
                   lambda1: float, lambda2: float) -> GradBuffer:
    """Full analytic backward for one view.

    g_image is d(loss)/d(rendered rgb), (H, W, 3). The dual-drive terms use
    the cached polarity and weights; everything funnels through dL/dw, the
    transmittance chain, and the intersection Jacobians.
    """
    opts = cache.opts
    dtype = cache.w.dtype.type
    n = len(scene)
    if cache.n_fragments == 0:
        return GradBuffer.zeros(n, dtype=np.float64)
    cam = cache.camera
    hw = cam.width * cam.height
    pix, prim = cache.frag_pix, cache.frag_prim
    colors = scene.colors.astype(dtype)
    feats = scene.features.astype(dtype)
    g_img_flat = np.asarray(g_image, dtype=dtype).reshape(hw, 3)
    bg = np.asarray(opts.background, dtype)

    # dC/dw_k = c_k - bg: the background is lit by 1 - sum(w).
    g_w_rgb = np.zeros(cache.n_fragments, dtype)
    for ch in range(3):
        g_w_rgb += g_img_flat[pix, ch] * (colors[prim, ch] - bg[ch])

    g_w, g_alpha = _rect_sweeps(cache, feats, lambda1, lambda2, g_w_rgb)
    return grad_geometry(scene, cache, g_alpha, g_img_flat)


@dataclass
class FdProbe:
    view: int
    prim: int
    param: str
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FdReport:
    probes: list = field(default_factory=list)
    nonfinite: int = 0

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    @property
    def mean_rel_err(self) -> float:
        return float(np.mean([p.rel_err for p in self.probes])) if self.probes else 0.0

    @property
    def worst(self):
        return max(self.probes, key=lambda p: p.rel_err, default=None)

    def passed(self, tolerance: float) -> bool:
        return self.nonfinite == 0 and self.max_rel_err <= tolerance

    def summary(self) -> str:
        lines = [
            f"probes: {len(self.probes)}",
            f"max rel err: {self.max_rel_err:.3e}",
            f"mean rel err: {self.mean_rel_err:.3e}",
        ]
        if self.worst is not None:
            w = self.worst
            lines.append(
                f"worst: view {w.view} prim {w.prim} {w.param}: "
                f"analytic {w.analytic:.6e} vs fd {w.numeric:.6e}"
            )
        if self.nonfinite:
            lines.append(f"NON-FINITE analytic gradients: {self.nonfinite}")
        return "\n".join(lines)


_PARAM_FIELDS = (
    ("positions", 3, "position"),
    ("rotations", 4, "rotation"),
    ("log_scales", 2, "log_scale"),
    ("opacity_logits", 1, "opacity_logit"),
    ("colors", 3, "color"),
)


def _loss_value(scene, camera, gt_image, fgt, selector, lambda1, lambda2,
                lambda_ssim, act, opts):
    cache = rasterizer.forward_frame(scene, camera, opts, fgt=fgt, act=act)
    hw = camera.width * camera.height
    total = 0.0
    if selector in ("rgb", "all"):
        img = rasterizer.render_from_cache(scene, cache, "rgb")
        total += losses.rgb_loss(img, gt_image, lambda_ssim)[0]
    if selector in ("gt", "all"):
        lam = 1.0 if selector == "gt" else lambda1
        total += lam * float(np.sum(cache.lgt_map, dtype=np.float64) / hw)
    if selector in ("cf", "all"):
        lam = 1.0 if selector == "cf" else lambda2
        total += lam * float(np.sum(cache.lcf_map, dtype=np.float64) / hw)
    return total


def _analytic_grads(scene, camera, gt_image, fgt, selector, lambda1, lambda2,
                    lambda_ssim, act, opts):
    cache = rasterizer.forward_frame(scene, camera, opts, fgt=fgt, act=act)
    if selector in ("rgb", "all"):
        img = rasterizer.render_from_cache(scene, cache, "rgb")
        g_img = losses.rgb_loss(img, gt_image, lambda_ssim)[1]
    else:
        g_img = np.zeros((camera.height, camera.width, 3))
    l1 = {"gt": 1.0, "all": lambda1}.get(selector, 0.0)
    l2 = {"cf": 1.0, "all": lambda2}.get(selector, 0.0)
    return backward_frame(scene, cache, g_img, l1, l2)


def fd_check(scene: GaussianScene, views, selector: str = "all", *, n_probes: int = 200,
             seed: int = 0, lambda1: float = 1.0, lambda2: float = 0.1,
             lambda_ssim: float = 0.2, act: SimilarityActivation = None,
             opts: RenderOptions = None, h: float = 1e-6) -> FdReport:
    """Central-difference validation of the full analytic backward pass.

    views is a list of (Camera, gt_image, feature_map_array). The scene is
    never mutated: every evaluation perturbs a copy in double precision.
    """
    if act is None:
        act = SimilarityActivation()
    if opts is None:
        opts = RenderOptions(dtype=np.float64)
    elif opts.dtype != np.float64:
        raise ValueError("fd_check requires double-precision options")
    scene64 = scene.astype(np.float64)
    rng = np.random.default_rng(seed)
    report = FdReport()
    if len(scene64) == 0 or n_probes <= 0:
        return report

    per_view_grads = {}
    loss_args = (selector, lambda1, lambda2, lambda_ssim, act, opts)
    for _ in range(n_probes):
        vi = int(rng.integers(len(views)))
        camera, gt_image, fgt = views[vi]
        if vi not in per_view_grads:
            g = _analytic_grads(scene64, camera, gt_image, fgt, *loss_args)
            if not g.finite():
                report.nonfinite += 1
                return report
            per_view_grads[vi] = g
        grads = per_view_grads[vi]
        pi = int(rng.integers(len(scene64)))
        fname, width, label = _PARAM_FIELDS[int(rng.integers(len(_PARAM_FIELDS)))]
        ci = int(rng.integers(width))

        def value_at(delta):
            probe = scene64.copy()
            arr = getattr(probe, fname)
            if arr.ndim == 1:
                arr[pi] += delta
            else:
                arr[pi, ci] += delta
            return _loss_value(probe, camera, gt_image, fgt, *loss_args)

        numeric = (value_at(h) - value_at(-h)) / (2.0 * h)
        garr = getattr(grads, fname)
        analytic = float(garr[pi] if garr.ndim == 1 else garr[pi, ci])
        # gradients below the central-difference noise floor cannot be graded
        # relatively; the floor keeps them from dominating the report
        denom = max(abs(analytic), abs(numeric), 1e-7)
        rel = abs(analytic - numeric) / denom
        report.probes.append(FdProbe(vi, pi, f"{label}[{ci}]", analytic, float(numeric), float(rel)))
    return report
