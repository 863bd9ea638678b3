"""Tile-binned, depth-sorted splatting with a shared per-pixel fragment kernel.

Every candidate engine (the tile binner, the pixel-exact "direct" generator
the trainer uses, and the brute-force "naive" oracle that considers every
pixel-primitive pair) reduces its candidates to one canonical fragment list:
valid hits sorted by (pixel, depth key, primitive). Everything downstream
operates on that list, so the engines are bit-identical by construction.

Per-pixel traversal runs front to back (nearest occludes); the clustering
sweep of the dual-drive loss runs far to near over the same weights. The
`paper_literal` traversal flips the compositing direction so the literal
far-to-near weighting of the source formulas can be exercised in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import projection
from .dual_drive import SimilarityActivation, polarity
from .scene import Camera, GaussianScene

RENDER_MODES = ("rgb", "depth", "normal", "feature", "weight")


@dataclass
class RenderOptions:
    tile_size: int = 16
    cutoff_sigma: float = 3.0
    near: float = projection.NEAR_PLANE
    parallel_eps: float = projection.PARALLEL_EPS
    scale_eps: float = projection.SCALE_EPS
    alpha_max: float = 1.0 - 1e-4
    stop_transmittance: float = 1e-4
    weight_eps: float = 1e-8
    traversal: str = "standard"          # or "paper_literal"
    background: tuple = (0.0, 0.0, 0.0)
    engine: str = "tile"                 # or "direct" / "naive"
    dtype: type = np.float32
    invert_polarity_cf: bool = False     # experiment: flip sigma inside the clustering term only

    def __post_init__(self):
        if self.traversal not in ("standard", "paper_literal"):
            raise ValueError(f"unknown traversal mode: {self.traversal!r}")
        if self.engine not in ("tile", "naive", "direct"):
            raise ValueError(f"unknown engine: {self.engine!r}")


def depth_keys(z) -> np.ndarray:
    """Order-preserving 32-bit encoding of camera depth, valid on [1e-4, 1e6]."""
    z = np.clip(np.atleast_1d(np.asarray(z, dtype=np.float64)), 1e-4, 1e6)
    return z.astype(np.float32).view(np.uint32)


def instance_keys(tile_idx: np.ndarray, depth32: np.ndarray) -> np.ndarray:
    """64-bit sort key: tile index in the upper half, depth encoding below."""
    return (tile_idx.astype(np.uint64) << np.uint64(32)) | depth32.astype(np.uint64)


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray  # (tiles_x * tiles_y, 2) start/end into the sorted instances

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y


@dataclass
class InstanceList:
    keys: np.ndarray      # (M,) uint64, sorted
    prim_idx: np.ndarray  # (M,) int32
    tile_idx: np.ndarray  # (M,) int32


@dataclass
class Fragment:
    """One (pixel, primitive) blend record; scalar reference path."""

    prim: int
    z: float
    G: float
    alpha: float
    w: float = 0.0
    phi: float = 0.0
    sigma: float = 0.0
    color: np.ndarray = None
    normal: np.ndarray = None
    feature: np.ndarray = None


def bin_and_sort(scene: GaussianScene, camera: Camera, opts: RenderOptions = RenderOptions(),
                 geom: projection.CameraFrameGeometry = None):
    """Duplicate each on-screen primitive into every tile its bounds overlap.

    Returns (TileGrid, InstanceList) with instances stably sorted by the
    64-bit key; equal keys keep ascending primitive order.
    """
    ts = opts.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    tiles_y = (camera.height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    if geom is None:
        geom = projection.camera_frame_geometry(scene, camera, np.float64)
    boxes, onscreen = projection.screen_bounds_many(scene, camera, opts.cutoff_sigma, near=opts.near)
    prim_ids = np.flatnonzero(onscreen).astype(np.int32)
    if prim_ids.size == 0:
        return (
            TileGrid(ts, tiles_x, tiles_y, np.zeros((n_tiles, 2), dtype=np.int64)),
            InstanceList(np.empty(0, np.uint64), np.empty(0, np.int32), np.empty(0, np.int32)),
        )
    b = boxes[prim_ids]
    ty0, ty1 = b[:, 0] // ts, b[:, 1] // ts
    tx0, tx1 = b[:, 2] // ts, b[:, 3] // ts
    ncols = (tx1 - tx0 + 1).astype(np.int64)
    nrows = (ty1 - ty0 + 1).astype(np.int64)
    counts = ncols * nrows
    total = int(counts.sum())
    rep = np.repeat(np.arange(prim_ids.size), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    drow = local // ncols[rep]
    dcol = local % ncols[rep]
    tiles = ((ty0[rep] + drow) * tiles_x + tx0[rep] + dcol).astype(np.int64)
    prims = prim_ids[rep]
    keys = instance_keys(tiles, depth_keys(geom.depths)[prims])
    order = np.argsort(keys, kind="stable")
    keys, prims, tiles = keys[order], prims[order], tiles[order].astype(np.int32)
    tile_of = (keys >> np.uint64(32)).astype(np.int64)
    starts = np.searchsorted(tile_of, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_of, np.arange(n_tiles), side="right")
    ranges = np.stack([starts, ends], axis=1)
    return TileGrid(ts, tiles_x, tiles_y, ranges), InstanceList(keys, prims.astype(np.int32), tiles)


def composite_pixel(fragments, *, background=(0.0, 0.0, 0.0),
                    stop_transmittance: float = 1e-4, weight_eps: float = 1e-8):
    """Sequential front-to-back alpha blend over one pixel; reference semantics.

    Fragments must be ordered by the traversal convention in use (nearest
    first for standard rendering). Returns (color, depth, normal, weight_sum)
    and writes each processed fragment's blend weight back onto it.
    """
    T = 1.0
    color = np.zeros(3, dtype=np.float64)
    depth_acc = 0.0
    normal_acc = np.zeros(3, dtype=np.float64)
    wsum = 0.0
    for fr in fragments:
        if T < stop_transmittance:
            break
        w = fr.alpha * T
        fr.w = w
        if fr.color is not None:
            color += w * np.asarray(fr.color, dtype=np.float64)
        depth_acc += w * fr.z
        if fr.normal is not None:
            normal_acc += w * np.asarray(fr.normal, dtype=np.float64)
        wsum += w
        T *= 1.0 - fr.alpha
    color += T * np.asarray(background, dtype=np.float64)
    depth = depth_acc / max(wsum, weight_eps)
    nrm = float(np.linalg.norm(normal_acc))
    normal = normal_acc / nrm if (wsum >= weight_eps and nrm > 0) else np.zeros(3)
    return color, depth, normal, wsum


def pixel_fragments(scene: GaussianScene, camera: Camera, pixel,
                    opts: RenderOptions = RenderOptions(), fgt=None,
                    act: SimilarityActivation = SimilarityActivation()):
    """Build the ordered Fragment list one pixel sees; scalar reference path.

    Ordering follows the instance keys: the quantized camera depth of the
    splat center, ties broken by primitive index.
    """
    frags = []
    order = []
    for i in range(len(scene)):
        prim = scene.primitive(i)
        hit = projection.intersect(camera, pixel, prim, near=opts.near,
                                   parallel_eps=opts.parallel_eps, scale_eps=opts.scale_eps)
        if hit is None or hit.u ** 2 + hit.v ** 2 > opts.cutoff_sigma ** 2:
            continue
        alpha = min(prim.opacity * hit.G, opts.alpha_max)
        _, _, t_w = prim.frame()
        fr = Fragment(prim=i, z=hit.z, G=hit.G, alpha=alpha, color=prim.color,
                      normal=t_w, feature=prim.feature)
        if fgt is not None:
            fr.phi = float(np.clip(prim.feature.astype(np.float64) @ np.asarray(fgt, np.float64), -1, 1))
            fr.sigma = float(polarity(fr.phi, act))
        center_z = float(camera.to_camera(prim.position)[0, 2])
        order.append(int(depth_keys(center_z)[0]))
        frags.append(fr)
    sign = -1 if opts.traversal == "paper_literal" else 1
    paired = sorted(zip(order, frags), key=lambda t: (sign * t[0], t[1].prim))
    return [fr for _, fr in paired]


@dataclass
class FrameCache:
    """Flat canonical fragment state kept for the backward pass."""

    camera: Camera
    geom: projection.CameraFrameGeometry
    rays: np.ndarray
    ray_norms: np.ndarray
    frag_pix: np.ndarray
    frag_prim: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    ndotd: np.ndarray
    G: np.ndarray
    alpha: np.ndarray
    alpha_clamped: np.ndarray   # bool: raw opacity*G exceeded alpha_max
    w: np.ndarray
    T_excl: np.ndarray
    live: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    seg_starts: np.ndarray      # (S,) first fragment of each pixel segment
    seg_pix: np.ndarray         # (S,) pixel id per segment
    seg_lens: np.ndarray        # (S,)
    wsum: np.ndarray            # (H*W,)
    t_final: np.ndarray         # (H*W,)
    opts: RenderOptions = None
    act: SimilarityActivation = None
    fgt_flat: np.ndarray = None  # (H*W, d) view target features
    lgt_map: np.ndarray = None   # (H*W,)
    lcf_map: np.ndarray = None   # (H*W,)
    _rects: list = None
    _far_sums: list = None       # per-block (W_far, dot_far), reused by backward

    @property
    def n_fragments(self) -> int:
        return self.frag_pix.shape[0]

    def rect_blocks(self):
        """Padded per-pixel rectangles (rows, idx, mask), built once."""
        if self._rects is None:
            self._rects = [
                (rows,) + _rect_index(self.seg_starts, self.seg_lens, rows, K)
                for rows, K in _rect_chunks(self.seg_starts, self.seg_lens)
            ]
        return self._rects


def _candidates_tile(scene, camera, opts, geom):
    grid, inst = bin_and_sort(scene, camera, opts, geom)
    ts = opts.tile_size
    pix_chunks, prim_chunks = [], []
    occupied = np.flatnonzero(grid.ranges[:, 1] > grid.ranges[:, 0])
    for t in occupied:
        lo, hi = grid.ranges[t]
        prims = inst.prim_idx[lo:hi]
        tr, tc = divmod(int(t), grid.tiles_x)
        r0, r1 = tr * ts, min((tr + 1) * ts, camera.height)
        c0, c1 = tc * ts, min((tc + 1) * ts, camera.width)
        rows = np.arange(r0, r1, dtype=np.int64)
        cols = np.arange(c0, c1, dtype=np.int64)
        pix = (rows[:, None] * camera.width + cols[None, :]).ravel()
        pix_chunks.append(np.repeat(pix, prims.size))
        prim_chunks.append(np.tile(prims.astype(np.int64), pix.size))
    if not pix_chunks:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(pix_chunks), np.concatenate(prim_chunks)


def _candidates_naive(scene, camera, opts, geom):
    n, hw = len(scene), camera.width * camera.height
    pix = np.repeat(np.arange(hw, dtype=np.int64), n)
    prim = np.tile(np.arange(n, dtype=np.int64), hw)
    return pix, prim


def _candidates_direct(scene, camera, opts, geom):
    """Pixel-exact candidates from each primitive's screen bounds.

    The post-filter fragment set is the same as the tile engine's (both are
    conservative supersets of the cutoff disk), so outputs stay bit-identical
    while skipping the tile-rectangle expansion. Used by the trainer.
    """
    boxes, onscreen = projection.screen_bounds_many(scene, camera, opts.cutoff_sigma, near=opts.near)
    ids = np.flatnonzero(onscreen).astype(np.int64)
    if ids.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    b = boxes[ids]
    widths = b[:, 3] - b[:, 2] + 1
    heights = b[:, 1] - b[:, 0] + 1
    counts = widths * heights
    total = int(counts.sum())
    rep = np.repeat(np.arange(ids.size), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    dr = local // widths[rep]
    dc = local % widths[rep]
    pix = (b[rep, 0] + dr) * camera.width + b[rep, 2] + dc
    return pix, ids[rep]


def _segments(frag_pix):
    if frag_pix.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64)
    change = np.flatnonzero(np.diff(frag_pix)) + 1
    starts = np.concatenate([[0], change])
    lens = np.diff(np.append(starts, frag_pix.size))
    return starts, frag_pix[starts], lens


def _rect_chunks(seg_starts, seg_lens, cell_budget=1 << 21):
    """Group length-sorted segments into padded rectangles below a cell budget.

    Sorting by length keeps the padding tight when a few pixels see far more
    fragments than the rest; all rectangle operations are independent per
    row, so regrouping never changes any per-fragment value.
    """
    order = np.argsort(seg_lens, kind="stable")
    chunks = []
    i, S = 0, order.size
    lens_sorted = seg_lens[order]
    while i < S:
        K = int(lens_sorted[i])
        actual = K
        j = i + 1
        while j < S:
            K_new = int(lens_sorted[j])
            padded = (j + 1 - i) * K_new
            if padded > cell_budget or padded > 1.25 * (actual + K_new) + 4096:
                break
            actual += K_new
            K = K_new
            j += 1
        chunks.append((order[i:j], max(K, 1)))
        i = j
    return chunks


def _gather_rect(flat, idxc, mask, fill=0.0):
    out = flat[idxc]
    if fill == 0.0:
        out *= mask
    else:
        out = np.where(mask, out, fill)
    return out


def _rect_index(seg_starts, seg_lens, rows, K):
    idx = seg_starts[rows][:, None] + np.arange(K)[None, :]
    mask = np.arange(K)[None, :] < seg_lens[rows][:, None]
    idx[~mask] = 0
    return idx, mask


def _exclusive_cumsum(x):
    out = np.empty_like(x)
    out[:, 0] = 0
    np.cumsum(x[:, :-1], axis=1, out=out[:, 1:])
    return out


def _rev_exclusive_cumsum(x):
    rev = np.cumsum(x[:, ::-1], axis=1)[:, ::-1]
    out = np.empty_like(x)
    out[:, -1] = 0
    out[:, :-1] = rev[:, 1:]
    return out


def _stable_sigmoid(x):
    out = np.empty_like(x)
    neg = x < 0
    out[neg] = 1.0 / (1.0 + np.exp(x[neg]))
    e = np.exp(-x[~neg])
    out[~neg] = e / (1.0 + e)
    return out


def forward_frame(scene: GaussianScene, camera: Camera, opts: RenderOptions = RenderOptions(),
                  fgt: np.ndarray = None, act: SimilarityActivation = None) -> FrameCache:
    """Run the canonical fragment pipeline for one view.

    When fgt (H, W, d) and act are given, the dual-drive per-pixel partials
    are accumulated during the same traversal (no feature image is rendered).
    """
    dtype = opts.dtype
    hw = camera.width * camera.height
    geom = projection.camera_frame_geometry(scene, camera, dtype)
    rays, ray_norms = projection.camera_rays(camera, dtype)

    if len(scene) == 0:
        pix = np.empty(0, np.int64)
        prim = np.empty(0, np.int64)
    elif opts.engine == "tile":
        pix, prim = _candidates_tile(scene, camera, opts, geom)
    elif opts.engine == "direct":
        pix, prim = _candidates_direct(scene, camera, opts, geom)
    else:
        pix, prim = _candidates_naive(scene, camera, opts, geom)

    if pix.size:
        u, v, z, ndotd, valid = projection.intersect_pairs(
            geom, rays, ray_norms, pix, prim, near=opts.near,
            parallel_eps=opts.parallel_eps, scale_eps=opts.scale_eps,
            cutoff_sq=dtype(opts.cutoff_sigma) ** 2)
        pix, prim = pix[valid], prim[valid]
        u, v, z, ndotd = u[valid], v[valid], z[valid], ndotd[valid]
        key32 = depth_keys(geom.depths)[prim]
        if opts.traversal == "paper_literal":
            key32 = ~key32
        order = np.lexsort((prim, key32, pix))
        pix, prim = pix[order], prim[order]
        u, v, z, ndotd = u[order], v[order], z[order], ndotd[order]
    else:
        u = v = z = ndotd = np.empty(0, dtype)

    F = pix.size
    G = np.exp(dtype(-0.5) * (u * u + v * v))
    raw_alpha = geom.opacities[prim] * G
    alpha = np.minimum(raw_alpha, dtype(opts.alpha_max))
    alpha_clamped = raw_alpha > dtype(opts.alpha_max)

    seg_starts, seg_pix, seg_lens = _segments(pix)
    w = np.zeros(F, dtype)
    T_excl = np.ones(F, dtype)
    live = np.zeros(F, bool)
    wsum = np.zeros(hw, dtype)
    t_final = np.ones(hw, dtype)
    stop = dtype(opts.stop_transmittance)

    cache = FrameCache(
        camera=camera, geom=geom, rays=rays, ray_norms=ray_norms,
        frag_pix=pix, frag_prim=prim, u=u, v=v, z=z, ndotd=ndotd, G=G,
        alpha=alpha, alpha_clamped=alpha_clamped, w=w, T_excl=T_excl, live=live,
        sigma=np.zeros(F, dtype), phi=np.zeros(F, dtype),
        seg_starts=seg_starts, seg_pix=seg_pix, seg_lens=seg_lens,
        wsum=wsum, t_final=t_final, opts=opts, act=act,
    )

    for rows, idx, mask in cache.rect_blocks():
        a = _gather_rect(alpha, idx, mask)
        om = 1.0 - a
        T_inc = np.multiply.accumulate(om, axis=1)
        T_exc = np.empty_like(T_inc)
        T_exc[:, 0] = 1.0
        T_exc[:, 1:] = T_inc[:, :-1]
        lv = (T_exc >= stop) & mask
        ww = np.where(lv, a * T_exc, dtype(0.0))
        flat_sel = idx[mask]
        w[flat_sel] = ww[mask]
        T_excl[flat_sel] = T_exc[mask]
        live[flat_sel] = lv[mask]
        n_live = np.sum(lv, axis=1)
        t_fin = np.where(n_live > 0,
                         T_inc[np.arange(rows.size), np.maximum(n_live - 1, 0)],
                         dtype(1.0))
        t_final[seg_pix[rows]] = t_fin
    if F:
        wsum[seg_pix] = np.add.reduceat(w, seg_starts)

    if fgt is not None:
        if act is None:
            act = SimilarityActivation()
            cache.act = act
        d = fgt.shape[2]
        fgt_flat = np.ascontiguousarray(fgt.reshape(hw, d).astype(dtype))
        cache.fgt_flat = fgt_flat
        feats = scene.features.astype(dtype)
        phi = np.zeros(F, dtype)
        for ch in range(d):
            phi += feats[prim, ch] * fgt_flat[pix, ch]
        np.clip(phi, -1.0, 1.0, out=phi)
        sigma = _stable_sigmoid(dtype(act.k) * (phi - dtype(act.lam)))
        cache.phi, cache.sigma = phi, sigma
        lgt_map = np.zeros(hw, dtype)
        lcf_map = np.zeros(hw, dtype)
        if F:
            lgt_map[seg_pix] = np.add.reduceat(w * sigma, seg_starts)
            lcf_frag = _lcf_fragments(cache, feats)
            lcf_map[seg_pix] = np.add.reduceat(lcf_frag, seg_starts)
        cache.lgt_map, cache.lcf_map = lgt_map, lcf_map

    return cache


def _lcf_fragments(cache: FrameCache, feats) -> np.ndarray:
    """Per-fragment clustering terms sigma*w*(W_far - F_far . f), far-to-near.

    In the standard traversal the fragment axis runs near to far, so the
    far-side cumulative sums are reversed-exclusive; in paper_literal the axis
    itself runs far to near and they are plain exclusive prefix sums.
    """
    opts = cache.opts
    far_is_prefix = opts.traversal == "paper_literal"
    excl = _exclusive_cumsum if far_is_prefix else _rev_exclusive_cumsum
    out = np.zeros(cache.n_fragments, cache.w.dtype)
    cf_sigma = cf_polarity(cache)
    frag_feats = feats[cache.frag_prim]
    cache._far_sums = []
    for rows, idx, mask in cache.rect_blocks():
        wr = _gather_rect(cache.w, idx, mask)
        W_far = excl(wr)
        dot = np.zeros_like(wr)
        for c0, c1 in _channel_groups(idx.size, feats.shape[1]):
            f_r = frag_feats[:, c0:c1][idx] * mask[:, :, None]
            dot += np.sum(excl(wr[:, :, None] * f_r) * f_r, axis=2)
        sig = _gather_rect(cf_sigma, idx, mask)
        term = sig * wr * (W_far - dot)
        out[idx[mask]] = term[mask]
        cache._far_sums.append((W_far, dot))
    return out


def _channel_groups(cells: int, d: int, budget: int = 1 << 23):
    group = max(1, min(d, budget // max(cells, 1)))
    return [(c, min(c + group, d)) for c in range(0, d, group)]


def cf_polarity(cache: FrameCache) -> np.ndarray:
    """Polarity used inside the clustering term; optionally inverted."""
    if cache.opts.invert_polarity_cf:
        return 1.0 - cache.sigma
    return cache.sigma


def render(scene: GaussianScene, camera: Camera, mode: str = "rgb",
           opts: RenderOptions = RenderOptions(), fgt: np.ndarray = None,
           act: SimilarityActivation = None):
    """Render one view. Modes: rgb, depth, normal, feature, weight.

    Feature mode accumulates the unnormalized per-pixel sum of w_i * f_i and
    is an evaluation-only path; the training forward never renders features.
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode: {mode!r}")
    cache = forward_frame(scene, camera, opts, fgt=fgt, act=act)
    return render_from_cache(scene, cache, mode)


def render_from_cache(scene: GaussianScene, cache: FrameCache, mode: str):
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode: {mode!r}")
    opts = cache.opts
    cam = cache.camera
    hw = cam.width * cam.height
    dtype = cache.w.dtype.type
    F = cache.n_fragments
    if mode == "weight":
        return cache.wsum.reshape(cam.height, cam.width).copy()
    if mode == "rgb":
        img = np.zeros((hw, 3), dtype)
        colors = scene.colors.astype(dtype)
        if F:
            for ch in range(3):
                img[cache.seg_pix, ch] = np.add.reduceat(
                    cache.w * colors[cache.frag_prim, ch], cache.seg_starts)
        bg = np.asarray(opts.background, dtype)
        img += cache.t_final[:, None] * bg[None, :]
        return img.reshape(cam.height, cam.width, 3)
    if mode == "depth":
        acc = np.zeros(hw, dtype)
        if F:
            acc[cache.seg_pix] = np.add.reduceat(cache.w * cache.z, cache.seg_starts)
        out = acc / np.maximum(cache.wsum, dtype(opts.weight_eps))
        return out.reshape(cam.height, cam.width)
    if mode == "normal":
        acc = np.zeros((hw, 3), dtype)
        tw = cache.geom.tw_world
        if F:
            for ch in range(3):
                acc[cache.seg_pix, ch] = np.add.reduceat(
                    cache.w * tw[cache.frag_prim, ch], cache.seg_starts)
        nrm = np.sqrt(np.sum(acc * acc, axis=1))
        ok = (cache.wsum >= dtype(opts.weight_eps)) & (nrm > 0)
        acc[ok] /= nrm[ok][:, None]
        acc[~ok] = 0.0
        return acc.reshape(cam.height, cam.width, 3)
    # feature
    d = scene.feature_dim
    out = np.zeros((hw, d), dtype)
    feats = scene.features.astype(dtype)
    if F:
        for ch in range(d):
            out[cache.seg_pix, ch] = np.add.reduceat(
                cache.w * feats[cache.frag_prim, ch], cache.seg_starts)
    return out.reshape(cam.height, cam.width, d)


@dataclass
class TrainingForward:
    image: np.ndarray    # (H, W, 3) rendered color
    lgt: float           # image mean of the per-pixel external potential
    lcf: float           # image mean of the per-pixel clustering term
    cache: FrameCache


def render_training(scene: GaussianScene, camera: Camera, fgt: np.ndarray,
                    act: SimilarityActivation, opts: RenderOptions = RenderOptions()) -> TrainingForward:
    """Training forward pass: color image plus dual-drive partials and cache."""
    cache = forward_frame(scene, camera, opts, fgt=fgt, act=act)
    image = render_from_cache(scene, cache, "rgb")
    hw = camera.width * camera.height
    return TrainingForward(
        image=image,
        lgt=float(np.sum(cache.lgt_map, dtype=np.float64) / hw),
        lcf=float(np.sum(cache.lcf_map, dtype=np.float64) / hw),
        cache=cache,
    )
