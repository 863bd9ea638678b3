"""Evaluation metrics (PSNR, FE, FL1), per-view aggregation, report files.

FE is defined as the mean over all pixels and views of the per-pixel external
potential, computed by the same traversal code the trainer uses; comparisons
against it are therefore meaningful only in relative terms.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dual_drive import SimilarityActivation
from .rasterizer import RenderOptions, forward_frame, render_from_cache
from .scene import GaussianScene, SceneInit

PSNR_CAP = 99.0


def psnr(rendered: np.ndarray, gt: np.ndarray) -> float:
    """10 * log10(1 / MSE) over all pixels and channels, capped at 99 dB."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    mse = float(np.mean((rendered - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def fl1(feature_image: np.ndarray, target: np.ndarray, normalize: bool = False) -> float:
    """Mean absolute error per channel between rendered and target features.

    The rendered features are the raw weighted sums; `normalize` rescales each
    rendered pixel to unit norm first (off by default).
    """
    feature_image = np.asarray(feature_image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if feature_image.shape != target.shape:
        raise ValueError(f"feature shape mismatch: {feature_image.shape} vs {target.shape}")
    if normalize:
        norms = np.linalg.norm(feature_image, axis=-1, keepdims=True)
        feature_image = feature_image / np.where(norms > 0, norms, 1.0)
    return float(np.mean(np.abs(feature_image - target)))


def view_fe(scene: GaussianScene, camera, fgt, opts: RenderOptions = None,
            act: SimilarityActivation = None) -> float:
    """Mean per-pixel external potential of one view, training code path."""
    opts = opts or RenderOptions()
    act = act or SimilarityActivation()
    cache = forward_frame(scene, camera, opts, fgt=np.asarray(fgt, opts.dtype), act=act)
    return float(np.sum(cache.lgt_map, dtype=np.float64) / (camera.width * camera.height))


def fe(scene: GaussianScene, init: SceneInit, opts: RenderOptions = None,
       act: SimilarityActivation = None) -> float:
    """Dataset FE: mean of view_fe over every view."""
    vals = [view_fe(scene, cam, init.feature_maps[cam.id].data, opts, act)
            for cam in init.cameras]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class EvalReport:
    views: list = field(default_factory=list)   # dicts: view_id, psnr, fe, fl1
    mean_psnr: float = None
    mean_fe: float = None
    mean_fl1: float = None
    n_primitives: int = 0
    elapsed_s: float = 0.0

    def finalize(self):
        if self.views:
            self.mean_psnr = float(np.mean([v["psnr"] for v in self.views]))
            self.mean_fe = float(np.mean([v["fe"] for v in self.views]))
            self.mean_fl1 = float(np.mean([v["fl1"] for v in self.views]))
        else:
            self.mean_psnr = self.mean_fe = self.mean_fl1 = None
        return self


def evaluate(scene: GaussianScene, init: SceneInit, opts: RenderOptions = None,
             act: SimilarityActivation = None, fl1_normalize: bool = False,
             threads: int = 1) -> EvalReport:
    """PSNR / FE / FL1 over every view; one traversal per view feeds all three."""
    opts = opts or RenderOptions()
    act = act or SimilarityActivation()
    t0 = time.perf_counter()

    def one(cam):
        fgt = init.feature_maps[cam.id].data.astype(opts.dtype)
        cache = forward_frame(scene, cam, opts, fgt=fgt, act=act)
        img = render_from_cache(scene, cache, "rgb")
        feat = render_from_cache(scene, cache, "feature")
        hw = cam.width * cam.height
        return {
            "view_id": cam.id,
            "psnr": psnr(img, init.images[cam.id]),
            "fe": float(np.sum(cache.lgt_map, dtype=np.float64) / hw),
            "fl1": fl1(feat, fgt, normalize=fl1_normalize),
        }

    if threads > 1 and len(init.cameras) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            views = list(pool.map(one, init.cameras))
    else:
        views = [one(cam) for cam in init.cameras]
    report = EvalReport(views=views, n_primitives=len(scene))
    report.elapsed_s = time.perf_counter() - t0
    return report.finalize()


def emit_report(report: EvalReport, path):
    """Write the report as JSON plus a sibling CSV with a fixed header.

    Numbers serialize via repr so a parse recovers them exactly.
    """
    path = Path(path)
    payload = {
        "views": [
            {"view_id": v["view_id"], "psnr": v["psnr"], "fe": v["fe"], "fl1": v["fl1"]}
            for v in report.views
        ],
        "mean_psnr": report.mean_psnr,
        "mean_fe": report.mean_fe,
        "mean_fl1": report.mean_fl1,
        "n_primitives": report.n_primitives,
        "elapsed_s": report.elapsed_s,
    }
    path.write_text(json.dumps(payload, indent=1))
    csv_path = path.with_suffix(".csv")
    lines = ["view_id,psnr,fe,fl1"]
    for v in report.views:
        lines.append(f"{v['view_id']},{v['psnr']!r},{v['fe']!r},{v['fl1']!r}")
    csv_path.write_text("\n".join(lines) + "\n")
    return path, csv_path


def load_report(path) -> EvalReport:
    payload = json.loads(Path(path).read_text())
    report = EvalReport(
        views=payload["views"],
        mean_psnr=payload["mean_psnr"],
        mean_fe=payload["mean_fe"],
        mean_fl1=payload["mean_fl1"],
        n_primitives=payload["n_primitives"],
        elapsed_s=payload["elapsed_s"],
    )
    return report
