"""Command-line entry point: synth / train / render / eval / check-grad.

Exit codes: 0 success, 1 internal failure (including a failed gradient
check), 2 usage or input error. Every flag can also be supplied through a
JSON config file (`--config`); explicit flags win. FHGS_THREADS serves as the
fallback for --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import backward, ingestion, metrics, trainer
from .rasterizer import RENDER_MODES, RenderOptions, render


class UsageError(ValueError):
    pass


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("FHGS_THREADS", "1")))
    except ValueError:
        return 1


class _Command:
    """A subcommand whose flag defaults live in one dict, so the config file
    and the help text stay consistent."""

    def __init__(self, sub, name: str, help_text: str):
        self.name = name
        self.defaults = {}
        self.parser = sub.add_parser(name, help=help_text, description=help_text)
        self.parser.add_argument("--config", type=str, default=None,
                                 help="JSON file whose keys mirror the flags; flags win (default: none)")

    def opt(self, flag: str, default, type_=None, help_="", required=False, choices=None,
            is_flag=False):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        shown = "required" if required else f"default: {default}"
        kwargs = {"help": f"{help_} ({shown})"}
        if is_flag:
            self.parser.add_argument(flag, action="store_const", const=True,
                                     default=None, **kwargs)
        else:
            self.parser.add_argument(flag, type=type_ or type(default), default=None,
                                     required=required, choices=choices, **kwargs)
        return self

    def resolve(self, args) -> dict:
        values = dict(self.defaults)
        if args.config:
            try:
                overrides = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise UsageError(f"bad config file: {e}") from e
            unknown = set(overrides) - set(values)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            values.update(overrides)
        for key in values:
            given = getattr(args, key, None)
            if given is not None:
                values[key] = given
        return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fhgs",
        description="Planar gaussian splatting with a frozen-feature dual-drive loss.")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    c = _Command(sub, "synth", "Generate an analytic sphere dataset.")
    c.opt("--out", None, str, "output dataset directory", required=True)
    c.opt("--objects", 2, int, "number of spheres (>= 2)")
    c.opt("--feature-dim", 16, int, "feature channels")
    c.opt("--views", 12, int, "cameras on the ring (>= 3)")
    c.opt("--size", "128x128", str, "image size WxH")
    c.opt("--seed", 0, int, "generator seed")
    c.opt("--points-per-object", 350, int, "surface samples per object")
    c.opt("--force", False, is_flag=True, help_="overwrite a non-empty output dir")
    cmds["synth"] = c

    c = _Command(sub, "train", "Optimize a scene against a dataset.")
    c.opt("--scene", None, str, "dataset directory", required=True)
    c.opt("--iters", 10000, int, "iteration count")
    c.opt("--lambda1", 1.0, float, "external potential weight")
    c.opt("--lambda2", 0.1, float, "clustering weight")
    c.opt("--k", 20.0, float, "polarity slope")
    c.opt("--sim-threshold", 0.5, float, "polarity similarity threshold")
    c.opt("--seed", 0, int, "run seed")
    c.opt("--deterministic", False, is_flag=True,
          help_="fixed-order reductions and zeroed elapsed column")
    c.opt("--traversal", "standard", str, "compositing order", choices=["standard", "paper_literal"])
    c.opt("--out", None, str, "checkpoint path", required=True)
    c.opt("--log", None, str, "metric log CSV path (default: none)")
    c.opt("--threads", _default_threads(), int, "worker cap (env FHGS_THREADS)")
    c.opt("--pure-l1", False, is_flag=True, help_="drop the D-SSIM term from the photometric loss")
    c.opt("--invert-polarity-cf", False, is_flag=True,
          help_="experiment: flip polarity inside the clustering term only")
    cmds["train"] = c

    c = _Command(sub, "render", "Render a view from a checkpoint.")
    c.opt("--checkpoint", None, str, "checkpoint path", required=True)
    c.opt("--scene", None, str, "dataset directory", required=True)
    c.opt("--view", None, int, "view id", required=True)
    c.opt("--mode", "rgb", str, "output channel", choices=list(RENDER_MODES))
    c.opt("--out", None, str, "output file (.ppm for rgb, .fmap otherwise)", required=True)
    c.opt("--channels", None, str,
          "feature mode: three comma-separated channels mapped to RGB (default: raw fmap)")
    c.opt("--traversal", "standard", str, "compositing order", choices=["standard", "paper_literal"])
    cmds["render"] = c

    c = _Command(sub, "eval", "Score a checkpoint over every view.")
    c.opt("--checkpoint", None, str, "checkpoint path", required=True)
    c.opt("--scene", None, str, "dataset directory", required=True)
    c.opt("--out", None, str, "report JSON path (CSV written alongside)", required=True)
    c.opt("--fl1-normalize", False, is_flag=True, help_="normalize rendered features before FL1")
    c.opt("--threads", _default_threads(), int, "worker cap (env FHGS_THREADS)")
    cmds["eval"] = c

    c = _Command(sub, "check-grad", "Finite-difference validation of the backward pass.")
    c.opt("--scene", None, str, "dataset directory", required=True)
    c.opt("--n-probes", 200, int, "number of (parameter, primitive) probes (> 0)")
    c.opt("--tolerance", 1e-3, float, "max allowed relative error")
    c.opt("--loss", "all", str, "loss selector", choices=["rgb", "gt", "cf", "all"])
    c.opt("--seed", 0, int, "probe seed")
    c.opt("--lambda1", 1.0, float, "external potential weight (loss=all)")
    c.opt("--lambda2", 0.1, float, "clustering weight (loss=all)")
    c.opt("--traversal", "standard", str, "compositing order", choices=["standard", "paper_literal"])
    cmds["check-grad"] = c

    return parser, cmds


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as e:
        raise UsageError(f"bad --size {text!r}, expected WxH") from e


def _load_scene_dir(path) -> "ingestion.SceneInit":
    return ingestion.load_dataset(path)


def cmd_synth(v) -> int:
    if v["objects"] < 2:
        raise UsageError("--objects must be >= 2")
    if v["views"] < 3:
        raise UsageError("--views must be >= 3")
    width, height = _parse_size(v["size"])
    try:
        manifest = ingestion.synth_scene(
            v["out"], n_objects=v["objects"], feature_dim=v["feature_dim"],
            n_views=v["views"], width=width, height=height, seed=v["seed"],
            points_per_object=v["points_per_object"], force=v["force"])
    except FileExistsError as e:
        raise UsageError(str(e)) from e
    print(json.dumps(manifest))
    return 0


def cmd_train(v) -> int:
    init = _load_scene_dir(v["scene"])
    config = trainer.TrainConfig(
        iters=v["iters"], lambda1=v["lambda1"], lambda2=v["lambda2"],
        slope=v["k"], sim_threshold=v["sim_threshold"], seed=v["seed"],
        deterministic=v["deterministic"], traversal=v["traversal"],
        pure_l1=v["pure_l1"], invert_polarity_cf=v["invert_polarity_cf"])
    result = trainer.train(init, config, log_path=v["log"])
    ingestion.save_checkpoint(result.scene, v["out"])
    if result.aborted:
        print(f"aborted: {result.message}", file=sys.stderr)
        return 1
    last = result.rows[-1] if result.rows else {}
    print(json.dumps({"iters": v["iters"], "n_primitives": len(result.scene),
                      "final_psnr": last.get("psnr"), "final_total": last.get("total")}))
    return 0


def cmd_render(v) -> int:
    init = _load_scene_dir(v["scene"])
    scene = ingestion.load_checkpoint(v["checkpoint"])
    cams = {c.id: c for c in init.cameras}
    if v["view"] not in cams:
        raise UsageError(f"unknown view {v['view']}")
    opts = RenderOptions(traversal=v["traversal"])
    img = render(scene, cams[v["view"]], v["mode"], opts)
    out = Path(v["out"])
    if v["mode"] == "rgb":
        ingestion.write_ppm(out, img)
    elif v["mode"] == "feature" and v["channels"]:
        try:
            chans = [int(c) for c in v["channels"].split(",")]
        except ValueError as e:
            raise UsageError(f"bad --channels {v['channels']!r}") from e
        if len(chans) != 3 or any(not 0 <= c < scene.feature_dim for c in chans):
            raise UsageError(f"--channels needs three indices in [0, {scene.feature_dim})")
        vis = np.clip(0.5 + 0.5 * img[:, :, chans], 0.0, 1.0)
        ingestion.write_ppm(out, vis)
    else:
        ingestion.write_fmap(out, img)
    print(str(out))
    return 0


def cmd_eval(v) -> int:
    if not Path(v["checkpoint"]).exists():
        raise UsageError(f"missing checkpoint: {v['checkpoint']}")
    init = _load_scene_dir(v["scene"])
    scene = ingestion.load_checkpoint(v["checkpoint"])
    if scene.feature_dim != next(iter(init.feature_maps.values())).channels:
        raise UsageError("checkpoint feature dim does not match the dataset")
    report = metrics.evaluate(scene, init, fl1_normalize=v["fl1_normalize"],
                              threads=v["threads"])
    json_path, csv_path = metrics.emit_report(report, v["out"])
    print(json.dumps({"report": str(json_path), "csv": str(csv_path),
                      "mean_psnr": report.mean_psnr, "mean_fe": report.mean_fe,
                      "mean_fl1": report.mean_fl1}))
    return 0


def cmd_check_grad(v) -> int:
    if v["n_probes"] <= 0:
        raise UsageError("--n-probes must be > 0")
    init = _load_scene_dir(v["scene"])
    scene, _, _ = ingestion.build_initial_scene(init, seed=v["seed"])
    views = [(cam, init.images[cam.id].astype(np.float64),
              init.feature_maps[cam.id].data.astype(np.float64))
             for cam in init.cameras]
    opts = RenderOptions(dtype=np.float64, traversal=v["traversal"])
    report = backward.fd_check(
        scene, views, v["loss"], n_probes=v["n_probes"], seed=v["seed"],
        lambda1=v["lambda1"], lambda2=v["lambda2"], opts=opts)
    print(report.summary())
    ok = report.passed(v["tolerance"])
    print(f"check-grad: {'PASS' if ok else 'FAIL'} at tolerance {v['tolerance']}")
    return 0 if ok else 1


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "check-grad": cmd_check_grad,
}


def main(argv=None) -> int:
    parser, cmds = build_parser()
    args = parser.parse_args(argv)
    try:
        values = cmds[args.command].resolve(args)
        return _HANDLERS[args.command](values)
    except (UsageError, ingestion.DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # internal failure contract
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1

if __name__ == "__main__":
    sys.exit(main())
