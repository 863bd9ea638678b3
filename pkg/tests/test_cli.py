import json
import hashlib

import numpy as np
import pytest

from fhgs import cli, ingestion
from fhgs.cli import build_parser, main


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("clidata") / "scene"
    rc = main(["synth", "--out", str(out), "--objects", "2", "--feature-dim", "8",
               "--views", "3", "--size", "40x40", "--seed", "5",
               "--points-per-object", "40"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def cli_checkpoint(cli_dataset, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("cliout") / "model.ckpt"
    rc = main(["train", "--scene", str(cli_dataset), "--iters", "4", "--out", str(ckpt),
               "--deterministic", "--seed", "3"])
    assert rc == 0
    return ckpt


def _dir_hash(path):
    digest = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            digest.update(f.name.encode())
            digest.update(f.read_bytes())
    return digest.hexdigest()


def test_synth_same_seed_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--out", str(out), "--views", "3", "--size", "24x24",
                     "--points-per-object", "20", "--seed", "9"]) == 0
    assert _dir_hash(a) == _dir_hash(b)


def test_synth_loads_clean(cli_dataset):
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        init = ingestion.load_dataset(cli_dataset)
    assert len(init.cameras) == 3


def test_synth_rejects_single_object(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "--objects", "1"])
    assert rc == 2
    assert "objects" in capsys.readouterr().err


def test_synth_refuses_overwrite(tmp_path):
    out = tmp_path / "dup"
    assert main(["synth", "--out", str(out), "--views", "3", "--size", "16x16",
                 "--points-per-object", "10"]) == 0
    assert main(["synth", "--out", str(out), "--views", "3", "--size", "16x16",
                 "--points-per-object", "10"]) == 2
    assert main(["synth", "--out", str(out), "--views", "3", "--size", "16x16",
                 "--points-per-object", "10", "--force"]) == 0


def test_train_writes_checkpoint_and_log(cli_dataset, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    log = tmp_path / "m.csv"
    rc = main(["train", "--scene", str(cli_dataset), "--iters", "3", "--out", str(ckpt),
               "--log", str(log), "--deterministic"])
    assert rc == 0
    scene = ingestion.load_checkpoint(ckpt)
    assert len(scene) > 0
    lines = log.read_text().splitlines()
    assert lines[0] == "iter,l_rgb,l_gt,l_cf,total,psnr,fe,fl1,n_primitives,elapsed_s"
    assert len(lines) == 4


def test_train_deterministic_identical_logs(cli_dataset, tmp_path):
    logs = []
    for name in ("1", "2"):
        log = tmp_path / f"log{name}.csv"
        rc = main(["train", "--scene", str(cli_dataset), "--iters", "3",
                   "--out", str(tmp_path / f"c{name}.ckpt"), "--log", str(log),
                   "--deterministic", "--seed", "21"])
        assert rc == 0
        logs.append(log.read_text())
    assert logs[0] == logs[1]


def test_train_baseline_lambdas(cli_dataset, tmp_path):
    rc = main(["train", "--scene", str(cli_dataset), "--iters", "2", "--lambda1", "0",
               "--lambda2", "0", "--out", str(tmp_path / "base.ckpt"), "--deterministic"])
    assert rc == 0


def test_train_invalid_dataset_exit_2(tmp_path, capsys):
    rc = main(["train", "--scene", str(tmp_path / "nope"), "--iters", "1",
               "--out", str(tmp_path / "x.ckpt")])
    assert rc == 2


def test_render_rgb_and_weight(cli_dataset, cli_checkpoint, tmp_path):
    out = tmp_path / "view.ppm"
    rc = main(["render", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--view", "0", "--mode", "rgb", "--out", str(out)])
    assert rc == 0
    img = ingestion.read_ppm(out)
    assert img.shape == (40, 40, 3)
    wout = tmp_path / "w.fmap"
    rc = main(["render", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--view", "0", "--mode", "weight", "--out", str(wout)])
    assert rc == 0
    w = ingestion.read_fmap(wout)
    assert np.all(w >= 0) and np.all(w <= 1.0 + 1e-6)


def test_render_feature_channels(cli_dataset, cli_checkpoint, tmp_path):
    out = tmp_path / "feat.ppm"
    rc = main(["render", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--view", "1", "--mode", "feature", "--channels", "1,2,3",
               "--out", str(out)])
    assert rc == 0
    assert ingestion.read_ppm(out).shape == (40, 40, 3)
    raw = tmp_path / "feat.fmap"
    rc = main(["render", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--view", "1", "--mode", "feature", "--out", str(raw)])
    assert rc == 0
    assert ingestion.read_fmap(raw).shape == (40, 40, 8)


def test_render_bad_channels(cli_dataset, cli_checkpoint, tmp_path):
    rc = main(["render", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--view", "0", "--mode", "feature", "--channels", "1,2,99",
               "--out", str(tmp_path / "x.ppm")])
    assert rc == 2


def test_render_unknown_view(cli_dataset, cli_checkpoint, tmp_path):
    rc = main(["render", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--view", "42", "--mode", "rgb", "--out", str(tmp_path / "x.ppm")])
    assert rc == 2


def test_eval_report(cli_dataset, cli_checkpoint, tmp_path):
    out = tmp_path / "report.json"
    rc = main(["eval", "--checkpoint", str(cli_checkpoint), "--scene", str(cli_dataset),
               "--out", str(out)])
    assert rc == 0
    payload = json.loads(out.read_text())
    assert len(payload["views"]) == 3
    assert out.with_suffix(".csv").exists()


def test_eval_missing_checkpoint(cli_dataset, tmp_path):
    rc = main(["eval", "--checkpoint", str(tmp_path / "ghost.ckpt"),
               "--scene", str(cli_dataset), "--out", str(tmp_path / "r.json")])
    assert rc == 2


def test_check_grad_passes(cli_dataset, capsys):
    rc = main(["check-grad", "--scene", str(cli_dataset), "--n-probes", "12",
               "--tolerance", "1e-3", "--loss", "all", "--seed", "4"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS" in out


def test_check_grad_zero_probes(cli_dataset):
    assert main(["check-grad", "--scene", str(cli_dataset), "--n-probes", "0"]) == 2


def test_config_file_flag_precedence(cli_dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iters": 2, "seed": 77}))
    log1 = tmp_path / "a.csv"
    rc = main(["train", "--scene", str(cli_dataset), "--config", str(cfg),
               "--out", str(tmp_path / "a.ckpt"), "--log", str(log1), "--deterministic"])
    assert rc == 0
    assert len(log1.read_text().splitlines()) == 3  # header + 2 iters from config
    log2 = tmp_path / "b.csv"
    rc = main(["train", "--scene", str(cli_dataset), "--config", str(cfg), "--iters", "1",
               "--out", str(tmp_path / "b.ckpt"), "--log", str(log2), "--deterministic"])
    assert rc == 0
    assert len(log2.read_text().splitlines()) == 2  # explicit flag wins


def test_config_file_unknown_key(cli_dataset, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"warp_speed": 9}))
    rc = main(["train", "--scene", str(cli_dataset), "--config", str(cfg),
               "--out", str(tmp_path / "x.ckpt")])
    assert rc == 2


def test_help_documents_every_flag_with_default():
    parser, cmds = build_parser()
    for name, cmd in cmds.items():
        text = cmd.parser.format_help()
        for dest in cmd.defaults:
            flag = "--" + dest.replace("_", "-")
            assert flag in text, (name, flag)
        assert text.count("default:") + text.count("required") >= len(cmd.defaults)


def test_unknown_flag_exits_2(cli_dataset, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", str(tmp_path / "x"), "--bogus", "1"])
    assert e.value.code == 2
