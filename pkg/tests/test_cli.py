import hashlib

import numpy as np
import pytest

from dvan import checkpoint, pnm
from dvan.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from dvan.config import RunConfig
from dvan.training import EpochRecord

# a few seconds per command: small images, two scales, tiny backbone
TINY = ["--image_size", "48", "--num_classes", "4", "--glyph_size", "5", "--placement_jitter", "3",
        "--train_per_class", "6", "--test_per_class", "4", "--short_edge", "48",
        "--scales", "40:8,28:10", "--canvas_size", "16", "--channels", "4,6", "--hidden", "8",
        "--epochs", "1,1,1", "--batch_size", "8", "--dtype", "float64", "--overlap_sample", "8"]


def run(*args):
    return main([str(a) for a in args])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "a", *TINY) == EXIT_OK
    assert run("gen-data", "--out", tmp_path / "b", *TINY) == EXIT_OK
    lines = (tmp_path / "a" / "train_manifest.txt").read_text().splitlines()
    assert len(lines) == 24 and len((tmp_path / "a" / "test_manifest.txt").read_text().splitlines()) == 16
    for name in ("train_manifest.txt", "train/00003.ppm", "test_glyph_boxes.csv"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)
    assert (tmp_path / "a" / "config.txt").exists()


def test_bad_config_exits_before_writing(tmp_path, capsys):
    out = tmp_path / "never"
    assert run("gen-data", "--out", out, "--num_classes", "0") == EXIT_CONFIG
    assert run("train", "--out", out, "--no_such_key", "1") == EXIT_CONFIG
    assert run("train", "--out", out, "--epochs", "a,b,c") == EXIT_CONFIG
    assert run("ablate", "--out", out, "--variants", "dvan,resnet") == EXIT_CONFIG
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_missing_file_is_runtime_error(tmp_path):
    assert run("canvases", tmp_path / "missing.ppm", "--out", tmp_path / "c") == EXIT_RUNTIME


def test_canvases_paper_plan(tmp_path):
    img = np.random.default_rng(0).uniform(size=(3, 256, 256))
    pnm.write_image(tmp_path / "img.ppm", img)
    args = ["canvases", tmp_path / "img.ppm", "--short_edge", "256", "--scales", "224:32,168:44,112:48",
            "--canvas_size", "32", "--image_size", "256"]
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    files = sorted((tmp_path / "a").glob("canvas_*.ppm"))
    assert len(files) == 32
    rows = (tmp_path / "a" / "canvases.csv").read_text().splitlines()[1:]
    for row in rows:
        x0, y0, x1, y1 = map(int, row.split(",")[3:])
        assert 0 <= x0 < x1 <= 256 and 0 <= y0 < y1 <= 256
    assert all(digest(f) == digest(tmp_path / "b" / f.name) for f in files)


def test_train_eval_resume(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--out", out, *TINY) == EXIT_OK
    ckpt = out / "checkpoint.dvan"
    log = out / "train_log.csv"
    recs = [EpochRecord.parse(x) for x in log.read_text().splitlines()[1:]]
    assert [(r.stage, r.epoch) for r in recs] == [(1, 1), (2, 1), (3, 1)]

    assert run("eval", "--out", out, "--checkpoint", ckpt, "--split", "train", *TINY) == EXIT_OK
    report = dict(line.split("=", 1) for line in (out / "eval_train.txt").read_text().splitlines())
    assert abs(float(report["accuracy"]) - recs[-1].accuracy) <= 1e-6
    assert {"mean_Ldiv", "mean_overlap", "overlap_violation_rate"} <= report.keys()

    # same seed again: identical checkpoint
    assert run("train", "--out", tmp_path / "again", *TINY) == EXIT_OK
    assert digest(ckpt) == digest(tmp_path / "again" / "checkpoint.dvan")

    # resume with more stage-3 epochs continues the numbering
    more = [a if a != "1,1,1" else "1,1,3" for a in TINY]
    assert run("train", "--out", out, "--resume", ckpt, *more) == EXIT_OK
    recs = [EpochRecord.parse(x) for x in log.read_text().splitlines()[1:]]
    assert [(r.stage, r.epoch) for r in recs][-3:] == [(3, 1), (3, 2), (3, 3)]
    assert checkpoint.load(ckpt)["meta/epoch"] == 3


def test_attmaps(tmp_path):
    out = tmp_path / "run"
    assert run("train", "--out", out, *TINY) == EXIT_OK
    assert run("gen-data", "--out", tmp_path / "data", *TINY) == EXIT_OK
    image = tmp_path / "data" / "test" / "00000.ppm"
    assert run("attmaps", "--out", tmp_path / "maps", "--checkpoint", out / "checkpoint.dvan",
               "--image", image, *TINY) == EXIT_OK
    maps = sorted((tmp_path / "maps").glob("attention_*.pgm"))
    assert len(maps) == 15
    raw = np.loadtxt(tmp_path / "maps" / "attention.txt")
    assert raw.shape == (15, 16)
    np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-6)
    first = pnm.read_image(maps[0])
    assert first.shape == (1, 40, 40) and first.max() == 1.0
    assert run("attmaps", "--out", tmp_path / "m2", "--checkpoint", out / "checkpoint.dvan",
               "--image", image, "--variant", "avg", *TINY) == EXIT_CONFIG


def test_ablate_variants(tmp_path, capsys):
    assert run("ablate", "--out", tmp_path, "--variants", "single,multicanvas,avg,max,dvan", *TINY) == EXIT_OK
    rows = (tmp_path / "ablation_variants.csv").read_text().splitlines()
    assert len(rows) == 6 and rows[0].startswith("sweep,setting,seed,accuracy")
    table = capsys.readouterr().out
    for name in ("single", "multicanvas", "avg", "max", "dvan"):
        assert name in table


def test_ablate_lambda_and_scales(tmp_path):
    assert run("ablate", "--out", tmp_path, "--sweep", "lambda", "--lambdas", "0,0.5,1,2,10", *TINY) == EXIT_OK
    assert len((tmp_path / "ablation_lambda.csv").read_text().splitlines()) == 6
    assert run("ablate", "--out", tmp_path, "--sweep", "scales", *TINY) == EXIT_OK
    settings = [r.split(",")[1] for r in (tmp_path / "ablation_scales.csv").read_text().splitlines()[1:]]
    assert settings == ["scales=1", "scales=2"]


def test_gradcheck_passes(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path) == EXIT_OK
    lines = (tmp_path / "gradcheck.txt").read_text().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_gradcheck_catches_a_broken_backward(tmp_path, monkeypatch, capsys):
    from dvan import tensor

    def wrong(ctx, g):
        (s,) = ctx.saved
        return (g * s,)

    monkeypatch.setattr(tensor.Sigmoid, "backward", staticmethod(wrong))
    assert run("gradcheck", "--out", tmp_path) == EXIT_CHECK
    text = (tmp_path / "gradcheck.txt").read_text()
    assert "FAIL sigmoid" in text and "FAIL tiny_model" in text


def test_config_file_roundtrip(tmp_path):
    cfg = RunConfig.load(None, ["scales=84:12,63:16", "epochs=1,2,3", "include_center=no", "lam=2.5"])
    path = tmp_path / "cfg.txt"
    path.write_text("# comment\n" + cfg.dumps())
    back = RunConfig.load(path)
    assert back == cfg
    assert back.scales == ((84, 12), (63, 16)) and back.include_center is False
    path.write_text("lam\n")
    with pytest.raises(Exception):
        RunConfig.load(path)
