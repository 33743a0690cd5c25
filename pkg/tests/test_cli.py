import json
from pathlib import Path

import numpy as np
import pytest

from mtlnet import cli
from mtlnet import data as D
from mtlnet import model as M
from mtlnet.cli import dispatch

SCENE = {"seed": 7, "size": [64, 64]}
SPEC = {"input_size": [64, 64], "width_mult": 0.0625}


def _write(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc))
    return path


def _files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A dataset and a checkpoint from a few training steps."""
    root = tmp_path_factory.mktemp("cli")
    scene = _write(root / "scene.json", SCENE)
    assert dispatch(["generate", "--config", str(scene), "--count", "4", "--out", str(root / "ds")]) == 0
    exp = _write(root / "exp.json", {"name": "MTL", "model": SPEC,
                                     "optimizer": {"steps": 2, "batch_size": 2},
                                     "train_data": str(root / "ds"), "eval_data": str(root / "ds")})
    assert dispatch(["train", "--config", str(exp), "--out", str(root / "run")]) == 0
    return root


# --------------------------------------------------------------------------
# helpers


def test_git_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert cli.git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.mark.parametrize("text,want", [("1280x384", (384, 1280)), ("128X96", (96, 128))])
def test_parse_size(text, want):
    assert cli.parse_size(text) == want


@pytest.mark.parametrize("text", ["128", "axb", "0x10"])
def test_parse_size_errors(text):
    with pytest.raises(Exception):
        cli.parse_size(text)


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("MTLNET_THREADS", "3")
    assert cli.resolve_threads(None) == 3 and cli.resolve_threads(2) == 2
    monkeypatch.setenv("MTLNET_THREADS", "many")
    with pytest.raises(cli.UsageError):
        cli.resolve_threads(None)


# --------------------------------------------------------------------------
# exit codes


def test_help_and_version(capsys):
    assert dispatch(["--help"]) == 0
    text = capsys.readouterr().out
    for cmd in ("generate", "train", "eval", "infer", "rectify", "bench", "gradcheck", "study"):
        assert cmd in text
    assert dispatch(["train", "--help"]) == 0
    sub = capsys.readouterr().out
    for flag in ("--config", "--out", "--seed", "--threads", "--dtype"):
        assert flag in sub


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["generate", "--bogus"], ["bench", "--dtype", "f16"],
                                  ["generate", "--count", "x"]])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert dispatch(argv + ["--out", str(tmp_path)] if argv else argv) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_count_is_usage_error(tmp_path):
    assert dispatch(["generate", "--out", str(tmp_path)]) == 1


def test_runtime_failure_exit_2(tmp_path):
    assert dispatch(["eval", "--checkpoint", str(tmp_path / "nope.mtlw"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["status"] == "failed" and "error" in man


def test_bad_config_exit_2(tmp_path):
    cfg = _write(tmp_path / "bad.json", {"name": "MTL", "model": {"input_size": [50, 64]}})
    assert dispatch(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


# --------------------------------------------------------------------------
# generate


def test_generate_twice_same_checksums(tmp_path):
    for name in ("a", "b"):
        assert dispatch(["generate", "--count", "5", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    ma = json.loads((tmp_path / "a" / "meta.json").read_text())
    mb = json.loads((tmp_path / "b" / "meta.json").read_text())
    assert ma["checksums"] == mb["checksums"] and ma["dataset_sha256"] == mb["dataset_sha256"]
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_manifest_contents_and_replay(tmp_path):
    assert dispatch(["generate", "--count", "3", "--seed", "2", "--out", str(tmp_path / "a")]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "generate" and man["status"] == "ok" and man["seed"] == 2
    assert man["config"]["count"] == 3 and man["finished"] and man["version"]
    assert "meta.json" in man["outputs"] and len(man["input_hash"]) == 40
    assert dispatch(["generate", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


# --------------------------------------------------------------------------
# train / eval / infer


def test_train_outputs(trained):
    run = trained / "run"
    for f in ("loss.csv", "eval.csv", "final.mtlw", "final.mtlw.spec.json", "config.json", "manifest.json"):
        assert (run / f).exists(), f
    man = json.loads((run / "manifest.json").read_text())
    assert any(k.endswith("meta.json") for k in man["inputs"])


def test_train_replay_from_manifest(trained, tmp_path):
    assert dispatch(["train", "--config", str(trained / "run" / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    assert _files(trained / "run") == _files(tmp_path / "r")


def test_eval(trained, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "run" / "final.mtlw"), "--data", str(trained / "ds"),
            "--out", str(tmp_path / "e")]
    assert dispatch(args) == 0
    res = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert len(res["seg_iou"]) == 3 and len(res["det_ap"]) == 3
    assert dispatch(args[:-1] + [str(tmp_path / "e2"), "--dtype", "f64"]) == 0


def test_eval_replays_from_manifest(trained, tmp_path):
    assert dispatch(["eval", "--checkpoint", str(trained / "run" / "final.mtlw"), "--data", str(trained / "ds"),
                     "--out", str(tmp_path / "a")]) == 0
    assert dispatch(["eval", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_infer_outputs(trained, tmp_path):
    img = trained / "ds" / "images" / "000000.ppm"
    big = tmp_path / "big.ppm"
    D.write_ppm(big, np.zeros((96, 80, 3), np.uint8))
    assert dispatch(["infer", str(img), str(big), "--checkpoint", str(trained / "run" / "final.mtlw"),
                     "--horizon-row", "20", "--out", str(tmp_path / "o")]) == 0
    o = tmp_path / "o"
    for stem, shape in (("000000", (64, 64)), ("big", (96, 80))):
        mask = D.read_pgm(o / f"{stem}_mask.pgm")
        assert mask.shape == shape
        assert D.read_ppm(o / f"{stem}_overlay.ppm").shape == shape + (3,)
        assert (o / f"{stem}.jsonl").exists()
    mask = D.read_pgm(o / "000000_mask.pgm")
    assert np.all(mask[:20] == 255) and np.all(mask[20:] < 3)
    for line in (o / "000000.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert set(rec) == {"image_id", "class", "score", "box"}


def test_infer_without_images_fails(trained, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert dispatch(["infer", str(empty), "--checkpoint", str(trained / "run" / "final.mtlw"),
                     "--out", str(tmp_path / "o")]) == 2


# --------------------------------------------------------------------------
# rectify / bench / gradcheck / study


@pytest.fixture
def lens(tmp_path):
    return _write(tmp_path / "lens.json", {"k": [0.08, 0.01], "center": [32, 24], "focal": 40})


def test_rectify(tmp_path, lens):
    src = tmp_path / "in.ppm"
    D.write_ppm(src, np.full((48, 64, 3), 128, np.uint8))
    assert dispatch(["rectify", "--model", str(lens), str(src), "r.ppm", "--mask", "--out", str(tmp_path / "o")]) == 0
    assert D.read_ppm(tmp_path / "o" / "r.ppm").shape == (48, 64, 3)
    valid = D.read_pgm(tmp_path / "o" / "r_valid.pgm")
    assert set(np.unique(valid).tolist()) <= {0, 255}


def test_rectify_refuses_to_write_outside_out(tmp_path, lens):
    src = tmp_path / "in.ppm"
    D.write_ppm(src, np.zeros((48, 64, 3), np.uint8))
    assert dispatch(["rectify", "--model", str(lens), str(src), str(tmp_path / "elsewhere.ppm"),
                     "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "elsewhere.ppm").exists()


def test_bench(tmp_path, capsys):
    spec = _write(tmp_path / "spec.json", SPEC)
    assert dispatch(["bench", "--spec", str(spec), "--size", "64x32", "--runs", "2", "--warmup", "0",
                     "--out", str(tmp_path / "b")]) == 0
    cost = json.loads((tmp_path / "b" / "cost.json").read_text())
    assert cost["runs"] == 2 and cost["threads"] == 1 and cost["fps"] > 0
    assert cost["layers"][0]["out_shape"] == [1, 8, 16, 32]
    assert "total" in capsys.readouterr().out


def test_gradcheck_command(tmp_path, monkeypatch):
    from mtlnet import gradcheck as G

    calls = {}

    def fake(seeds, micro_seeds, log=print):
        calls["args"] = (seeds, micro_seeds)
        return [G.CheckResult("relu", 0, 1e-9)]

    monkeypatch.setattr(G, "run_suite", fake)
    assert dispatch(["gradcheck", "--seeds", "2", "--micro-seeds", "0", "--out", str(tmp_path / "g")]) == 0
    assert calls["args"] == (2, 0)
    assert json.loads((tmp_path / "g" / "gradcheck.json").read_text())["passed"] is True
    monkeypatch.setattr(G, "run_suite", lambda *a, **k: [G.CheckResult("relu", 0, 1e-3)])
    assert dispatch(["gradcheck", "--out", str(tmp_path / "g2")]) == 2


def test_gradcheck_fast_subset(tmp_path):
    from mtlnet import gradcheck as G

    results = G.run_suite(seeds=2, micro_seeds=0, log=lambda *_: None)
    assert results and all(r.ok for r in results)


def test_study_command(tmp_path, capsys):
    cfg = _write(tmp_path / "study.json", {
        "model": SPEC, "optimizer": {"steps": 1, "batch_size": 2}, "seeds": [0],
        "train_data": {"synthetic": SCENE, "count": 2}, "eval_data": {"synthetic": SCENE, "count": 2, "start": 50}})
    assert dispatch(["study", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    csv_text = (tmp_path / "s" / "results.csv").read_text()
    assert csv_text.splitlines()[0] == "Metrics,STL Seg,STL Det,MTL,MTL_10,MTL_100"
    assert csv_text in capsys.readouterr().out
    assert dispatch(["study", "--config", str(tmp_path / "s" / "manifest.json"), "--out", str(tmp_path / "s2")]) == 0
    assert _files(tmp_path / "s") == _files(tmp_path / "s2")


def test_nothing_written_outside_out(tmp_path, monkeypatch, trained):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert dispatch(["generate", "--count", "1", "--out", str(tmp_path / "o1")]) == 0
    assert dispatch(["eval", "--checkpoint", str(trained / "run" / "final.mtlw"), "--data", str(trained / "ds"),
                     "--out", str(tmp_path / "o2")]) == 0
    assert list(work.iterdir()) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cwd", "o1", "o2"]
