import json
import subprocess
import sys

import pytest

from pcad.cli import build_parser, dispatch


def run(*argv):
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d, t, s = root / "d", root / "t.ckpt", root / "s.ckpt"
    assert run("gen", "--out", d, "--seed", 1, "--categories", 2, "--train", 5, "--test", 3, "--points", 48) == 0
    assert run("pretrain", "--manifest", d / "manifest.json", "--out", t, "--epochs", 2, "--points", 32) == 0
    assert run("distill", "--teacher", t, "--manifest", d / "manifest.json", "--category", "box",
               "--n-samples", 2, "--epochs", 2, "--out", s) == 0
    return root, d, t, s


def test_gen_and_pretrain_artifacts(pipeline):
    root, d, t, s = pipeline
    assert (d / "manifest.json").is_file() and (d / "run.json").is_file()
    assert t.is_file() and s.is_file()
    log = (root / "t.ckpt.log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,accuracy,lr" and len(log) == 3
    assert (root / "s.ckpt.log.csv").read_text().splitlines()[0] == "epoch,loss,lr"


def test_score_single_and_batch(pipeline, capsys, tmp_path):
    root, d, t, s = pipeline
    assert run("score", "--teacher", t, "--student", s, "--input", d / "box" / "test_000.xyz") == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("score=") and 0 <= float(line[6:]) <= 2
    out = tmp_path / "scores.csv"
    assert run("score", "--teacher", t, "--student", s, "--manifest", d / "manifest.json", "--out", out,
               "--youden", "box") == 0
    assert capsys.readouterr().out.startswith("tau=")
    rows = out.read_text().splitlines()
    assert rows[0] == "path,category,score" and len(rows) == 7


def test_eval_report(pipeline, tmp_path):
    root, d, t, s = pipeline
    rep = tmp_path / "rep"
    assert run("eval", "--manifest", d / "manifest.json", "--teacher", t, "--out", rep,
               "--n-runs", 2, "--n-samples", 2, "--epochs", 1) == 0
    for name in ("auc.csv", "summary.md", "run.json", "roc_sphere_0.csv", "roc_box_1.csv"):
        assert (rep / name).is_file()


def test_missing_teacher_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("distill", "--manifest", "m.json", "--category", "a", "--out", "s.ckpt")
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_and_command():
    for argv in (("gen", "--bogus", "1"), ("train",)):
        with pytest.raises(SystemExit) as exc:
            run(*argv)
        assert exc.value.code != 0


def test_module_errors_are_one_line(tmp_path, capsys):
    assert run("pretrain", "--manifest", tmp_path / "none.json", "--out", tmp_path / "t.ckpt") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("pcad pretrain: error:") and "not found" in err[-1]
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"pretrain.epoch": 3}))
    assert run("pretrain", "--config", bad, "--manifest", "m", "--out", "t") == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    root, d, t, s = pipeline
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pretrain.manifest": str(d / "manifest.json"), "pretrain.epochs": 1,
                               "pretrain.points": 16, "distill.epochs": 9}))
    out = tmp_path / "t2.ckpt"
    assert run("pretrain", "--config", cfg, "--out", out, "--epochs", 2) == 0
    echo = json.loads((tmp_path / "t2.ckpt.run.json").read_text())
    assert echo["pretrain.epochs"] == 2 and echo["pretrain.points"] == 16 and echo["seed"] == 0


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["pretrain", "--help"])
    text = capsys.readouterr().out
    assert "pretrain.epochs" in text and "default: 60" in text


def test_python_dash_m(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pcad", "gen", "--out", str(tmp_path / "d"), "--categories", "1",
                           "--train", "5", "--test", "1", "--points", "16"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "d" / "manifest.json").is_file()


def test_thread_cap(monkeypatch, tmp_path):
    monkeypatch.setenv("PCAD_THREADS", "1")
    assert run("gen", "--out", tmp_path / "d", "--categories", "1", "--train", "5", "--test", "1", "--points", "16") == 0
    monkeypatch.setenv("PCAD_THREADS", "0")
    assert run("gen", "--out", tmp_path / "d", "--categories", "1", "--train", "5", "--test", "1", "--points", "16") == 1
