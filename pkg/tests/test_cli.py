import json
import subprocess
import sys

import pytest

from f3lab import data as D
from f3lab.cli import main
from f3lab.heatmap import import_heatmap
from f3lab.model import load_checkpoint

from conftest import CONFIGS

SMOKE = str(CONFIGS / "smoke.json")


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def run(*argv):
    return main([argv[0], SMOKE, *argv[1:]])


def test_gen_data(out, capsys):
    assert run("gen-data", "--output", str(out)) == 0
    train = D.load(out / "data" / "train.f3ds")
    ev = D.load(out / "data" / "eval.f3ds")
    assert (len(train), len(ev)) == (64, 10)
    assert "train.f3ds" in capsys.readouterr().out


def test_train(out, capsys):
    assert run("train", "--output", str(out)) == 0
    load_checkpoint(out / "model.f3ck")
    assert "held-out accuracy" in capsys.readouterr().out


def test_attack(out):
    assert run("attack", "--output", str(out)) == 0
    adv = D.load(out / "adversarial.f3ds")
    clean = D.load(out / "data" / "eval.f3ds")
    assert abs(adv.images - clean.images).max() <= 8 / 255


def test_purify(out):
    label = "v3(a=16/255,b=32/255)"
    assert run("purify", "--output", str(out), "--condition", label) == 0
    files = sorted(p.name for p in (out / "purified").iterdir())
    assert files == ["v3_a=16_255_b=32_255.f3ds"]
    assert run("purify", "--output", str(out), "--condition", "nope") == 1


def test_eval_report_heatmap(out):
    assert run("eval", "--output", str(out), "--workers", "2") == 0
    report = json.loads((out / "report.json").read_text())
    assert report["format"] == "f3lab-report"
    tables = (out / "tables.txt").read_bytes()
    (out / "tables.txt").unlink()
    assert run("report", "--output", str(out)) == 0
    assert (out / "tables.txt").read_bytes() == tables
    assert run("heatmap", "--output", str(out), "--sample", "5", "--condition", "clean") == 0
    assert import_heatmap(out / "heatmaps" / "clean_s5.pgm").shape == (1, 16)


def test_overrides_reach_the_run(tmp_path):
    assert run("gen-data", "--output", str(tmp_path), "--set", "data.eval.n=3") == 0
    assert len(D.load(tmp_path / "data" / "eval.f3ds")) == 3


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "purify": [{"variant": "v9"}]}))
    assert main(["eval", str(bad), "--output", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "missing.json")]) == 1
    assert run("gen-data", "--set", "nonsense") == 1


def test_report_without_records_fails(tmp_path):
    assert run("report", "--output", str(tmp_path)) == 1


def test_output_root_env(tmp_path):
    env_root = tmp_path / "root"
    proc = subprocess.run([sys.executable, "-m", "f3lab", "gen-data", SMOKE],
                          env={"F3LAB_OUTPUT_ROOT": str(env_root), "PATH": ""},
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert (env_root / "runs" / "smoke" / "data" / "eval.f3ds").exists()


def test_help_lists_subcommands():
    proc = subprocess.run([sys.executable, "-m", "f3lab", "--help"], capture_output=True,
                          text=True)
    for cmd in ("gen-data", "train", "attack", "purify", "eval", "report", "heatmap"):
        assert cmd in proc.stdout
