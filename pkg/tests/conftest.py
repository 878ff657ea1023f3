import shutil
from pathlib import Path

import pytest

from f3lab.config import load_config
from f3lab.harness import run_experiment
from f3lab.model import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# Acceptance outcomes collected during the run and echoed in the summary.
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """The full acceptance experiment, run once per session."""
    out = tmp_path_factory.mktemp("acceptance")
    cfg = load_config(CONFIGS / "acceptance.json")
    report = run_experiment(cfg, out_dir=out)
    return {"cfg": cfg, "out": out, "report": report}


@pytest.fixture(scope="session")
def trained_model(acceptance_run):
    (path,) = sorted((acceptance_run["out"] / "cache").glob("model-*.f3ck"))
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def small_config():
    return load_config(CONFIGS / "smoke.json")


def copy_model_cache(src_out, dst_out):
    (dst_out / "cache").mkdir(parents=True, exist_ok=True)
    for p in (src_out / "cache").glob("model-*.f3ck"):
        shutil.copy(p, dst_out / "cache" / p.name)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
