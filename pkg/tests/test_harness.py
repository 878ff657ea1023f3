import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from f3lab import harness
from f3lab.config import (ConfigError, apply_override, config_hash, expand_grid, load_config,
                          make_config, multistep_configs, parse_value, resolve_output_dir)
from f3lab.heatmap import export_heatmap, import_heatmap, project
from f3lab.report import aggregate
from f3lab.serialize import RECORD_FIELDS, dumps, format_float, read_records, write_records

from conftest import CONFIGS

OUTPUTS = ("manifest.json", "records.csv", "report.json", "tables.txt")


@pytest.fixture(scope="module")
def smoke_run(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    report = harness.run_experiment(small_config, out_dir=out)
    return out, report


def output_files(out):
    files = [out / n for n in OUTPUTS] + sorted((out / "heatmaps").iterdir())
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in files}


# -- config -------------------------------------------------------------------------

def test_parse_value():
    assert parse_value("16/255") == 16 / 255
    assert parse_value(0.5) == 0.5
    assert parse_value("0.25") == 0.25
    for bad in ("x/255", "1/0", True, None, [1]):
        with pytest.raises(ConfigError):
            parse_value(bad)


def test_defaults_and_bounds():
    cfg = make_config({})
    assert cfg["attack"]["step_size"] == 2 / 255
    assert cfg["attack"]["eps_inf"] == 8 / 255
    assert cfg["model"]["train"]["noise"] == 32 / 255


def test_load_config_requires_version(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"name": "x"}))
    with pytest.raises(ConfigError, match="version"):
        load_config(p)
    p.write_text(json.dumps({"version": 99}))
    with pytest.raises(ConfigError, match="not supported"):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.mark.parametrize("raw", [
    {"bogus": 1}, {"workers": 0}, {"chunk_size": 0}, {"data": {"eval": {"n": 0}}},
    {"purify": {"variant": "v3"}}, {"purify": [{"variant": "v9"}]},
    {"purify": [{"variant": "v3", "wobble": 1}]}, {"purify": [{"beta_inf": -1}]},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        make_config({"version": 1, **raw})


def test_overrides():
    cfg = make_config({}, ["attack.steps=5", "attack.eps_inf=\"4/255\"", "name=run2",
                           "data.eval.n=7"])
    assert cfg["attack"]["steps"] == 5
    assert cfg["attack"]["eps_inf"] == 4 / 255
    assert cfg["name"] == "run2"
    assert cfg["data"]["eval"]["n"] == 7
    with pytest.raises(ConfigError):
        apply_override({}, "no-equals-sign")


def test_override_into_list():
    cfg = make_config({"purify": [{"variant": "v3"}]}, ["purify.0.beta_inf=\"8/255\""])
    assert cfg["purify"][0]["beta_inf"] == 8 / 255


def test_grid_expansion_and_merge():
    grid = expand_grid([
        {"variant": ["v2", "v3"], "alpha_inf": [1, 2], "beta_inf": [3, 4, 5]},
        {"variant": "v3", "alpha_inf": 1, "beta_inf": 3, "seeds": [2, 1]},
    ])
    assert len(grid) == 12
    seeds = {pc.label(): s for pc, s in grid}
    v3 = [pc for pc, _ in grid if pc.variant == "v3" and pc.alpha_inf == 1 and pc.beta_inf == 3]
    assert seeds[v3[0].label()] == [0, 1, 2]


def test_multistep_template():
    multi, single = multistep_configs({"K": 8, "beta_step": 0.01, "alpha_inf": 0.05,
                                       "eps_inf_total": 0.06})
    assert (multi.variant, multi.K, multi.beta_inf) == ("v3_multistep", 8, 0.01)
    assert (single.variant, single.K, single.beta_inf) == ("v3", 1, 0.06)


def test_hash_ignores_runtime_keys():
    a = make_config({})
    b = make_config({}, ["workers=4", "output_dir=\"elsewhere\""])
    c = make_config({}, ["seed=1"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_output_root_env(monkeypatch, tmp_path):
    cfg = make_config({}, ["output_dir=\"runs/x\""])
    monkeypatch.delenv("F3LAB_OUTPUT_ROOT", raising=False)
    assert resolve_output_dir(cfg).as_posix() == "runs/x"
    monkeypatch.setenv("F3LAB_OUTPUT_ROOT", str(tmp_path))
    assert resolve_output_dir(cfg) == tmp_path / "runs/x"
    absolute = make_config({}, [f"output_dir=\"{tmp_path / 'abs'}\""])
    assert resolve_output_dir(absolute) == tmp_path / "abs"


def test_shipped_configs_load():
    for p in sorted(CONFIGS.glob("*.json")):
        load_config(p)


# -- serialization ------------------------------------------------------------------

@given(st.floats(allow_nan=False, allow_infinity=False))
@settings(max_examples=500)
def test_float_round_trip(x):
    assert float(format_float(x)) == x
    assert json.loads(dumps({"v": x}))["v"] == x


def test_non_finite_rejected():
    for x in (math.nan, math.inf):
        with pytest.raises(ValueError):
            dumps([x])


def test_dumps_is_canonical():
    a = dumps({"b": [1, 2.5, None, True], "a": {"y": "s", "x": np.float64(0.1)}})
    b = dumps({"a": {"x": 0.1, "y": "s"}, "b": [1, 2.5, None, True]})
    assert a == b
    assert json.loads(a) == {"a": {"x": 0.1, "y": "s"}, "b": [1, 2.5, None, True]}
    assert "0.10000000000000001" in a


record = st.fixed_dictionaries({
    "condition": st.text("abcv123(),=/+[]_", min_size=1, max_size=20),
    "kind": st.sampled_from(["clean", "attack", "purify"]),
    **{k: st.integers(0, 1000) for k in ("seed", "index", "qtype", "label", "clean_pred", "pred")},
    **{k: st.floats(0, 1e3, allow_nan=False) for k in ("mse", "kl", "l1", "linf")},
    **{k: st.none() | st.floats(0, 1e3) for k in ("ref_mse", "ref_kl")},
})


@given(st.lists(record, max_size=20))
@settings(max_examples=50, deadline=None)
def test_records_round_trip(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rec") / "r.csv"
    write_records(p, recs)
    assert read_records(p) == recs


def test_records_reject_wrong_columns(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_records(p)


def test_aggregate_by_hand():
    base = {k: 0 for k in RECORD_FIELDS}
    recs = [dict(base, condition="c", seed=0, index=0, label=1, pred=1, clean_pred=1, mse=1.0,
                 l1=6.0, linf=0.5, ref_mse=None, ref_kl=None),
            dict(base, condition="c", seed=0, index=1, label=1, pred=2, clean_pred=1, mse=3.0,
                 l1=0.0, linf=0.25, ref_mse=None, ref_kl=None),
            dict(base, condition="c", seed=1, index=0, label=1, pred=2, clean_pred=2, mse=2.0,
                 l1=3.0, linf=0.1, ref_mse=None, ref_kl=None)]
    row = aggregate(recs, pixel_count=3)
    assert row["accuracy"] == pytest.approx(100 / 3)
    assert row["accuracy_by_seed"] == [50.0, 0.0]
    assert row["accuracy_seed_std"] == 25.0
    assert row["asr"] == pytest.approx(1 / 3)
    assert row["mse"] == 2.0
    assert (row["l1"], row["l1_per_pixel"]) == (3.0, 1.0)
    assert (row["linf_max"], row["n_samples"], row["n_records"]) == (0.5, 2, 3)
    assert row["ref_mse"] is None
    with pytest.raises(ValueError):
        aggregate([], 3)


# -- heatmaps -----------------------------------------------------------------------

def test_heatmap_constant_is_degenerate(tmp_path):
    scale = export_heatmap(np.full((2, 4, 16), 1 / 16), tmp_path / "h")
    assert scale["degenerate"]
    blob = (tmp_path / "h.pgm").read_bytes()
    assert len(set(blob[-32:])) == 1
    np.testing.assert_array_equal(import_heatmap(tmp_path / "h.txt"), np.full((2, 16), 1 / 16))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 20), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_heatmap_round_trip(tmp_path_factory, L, H, M, seed):
    a = np.random.default_rng(seed).uniform(size=(L, H, M))
    stem = tmp_path_factory.mktemp("hm") / "h"
    export_heatmap(a, stem)
    mat = project(a)
    assert mat.shape == (L, M)
    txt, pgm = import_heatmap(stem.with_suffix(".txt")), import_heatmap(stem.with_suffix(".pgm"))
    assert txt.shape == pgm.shape == (L, M)
    span = mat.max() - mat.min()
    np.testing.assert_allclose(txt, mat, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pgm, mat, rtol=0, atol=span / 255 / 2 + 1e-12)


def test_heatmap_is_max_over_heads():
    a = np.zeros((2, 3, 4))
    a[1, 2, 3] = 5.0
    a[0, 0, 0] = -1.0
    m = project(a)
    assert m[1, 3] == 5.0 and m[0, 0] == 0.0
    with pytest.raises(ValueError):
        project(np.zeros((2, 3)))


# -- pipeline -----------------------------------------------------------------------

def test_smoke_outputs(smoke_run, small_config):
    out, report = smoke_run
    for name in OUTPUTS + ("run.log",):
        assert (out / name).exists()
    rows = {r["condition"]: r for r in report["rows"]}
    assert rows["clean"]["mse"] == 0.0 and rows["clean"]["kl"] == 0.0
    assert rows["adversarial"]["mse"] > 0.0
    assert report["provenance"]["config_hash"] == config_hash(small_config)
    assert "run.log" not in json.dumps(report)
    # heatmaps: 3 conditions x 2 samples, both formats, dims (L, M)
    assert len(report["heatmaps"]) == 6
    for h in report["heatmaps"]:
        mat = import_heatmap(out / (h["file"] + ".txt"))
        assert mat.shape == (1, 16)


def test_records_recompute_report(smoke_run, small_config):
    out, _ = smoke_run
    before = {n: (out / n).read_bytes() for n in ("report.json", "tables.txt")}
    for n in before:
        (out / n).unlink()
    harness.write_report(small_config, out)
    assert {n: (out / n).read_bytes() for n in before} == before


def test_report_has_no_timestamps(smoke_run):
    out, _ = smoke_run
    text = (out / "report.json").read_text() + (out / "tables.txt").read_text()
    assert "2026-" not in text and "finished in" not in text


def test_rerun_and_worker_count_are_byte_identical(smoke_run, small_config, tmp_path):
    out, _ = smoke_run
    a = tmp_path / "w1"
    b = tmp_path / "w2"
    harness.run_experiment(small_config, out_dir=a, workers=1)
    harness.run_experiment(small_config, out_dir=b, workers=2)
    ref = output_files(out)
    assert output_files(a) == ref
    assert output_files(b) == ref


def test_attack_cache_reused(smoke_run, small_config, monkeypatch):
    out, _ = smoke_run

    def boom(*a, **k):
        raise AssertionError("attack recomputed")

    monkeypatch.setattr(harness, "_attack_task", boom)
    harness.export_adversarial(small_config, out_dir=out)


def test_stage_error_names_sample(small_config, smoke_run, tmp_path, monkeypatch):
    out, _ = smoke_run
    from conftest import copy_model_cache
    copy_model_cache(out, tmp_path)
    real = harness.sample_rngs

    def flaky(seed, idx, *extra):
        if 7 in list(idx):
            raise RuntimeError("bad sample")
        return real(seed, idx, *extra)

    monkeypatch.setattr(harness, "sample_rngs", flaky)
    with pytest.raises(harness.StageError) as info:
        harness.run_experiment(small_config, out_dir=tmp_path)
    assert info.value.index == 7
    assert info.value.stage.startswith("eval:")
    assert "sample 7" in str(info.value)


def test_missing_checkpoint_is_stage_error(small_config, tmp_path):
    cfg = make_config(small_config, [f"model.checkpoint=\"{tmp_path / 'none.f3ck'}\""])
    with pytest.raises(harness.StageError, match="model"):
        harness.run_experiment(cfg, out_dir=tmp_path)


def test_condition_round_trip():
    (pc, seeds), = expand_grid([{"variant": "v3", "seeds": [0, 3]}])
    c = harness.Condition(pc.label(), "purify", "adversarial", pc, seeds, 5)
    assert harness.Condition.from_dict(json.loads(json.dumps(c.to_dict()))) == c


# -- trends on the acceptance run --------------------------------------------------

def test_clean_impact_trend(acceptance_run):
    t = acceptance_run["report"]["tables"]["clean_impact"]
    accs = [r["accuracy"] for r in sorted(t["rows"], key=lambda r: r["beta_inf"])]
    assert sorted(r["beta_inf"] for r in t["rows"]) == [0.0, 8 / 255, 16 / 255, 32 / 255]
    # beta = 0 leaves clean images untouched
    assert accs[0] == t["clean_accuracy"]
    for a, b in zip(accs, accs[1:]):
        assert b <= a + 2.0


def test_adaptive_attack_beats_non_adaptive(acceptance_run):
    """The adaptive attack lowers purified accuracy below v3 on the PGD set."""
    report = acceptance_run["report"]
    (ad,) = report["tables"]["adaptive"]
    n = ad["n_samples"]
    recs = read_records(acceptance_run["out"] / "records.csv")
    label = ad["purified_condition"].split("+", 1)[1]
    sel = [r["pred"] == r["label"] for r in recs if r["condition"] == label and r["index"] < n]
    non_adaptive = 100 * sum(sel) / len(sel)
    assert ad["adaptive_purified_accuracy"] < non_adaptive


def test_v3_attention_row_reported(acceptance_run):
    rows = {r["condition"]: r for r in acceptance_run["report"]["tables"]["attention"]}
    assert rows["clean"]["mse"] == 0.0
    assert rows["adversarial"]["mse"] > 0.0
    assert "v3(a=16/255,b=32/255)" in rows
