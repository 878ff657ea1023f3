"""Experiment engine: data -> model -> attack -> purification grid -> records.

Work is split into fixed-size chunks of sample indices. A chunk's result
depends only on the chunk and on per-sample random streams, so the number of
worker processes never changes a reported number. Results are collected in
chunk order before anything is written.
"""
from __future__ import annotations

import logging
import math
import multiprocessing
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from .attacks import AttackConfig, run_attack
from .config import (canonical_json, config_hash, expand_grid, multistep_configs,
                     provenance_view, resolve_output_dir)
from .fileio import file_digest
from .heatmap import export_heatmap
from .model import ModelConfig, load_checkpoint, save_checkpoint, train
from .purify import PurifyConfig, attention_distance, purify, sample_rngs
from .report import build_report, render_tables
from .serialize import dumps, read_records, write_records, write_text

log = logging.getLogger(__name__)

CODE_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.csv"
REPORT_NAME = "report.json"
TABLES_NAME = "tables.txt"


class StageError(RuntimeError):
    """A pipeline stage failed; names the stage and the first failing sample."""

    def __init__(self, stage, index, cause):
        self.stage, self.index, self.cause = stage, index, cause
        where = "" if index is None else f" at sample {index}"
        super().__init__(f"stage {stage!r} failed{where}: {cause!r}")


@dataclass
class Condition:
    label: str
    kind: str                   # clean | attack | purify | clean_purify | multistep | ...
    source: str                 # name of the image set the condition starts from
    purify: PurifyConfig | None = None
    seeds: list = field(default_factory=lambda: [0])
    n: int | None = None        # restrict to the first n eval samples

    def to_dict(self):
        d = asdict(self)
        d["purify"] = None if self.purify is None else self.purify.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d["purify"] is not None:
            d["purify"] = PurifyConfig(**d["purify"])
        return cls(**d)


# -- worker-side state and tasks ----------------------------------------------------

_STATE = {}


def _init_worker(model, questions, labels, sources, clean_attention):
    _STATE.update(model=model, questions=questions, labels=labels, sources=sources,
                  clean_attention=clean_attention)


def _clean_task(idx):
    m, x = _STATE["model"], _STATE["sources"]["clean"][idx]
    res = m.forward(x, _STATE["questions"][idx])
    return {"pred": np.argmax(res.logits.data, axis=-1), "attention": res.attention.data}


def _attack_task(idx, attack_cfg, purify_cfg):
    m = _STATE["model"]
    return run_attack(m, attack_cfg, _STATE["sources"]["clean"][idx], _STATE["questions"][idx],
                      _STATE["labels"][idx], purify_cfg=purify_cfg, indices=idx)


def _eval_task(idx, source, purify_cfg, seed, keep_images=False):
    m, q = _STATE["model"], _STATE["questions"][idx]
    x = _STATE["sources"][source][idx]
    a_clean = _STATE["clean_attention"][idx]
    out = {}
    if purify_cfg is None:
        x_eval = x
        base = _STATE["sources"]["clean"][idx]
        d = np.abs(x_eval - base).reshape(len(idx), -1)
        out["l1"], out["linf"] = d.sum(axis=1), d.max(axis=1)
    else:
        cfg = replace(purify_cfg, seed=seed)
        res = purify(m, cfg, x, q, sample_rngs(seed, idx), x_clean=_STATE["sources"]["clean"][idx])
        x_eval = res.purified
        out["l1"], out["linf"] = res.l1, res.linf
        if res.reference is not None:
            same = res.reference is res.purified
            a_ref = None if same else m.attention(res.reference, q)
            out["ref"] = a_ref
    fr = m.forward(x_eval, q)
    a = fr.attention.data
    out["pred"] = np.argmax(fr.logits.data, axis=-1)
    out["mse"] = attention_distance(a_clean, a, "mse")
    out["kl"] = attention_distance(a_clean, a, "kl")
    if "ref" in out:
        a_ref = a if out["ref"] is None else out["ref"]
        out["ref_mse"] = attention_distance(a_clean, a_ref, "mse")
        out["ref_kl"] = attention_distance(a_clean, a_ref, "kl")
        del out["ref"]
    if keep_images:
        out["images"] = x_eval
    return out


def _guarded(task, stage, idx, *args):
    """Run ``task`` on a chunk; on failure, pin down the first failing sample."""
    try:
        return task(idx, *args)
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        for i in idx:
            try:
                task(np.array([i]), *args)
            except Exception as inner:  # noqa: BLE001
                raise StageError(stage, int(i), inner) from inner
        raise StageError(stage, None, exc) from exc


class Executor:
    """Maps a task over fixed chunks, in-process or on a worker pool."""

    def __init__(self, state, workers, chunk_size):
        self.state, self.workers, self.chunk_size = state, workers, chunk_size
        self.pool = None
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            self.pool = ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                            initargs=state)
        else:
            _init_worker(*state)

    def chunks(self, n):
        return [np.arange(s, min(s + self.chunk_size, n)) for s in range(0, n, self.chunk_size)]

    def map(self, task, stage, n, *args):
        chunks = self.chunks(n)
        if self.pool is None:
            return [_guarded(task, stage, c, *args) for c in chunks]
        futures = [self.pool.submit(_guarded, task, stage, c, *args) for c in chunks]
        return [f.result() for f in futures]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _cat(parts, key):
    return np.concatenate([p[key] for p in parts])


# -- stages -------------------------------------------------------------------------

def make_datasets(cfg):
    t, e = cfg["data"]["train"], cfg["data"]["eval"]
    return (D.generate(t["n"], t["seed"], t["mix"], split="train"),
            D.generate(e["n"], e["seed"], e["mix"], split="eval"))


def dataset_digest(ds):
    import hashlib
    h = hashlib.sha256()
    for a in (ds.images, ds.questions, ds.labels):
        h.update(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def _short_hash(obj):
    import hashlib
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def model_stage(cfg, train_ds, cache):
    """Load the configured checkpoint, or train (cached by config hash)."""
    mc = cfg["model"]
    if mc["checkpoint"]:
        path = Path(mc["checkpoint"])
        if not path.exists():
            raise StageError("model", None, FileNotFoundError(str(path)))
        return load_checkpoint(path), path
    key = _short_hash({"data": cfg["data"]["train"], "model": mc})
    path = cache / f"model-{key}.f3ck"
    if path.exists():
        return load_checkpoint(path), path
    tc = mc["train"]
    try:
        res = train(train_ds, tc["epochs"], tc["learning_rate"], tc["seed"],
                    config=ModelConfig(**mc["config"]), batch_size=tc["batch_size"],
                    momentum=tc["momentum"], noise=tc["noise"])
    except Exception as exc:
        raise StageError("train", None, exc) from exc
    save_checkpoint(res.model, path, extra={"train_accuracy": res.train_accuracy,
                                            "train": tc, "data": cfg["data"]["train"]})
    return res.model, path


def attack_cfg_from(section):
    keys = ("method", "steps", "step_size", "eps_inf", "c", "eot_samples", "seed")
    return AttackConfig(**{k: section[k] for k in keys if k in section})


def attack_stage(ex, eval_ds, attack_cfg, purify_cfg, n, cache, key, provenance):
    """Adversarial images for the first ``n`` eval samples, cached on disk."""
    path = cache / f"adv-{key}.f3ds"
    if path.exists():
        ds = D.load(path)
        return ds.images
    stage = "attack" if purify_cfg is None else "adaptive_attack"
    parts = ex.map(_attack_task, stage, n, attack_cfg, purify_cfg)
    adv = np.concatenate(parts)
    save_adversarial(eval_ds.subset(np.arange(n)), adv, path, provenance)
    return adv


def save_adversarial(clean_ds, images, path, provenance, kind="adversarial"):
    """Persist an attacked or purified image set next to its source's digest."""
    out = clean_ds.subset(np.arange(len(clean_ds)))
    d = np.abs(images - clean_ds.images).reshape(len(images), -1)
    out.images = np.asarray(images, dtype=np.float64)
    meta = {"kind": kind, "source": {"seed": clean_ds.seed, "split": clean_ds.split,
                                     "n": len(clean_ds), "sha256": dataset_digest(clean_ds)},
            **provenance}
    D.save(out, path, extra_meta=meta, extra_arrays={"l1": d.sum(axis=1), "linf": d.max(axis=1)})


def build_conditions(cfg):
    conds = [Condition("clean", "clean", "clean"), Condition("adversarial", "attack", "adversarial")]
    for pc, seeds in expand_grid(cfg["purify"]):
        conds.append(Condition(pc.label(), "purify", "adversarial", pc, seeds))
    ci = cfg["clean_impact"]
    if ci is not None:
        for pc, seeds in expand_grid([ci["purify"]]):
            conds.append(Condition("clean+" + pc.label(), "clean_purify", "clean", pc, seeds))
    if cfg["multistep"] is not None:
        multi, _ = multistep_configs(cfg["multistep"])
        conds.append(Condition(multi.label(), "multistep", "adversarial", multi,
                               sorted(cfg["multistep"].get("seeds", [0]))))
    return conds


def adaptive_conditions(cfg):
    ad = cfg["adaptive"]
    if ad is None:
        return []
    (pc, seeds), = expand_grid([ad["purify"]])
    src = f"eot_pgd[{pc.label()}]"
    n = ad.get("n")
    return [Condition(src, "adaptive_attack", src, None, [0], n),
            Condition(f"{src}+{pc.label()}", "adaptive_purify", src, pc, seeds, n)]


def _columns(parts):
    idx = np.arange(sum(len(p["pred"]) for p in parts))
    cols = {k: _cat(parts, k) for k in ("pred", "mse", "kl", "l1", "linf")}
    has_ref = "ref_mse" in parts[0]
    if has_ref:
        cols["ref_mse"], cols["ref_kl"] = _cat(parts, "ref_mse"), _cat(parts, "ref_kl")
    return cols, has_ref, idx


def evaluate_condition(ex, cond, eval_ds, clean_pred, n):
    recs = []
    for seed in cond.seeds:
        parts = ex.map(_eval_task, f"eval:{cond.label}", n, cond.source, cond.purify, seed)
        cols, has_ref, idx = _columns(parts)
        for i in idx:
            recs.append({
                "condition": cond.label, "kind": cond.kind, "seed": seed, "index": int(i),
                "qtype": int(eval_ds.qtypes[i]), "label": int(eval_ds.labels[i]),
                "clean_pred": int(clean_pred[i]), "pred": int(cols["pred"][i]),
                "mse": float(cols["mse"][i]), "kl": float(cols["kl"][i]),
                "ref_mse": float(cols["ref_mse"][i]) if has_ref else None,
                "ref_kl": float(cols["ref_kl"][i]) if has_ref else None,
                "l1": float(cols["l1"][i]), "linf": float(cols["linf"][i]),
            })
    return recs


def calibrate_single_step(ex, cfg, multi_recs, n, iterations=40):
    """Find the single-step bound whose mean l1 matches the multistep run.

    The l1 of one v3 step is nondecreasing in beta for fixed random draws,
    so bisection on the first multistep seed is well defined.
    """
    ms = cfg["multistep"]
    _, single = multistep_configs(ms)
    seed = sorted(ms.get("seeds", [0]))[0]
    target = math.fsum(r["l1"] for r in multi_recs if r["seed"] == seed) / n

    def mean_l1(beta):
        parts = ex.map(_eval_task, "calibrate", n, "adversarial",
                       replace(single, beta_inf=beta), seed)
        return math.fsum(_cat(parts, "l1")) / n

    lo, hi = 0.0, ms["eps_inf_total"]
    while mean_l1(hi) < target and hi < 1.0:
        lo, hi = hi, min(1.0, 2 * hi)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mean_l1(mid) < target:
            lo = mid
        else:
            hi = mid
    beta = hi
    return replace(single, beta_inf=beta), {"target_l1": target, "beta_inf": beta,
                                            "achieved_l1": mean_l1(beta), "seed": seed}


def _slug(label):
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", label).strip("_")


def heatmap_stage(state, cfg, conditions, out_dir):
    """Export max-over-heads heatmaps for the configured samples/conditions."""
    _init_worker(*state)
    hm = cfg["heatmaps"] or {}
    by_label = {c.label: c for c in conditions}
    exported = []
    m, q = _STATE["model"], _STATE["questions"]
    for label in hm.get("conditions", []):
        if label not in by_label:
            raise StageError("heatmap", None, KeyError(f"unknown condition {label!r}"))
        cond = by_label[label]
        for i in hm.get("samples", []):
            idx = np.array([i])
            x = _STATE["sources"][cond.source][idx]
            if cond.purify is not None:
                seed = cond.seeds[0]
                x = purify(m, replace(cond.purify, seed=seed), x, q[idx], sample_rngs(seed, idx),
                           x_clean=_STATE["sources"]["clean"][idx]).purified
            a = m.attention(x, q[idx])[0]
            name = f"{_slug(label)}_s{i}"
            scale = export_heatmap(a, out_dir / "heatmaps" / name)
            exported.append({"condition": label, "sample": int(i), "file": f"heatmaps/{name}",
                             "scale": scale})
    return exported


# -- orchestration -----------------------------------------------------------------

def _setup_logging(out_dir):
    handler = logging.FileHandler(out_dir / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger("f3lab")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def prepare(cfg, out_dir=None, workers=None):
    """Run data, model and attack stages; return a context for later stages."""
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
    cache = out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    train_ds, eval_ds = make_datasets(cfg)
    model, ckpt = model_stage(cfg, train_ds, cache)
    return {"cfg": cfg, "out_dir": out_dir, "cache": cache, "train": train_ds, "eval": eval_ds,
            "model": model, "checkpoint": ckpt,
            "workers": workers or cfg["workers"]}


def run_experiment(cfg, out_dir=None, workers=None):
    """Execute the full pipeline and write manifest, records, report, tables
    and heatmaps into the output directory. Returns the report dict."""
    ctx = prepare(cfg, out_dir, workers)
    out_dir = ctx["out_dir"]
    handler = _setup_logging(out_dir)
    t0 = time.time()
    try:
        log.info("run %s hash %s workers %d", cfg["name"], config_hash(cfg), ctx["workers"])
        report = _run(ctx)
        log.info("finished in %.1f s", time.time() - t0)
        return report
    finally:
        logging.getLogger("f3lab").removeHandler(handler)
        handler.close()


def _base_state(ctx, sources, clean_attention):
    ev = ctx["eval"]
    return (ctx["model"], ev.questions, ev.labels, sources, clean_attention)


def clean_and_attack(ctx):
    """Clean predictions/attention and the main adversarial set."""
    cfg, ev, n = ctx["cfg"], ctx["eval"], len(ctx["eval"])
    sources = {"clean": ev.images}
    with Executor(_base_state(ctx, sources, None), ctx["workers"], cfg["chunk_size"]) as ex:
        parts = ex.map(_clean_task, "clean", n)
        clean_pred, clean_att = _cat(parts, "pred"), _cat(parts, "attention")
        ckpt_digest = file_digest(ctx["checkpoint"])
        acfg = attack_cfg_from(cfg["attack"])
        key = _short_hash({"model": ckpt_digest, "eval": cfg["data"]["eval"],
                           "attack": acfg.to_dict(), "chunk": cfg["chunk_size"]})
        prov = {"attack": acfg.to_dict(), "model_sha256": ckpt_digest}
        sources["adversarial"] = attack_stage(ex, ev, acfg, None, n, ctx["cache"], key, prov)
    return sources, clean_pred, clean_att, ckpt_digest


def _run(ctx):
    cfg, ev, n = ctx["cfg"], ctx["eval"], len(ctx["eval"])
    sources, clean_pred, clean_att, ckpt_digest = clean_and_attack(ctx)
    conditions = build_conditions(cfg)
    adaptive = adaptive_conditions(cfg)
    if adaptive:
        ad = cfg["adaptive"]
        n_ad = adaptive[0].n or n
        acfg = AttackConfig(method="eot_pgd", steps=ad.get("steps", 20),
                            step_size=ad.get("step_size", 2 / 255),
                            eps_inf=ad.get("eps_inf", 8 / 255),
                            eot_samples=ad.get("eot_samples", 10), seed=ad.get("seed", 0))
        pc = adaptive[1].purify
        key = _short_hash({"model": ckpt_digest, "eval": cfg["data"]["eval"], "n": n_ad,
                           "attack": acfg.to_dict(), "purify": pc.to_dict(),
                           "chunk": cfg["chunk_size"]})
        with Executor(_base_state(ctx, sources, clean_att), ctx["workers"],
                      cfg["chunk_size"]) as ex:
            adv = attack_stage(ex, ev, acfg, pc, n_ad, ctx["cache"], key,
                               {"attack": acfg.to_dict(), "purify": pc.to_dict(),
                                "model_sha256": ckpt_digest})
        full = sources["adversarial"].copy()
        full[:n_ad] = adv
        sources[adaptive[0].source] = full
        conditions += adaptive

    records, calibration = [], None
    with Executor(_base_state(ctx, sources, clean_att), ctx["workers"], cfg["chunk_size"]) as ex:
        for cond in list(conditions):
            log.info("evaluating %s", cond.label)
            recs = evaluate_condition(ex, cond, ev, clean_pred, cond.n or n)
            records += recs
            if cond.kind == "multistep":
                single, calibration = calibrate_single_step(ex, cfg, recs, n)
                matched = Condition(single.label(), "multistep_matched", "adversarial", single,
                                    cond.seeds)
                conditions.append(matched)
                records += evaluate_condition(ex, matched, ev, clean_pred, n)
    heatmaps = heatmap_stage(_base_state(ctx, sources, clean_att), cfg, conditions,
                             ctx["out_dir"])

    manifest = {
        "conditions": [c.to_dict() for c in conditions],
        "model": {"checkpoint_sha256": ckpt_digest,
                  "clean_accuracy": float(np.mean(clean_pred == ev.labels) * 100)},
        "eval": {"n": n, "sha256": dataset_digest(ev)},
        "calibration": calibration,
        "heatmaps": heatmaps,
    }
    out = ctx["out_dir"]
    write_text(out / MANIFEST_NAME, dumps(manifest))
    write_records(out / RECORDS_NAME, records)
    return write_report(cfg, out)


def write_report(cfg, out_dir):
    """(Re)build report.json and tables.txt from the manifest and records."""
    out_dir = Path(out_dir)
    import json
    with open(out_dir / MANIFEST_NAME) as fh:
        manifest = json.load(fh)
    records = read_records(out_dir / RECORDS_NAME)
    prov = {"config": provenance_view(cfg), "config_hash": config_hash(cfg),
            "code_version": CODE_VERSION,
            "regenerate": "f3lab eval <config.json>  (or: f3lab report <config.json>)"}
    report = build_report(prov, manifest, records)
    write_text(out_dir / REPORT_NAME, dumps(report))
    write_text(out_dir / TABLES_NAME, render_tables(report))
    return report


# -- single-stage entry points used by the CLI ------------------------------------

def export_datasets(cfg, out_dir=None):
    out = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
    (out / "data").mkdir(parents=True, exist_ok=True)
    train_ds, eval_ds = make_datasets(cfg)
    paths = []
    for ds in (train_ds, eval_ds):
        p = out / "data" / f"{ds.split}.f3ds"
        D.save(ds, p, extra_meta={"config_hash": config_hash(cfg)})
        paths.append(p)
    return paths


def export_model(cfg, out_dir=None):
    ctx = prepare(cfg, out_dir)
    ev = ctx["eval"]
    acc = float(np.mean(ctx["model"].predict(ev.images, ev.questions) == ev.labels)) * 100
    dest = ctx["out_dir"] / "model.f3ck"
    dest.write_bytes(Path(ctx["checkpoint"]).read_bytes())
    return dest, acc


def export_adversarial(cfg, out_dir=None):
    ctx = prepare(cfg, out_dir)
    sources, _, _, digest = clean_and_attack(ctx)
    dest = ctx["out_dir"] / "adversarial.f3ds"
    save_adversarial(ctx["eval"], sources["adversarial"], dest,
                     {"attack": attack_cfg_from(cfg["attack"]).to_dict(), "model_sha256": digest,
                      "config_hash": config_hash(cfg)})
    return dest


def export_purified(cfg, out_dir=None, labels=None):
    """Purify the adversarial set with each grid condition (its first seed)."""
    ctx = prepare(cfg, out_dir)
    sources, _, clean_att, digest = clean_and_attack(ctx)
    conds = [c for c in build_conditions(cfg) if c.purify is not None]
    if labels:
        known = {c.label for c in conds}
        missing = [lb for lb in labels if lb not in known]
        if missing:
            raise StageError("purify", None, KeyError(f"unknown conditions {missing}"))
        conds = [c for c in conds if c.label in labels]
    dest_dir = ctx["out_dir"] / "purified"
    dest_dir.mkdir(parents=True, exist_ok=True)
    written = []
    n = len(ctx["eval"])
    with Executor(_base_state(ctx, sources, clean_att), ctx["workers"],
                  cfg["chunk_size"]) as ex:
        for c in conds:
            seed = c.seeds[0]
            parts = ex.map(_eval_task, f"purify:{c.label}", n, c.source, c.purify, seed, True)
            path = dest_dir / f"{_slug(c.label)}.f3ds"
            save_adversarial(ctx["eval"], _cat(parts, "images"), path,
                             {"purify": replace(c.purify, seed=seed).to_dict(),
                              "source_set": c.source, "model_sha256": digest,
                              "attack": attack_cfg_from(cfg["attack"]).to_dict(),
                              "config_hash": config_hash(cfg)}, kind="purified")
            written.append(path)
    return written


def export_heatmaps(cfg, out_dir=None):
    ctx = prepare(cfg, out_dir)
    sources, _, clean_att, _ = clean_and_attack(ctx)
    conds = build_conditions(cfg)
    return heatmap_stage(_base_state(ctx, sources, clean_att), cfg, conds, ctx["out_dir"])
