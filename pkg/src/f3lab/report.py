"""Aggregate per-sample records into condition rows and summary tables.

Everything here is a pure function of (provenance, manifest, records), so a
report can always be rebuilt from the persisted CSV.
"""
from __future__ import annotations

import math
from collections import defaultdict

from .data import QTYPES

REPORT_VERSION = 1
_ORDER_TOL = 2.0     # points of slack for the "v3 >= v2" gate


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else None


def aggregate(records, pixel_count):
    """One condition's summary row from its records."""
    n = len(records)
    if n == 0:
        raise ValueError("no records to aggregate")
    correct = [float(r["pred"] == r["label"]) for r in records]
    by_seed = defaultdict(list)
    for r, c in zip(records, correct):
        by_seed[r["seed"]].append(c)
    seed_acc = [100 * _mean(v) for _, v in sorted(by_seed.items())]
    acc = 100 * _mean(correct)
    std = math.sqrt(_mean((a - _mean(seed_acc)) ** 2 for a in seed_acc)) if seed_acc else 0.0
    by_q = {}
    for k, name in enumerate(QTYPES):
        sel = [c for r, c in zip(records, correct) if r["qtype"] == k]
        if sel:
            by_q[name] = 100 * _mean(sel)
    ref = [r for r in records if r["ref_mse"] is not None]
    l1 = _mean(r["l1"] for r in records)
    return {
        "n_records": n,
        "n_samples": len({r["index"] for r in records}),
        "seeds": sorted(by_seed),
        "accuracy": acc,
        "accuracy_by_seed": seed_acc,
        "accuracy_seed_std": std,
        "accuracy_by_qtype": by_q,
        "asr": _mean(float(r["pred"] != r["clean_pred"]) for r in records),
        "mse": _mean(r["mse"] for r in records),
        "kl": _mean(r["kl"] for r in records),
        "ref_mse": _mean(r["ref_mse"] for r in ref) if ref else None,
        "ref_kl": _mean(r["ref_kl"] for r in ref) if ref else None,
        "l1": l1,
        "l1_per_pixel": l1 / pixel_count,
        "linf_mean": _mean(r["linf"] for r in records),
        "linf_max": max(r["linf"] for r in records),
    }


def build_report(provenance, manifest, records):
    groups = defaultdict(list)
    for r in records:
        groups[r["condition"]].append(r)
    img = provenance["config"]["model"]["config"].get("image_size", 16)
    pixels = img * img * 3
    rows = []
    for cond in manifest["conditions"]:
        recs = groups.get(cond["label"], [])
        row = {"condition": cond["label"], "kind": cond["kind"], "source": cond["source"],
               "purify": cond["purify"]}
        row.update(aggregate(recs, pixels))
        rows.append(row)
    subset_acc = _subset_accuracy(groups, manifest)
    tables = {
        "variant_grid": _variant_grid(rows),
        "oracle": _oracle(rows),
        "reference_drift": _reference_drift(rows),
        "attention": _attention(rows),
        "clean_impact": _clean_impact(rows),
        "multistep": _multistep(rows, manifest.get("calibration"), pixels),
        "distance": _distance(rows),
        "adaptive": _adaptive(rows, subset_acc),
    }
    return {"format": "f3lab-report", "version": REPORT_VERSION, "provenance": provenance,
            "model": manifest["model"], "eval": manifest["eval"], "rows": rows,
            "tables": tables, "checks": _checks(tables), "heatmaps": manifest.get("heatmaps", [])}


def _subset_accuracy(groups, manifest):
    """Accuracy of the main adversarial set on each adaptive subset."""
    out = {}
    adv = groups.get("adversarial", [])
    for c in manifest["conditions"]:
        if c["kind"] == "adaptive_attack" and adv:
            n = c["n"] if c["n"] is not None else manifest["eval"]["n"]
            sel = [float(r["pred"] == r["label"]) for r in adv if r["index"] < n]
            out[c["label"]] = 100 * _mean(sel)
    return out


def _p(row, key):
    return None if row["purify"] is None else row["purify"][key]


def _find(rows, kind):
    return next((r for r in rows if r["kind"] == kind), None)


def _variant_grid(rows):
    grid = {"v1": {}, "v2": {}, "v3": {}}
    for r in rows:
        if r["kind"] != "purify" or _p(r, "variant") not in grid or _p(r, "distance") != "mse":
            continue
        v, a, b = _p(r, "variant"), _p(r, "alpha_inf"), _p(r, "beta_inf")
        key = _k(a) if v == "v1" else f"{_k(a)}|{_k(b)}"
        grid[v][key] = r["accuracy"]
    return grid


def _k(x):
    return format(x * 255, ".6g")


def _oracle(rows):
    return [{"gamma_inf": _p(r, "gamma_inf"), "accuracy": r["accuracy"], "mse": r["mse"],
             "kl": r["kl"]} for r in rows if r["kind"] == "purify" and _p(r, "variant") == "oracle"]


def _reference_drift(rows):
    adv = _find(rows, "attack")
    out = [{"alpha_inf": _p(r, "alpha_inf"), "ref_mse": r["ref_mse"], "ref_kl": r["ref_kl"],
            "accuracy": r["accuracy"]}
           for r in rows if r["kind"] == "purify" and _p(r, "variant") == "v1"]
    out.sort(key=lambda d: d["alpha_inf"])
    return {"rows": out, "adversarial_mse": adv["mse"] if adv else None,
            "adversarial_accuracy": adv["accuracy"] if adv else None}


def _attention(rows):
    return [{"condition": r["condition"], "mse": r["mse"], "kl": r["kl"]}
            for r in rows if r["kind"] in ("clean", "attack", "purify")]


def _clean_impact(rows):
    clean = _find(rows, "clean")
    out = [{"variant": _p(r, "variant"), "alpha_inf": _p(r, "alpha_inf"),
            "beta_inf": _p(r, "beta_inf"), "accuracy": r["accuracy"]}
           for r in rows if r["kind"] == "clean_purify"]
    out.sort(key=lambda d: (d["variant"], d["alpha_inf"], d["beta_inf"]))
    return {"clean_accuracy": clean["accuracy"] if clean else None, "rows": out}


def _multistep(rows, calibration, pixels):
    out = []
    for r in rows:
        if r["kind"] not in ("multistep", "multistep_matched"):
            continue
        out.append({"condition": r["condition"], "K": _p(r, "K") if r["kind"] == "multistep" else 1,
                    "beta_inf": _p(r, "beta_inf"), "alpha_inf": _p(r, "alpha_inf"),
                    "eps_inf": (_p(r, "eps_inf_total") if r["kind"] == "multistep"
                                else _p(r, "beta_inf")),
                    "l1_total": r["l1"], "l1_per_pixel": r["l1_per_pixel"],
                    "accuracy": r["accuracy"]})
    if len(out) == 2:
        m, s = out
        gap = abs(s["l1_total"] - m["l1_total"]) / m["l1_total"] if m["l1_total"] else None
        return {"rows": out, "l1_relative_gap": gap, "calibration": calibration}
    return {"rows": out, "l1_relative_gap": None, "calibration": calibration}


def _distance(rows):
    by = defaultdict(dict)
    for r in rows:
        if r["kind"] == "purify" and _p(r, "variant") == "v3":
            by[(_p(r, "alpha_inf"), _p(r, "beta_inf"))][_p(r, "distance")] = r["accuracy"]
    out = []
    for (a, b), d in sorted(by.items()):
        if "mse" in d and "kl" in d:
            out.append({"alpha_inf": a, "beta_inf": b, "mse": d["mse"], "kl": d["kl"],
                        "difference": d["kl"] - d["mse"]})
    return out


def _adaptive(rows, subset_acc):
    out = []
    for r in rows:
        if r["kind"] != "adaptive_attack":
            continue
        pur = next((p for p in rows if p["kind"] == "adaptive_purify"
                    and p["source"] == r["condition"]), None)
        out.append({"attack": r["condition"], "undefended_pgd_accuracy": subset_acc.get(r["condition"]),
                    "adaptive_no_purify_accuracy": r["accuracy"],
                    "adaptive_purified_accuracy": pur["accuracy"] if pur else None,
                    "purified_condition": pur["condition"] if pur else None,
                    "n_samples": r["n_samples"]})
    return out


def _checks(tables):
    """Trend flags: the variant ordering at every (alpha, beta) grid cell."""
    g = tables["variant_grid"]
    flags = []
    for key, v3 in sorted(g["v3"].items()):
        a = key.split("|")[0]
        v2, v1 = g["v2"].get(key), g["v1"].get(a)
        if v2 is None or v1 is None:
            continue
        flags.append({"cell": key, "v1": v1, "v2": v2, "v3": v3,
                      "v3_ge_v2": v3 >= v2, "v2_ge_v1": v2 >= v1,
                      "v3_within_tolerance_of_v2": v3 >= v2 - _ORDER_TOL,
                      "ordering_violated": not (v3 >= v2 >= v1)})
    return {"variant_ordering": flags}


# -- text rendering ------------------------------------------------------------------

def _f(x, spec=".2f"):
    return "-" if x is None else format(x, spec)


def _b(x):
    return "-" if x is None else format(x * 255, ".4g") + "/255"


def render_tables(report):
    prov = report["provenance"]
    head = (f"# config {prov['config_hash'][:16]}  seed {prov['config']['seed']}  "
            f"code {prov['code_version']}  regenerate: {prov['regenerate']}")
    out = [head, ""]
    t = report["tables"]

    out.append("== Accuracy, attack success and attention similarity per condition ==")
    out.append(f"{'condition':<48} {'n':>5} {'acc':>7} {'ASR%':>7} {'MSEx1e3':>9} "
               f"{'KLx1e3':>9} {'l1/px*255':>10} {'linf*255':>9}")
    for r in report["rows"]:
        out.append(f"{r['condition']:<48} {r['n_records']:>5} {_f(r['accuracy']):>7} "
                   f"{_f(100 * r['asr']):>7} {_f(1e3 * r['mse'], '.4f'):>9} "
                   f"{_f(1e3 * r['kl'], '.4f'):>9} {_f(255 * r['l1_per_pixel'], '.3f'):>10} "
                   f"{_f(255 * r['linf_mean'], '.3f'):>9}")
    out.append("")

    g = t["variant_grid"]
    if any(g.values()):
        out.append("== Variant grid: accuracy by alpha (rows) and beta (columns), x/255 ==")
        if g["v1"]:
            out.append("v1  " + "  ".join(f"a={k}: {_f(v)}" for k, v in
                                          sorted(g["v1"].items(), key=lambda kv: float(kv[0]))))
        for v in ("v2", "v3"):
            if not g[v]:
                continue
            alphas = sorted({k.split("|")[0] for k in g[v]}, key=float)
            betas = sorted({k.split("|")[1] for k in g[v]}, key=float)
            out.append(f"{v:<6}" + "".join(f"{'b=' + b:>9}" for b in betas))
            for a in alphas:
                out.append(f"a={a:<4}" + "".join(f"{_f(g[v].get(a + '|' + b)):>9}" for b in betas))
        for c in report["checks"]["variant_ordering"]:
            if c["ordering_violated"]:
                out.append(f"FLAG ordering v3 >= v2 >= v1 violated at {c['cell']}: "
                           f"v1 {_f(c['v1'])} v2 {_f(c['v2'])} v3 {_f(c['v3'])}")
        out.append("")

    if t["oracle"]:
        out.append("== Oracle alignment toward clean attention ==")
        for r in t["oracle"]:
            out.append(f"gamma {_b(r['gamma_inf']):>9}  acc {_f(r['accuracy'])}  "
                       f"MSEx1e3 {_f(1e3 * r['mse'], '.4f')}  KLx1e3 {_f(1e3 * r['kl'], '.4f')}")
        out.append("")

    rd = t["reference_drift"]
    if rd["rows"]:
        out.append("== Reference attention drift: MSE(A_clean, A(x_R)) by alpha ==")
        out.append(f"adversarial baseline MSEx1e3 {_f(1e3 * rd['adversarial_mse'], '.4f')}  "
                   f"acc {_f(rd['adversarial_accuracy'])}")
        for r in rd["rows"]:
            out.append(f"alpha {_b(r['alpha_inf']):>9}  MSEx1e3 {_f(1e3 * r['ref_mse'], '.4f')}  "
                       f"KLx1e3 {_f(1e3 * r['ref_kl'], '.4f')}  acc {_f(r['accuracy'])}")
        out.append("")

    ci = t["clean_impact"]
    if ci["rows"]:
        out.append("== Purification applied to clean inputs ==")
        out.append(f"unpurified clean accuracy {_f(ci['clean_accuracy'])}")
        for r in ci["rows"]:
            out.append(f"{r['variant']} alpha {_b(r['alpha_inf'])} beta {_b(r['beta_inf']):>9}  "
                       f"acc {_f(r['accuracy'])}")
        out.append("")

    ms = t["multistep"]
    if ms["rows"]:
        out.append("== Multi-step vs single-step at matched l1 ==")
        out.append(f"{'K':>3} {'beta':>11} {'alpha':>9} {'eps':>11} {'l1 total':>10} "
                   f"{'l1/pixel':>10} {'acc':>7}")
        for r in ms["rows"]:
            out.append(f"{r['K']:>3} {_b(r['beta_inf']):>11} {_b(r['alpha_inf']):>9} "
                       f"{_b(r['eps_inf']):>11} {_f(r['l1_total'], '.4f'):>10} "
                       f"{_f(r['l1_per_pixel'], '.6f'):>10} {_f(r['accuracy']):>7}")
        if ms["l1_relative_gap"] is not None:
            out.append(f"relative l1 gap {_f(100 * ms['l1_relative_gap'])}%")
        out.append("")

    if t["distance"]:
        out.append("== Attention distance: MSE vs KL (F3-v3 accuracy) ==")
        for r in t["distance"]:
            out.append(f"alpha {_b(r['alpha_inf'])} beta {_b(r['beta_inf'])}  mse {_f(r['mse'])}  "
                       f"kl {_f(r['kl'])}  diff {_f(r['difference'])}")
        out.append("")

    if t["adaptive"]:
        out.append("== Adaptive attack (EOT-PGD through the purifier) ==")
        for r in t["adaptive"]:
            out.append(f"{r['attack']}  n {r['n_samples']}")
            out.append(f"  undefended under PGD      {_f(r['undefended_pgd_accuracy'])}")
            out.append(f"  adaptive, no purification {_f(r['adaptive_no_purify_accuracy'])}")
            out.append(f"  adaptive, purified        {_f(r['adaptive_purified_accuracy'])}")
        out.append("")
    return "\n".join(out) + "\n"
