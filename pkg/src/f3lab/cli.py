"""Command line: ``f3lab <subcommand> CONFIG [--set key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import ConfigError, load_config, resolve_output_dir
from .fileio import CorruptFileError, VersionError


def _parser():
    p = argparse.ArgumentParser(prog="f3lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the train/eval datasets",
        "train": "train (or load) the model and write model.f3ck",
        "attack": "attack the eval set and write adversarial.f3ds",
        "purify": "purify the adversarial set with every grid condition",
        "eval": "run the whole experiment and write records, report and tables",
        "report": "rebuild report.json and tables.txt from saved records",
        "heatmap": "export attention heatmaps",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field (dotted key)")
        sp.add_argument("--output", help="output directory (overrides output_dir)")
        sp.add_argument("--workers", type=int, help="worker processes")
        if name == "purify":
            sp.add_argument("--condition", action="append", help="only this condition label")
        if name == "heatmap":
            sp.add_argument("--sample", type=int, action="append", help="sample index")
            sp.add_argument("--condition", action="append", help="condition label")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        if getattr(args, "sample", None):
            overrides.append(f"heatmaps.samples={args.sample}")
        if args.command == "heatmap" and args.condition:
            overrides.append("heatmaps.conditions=" + _json_list(args.condition))
        cfg = load_config(args.config, overrides)
        out = args.output or resolve_output_dir(cfg)
        return _dispatch(args, cfg, out)
    except (ConfigError, CorruptFileError, VersionError, harness.StageError,
            FileNotFoundError, KeyError) as exc:
        print(f"f3lab {args.command}: error: {exc}", file=sys.stderr)
        return 1


def _json_list(items):
    import json
    return json.dumps(list(items))


def _dispatch(args, cfg, out):
    cmd = args.command
    if cmd == "gen-data":
        for p in harness.export_datasets(cfg, out):
            print(p)
    elif cmd == "train":
        path, acc = harness.export_model(cfg, out)
        print(f"{path}  held-out accuracy {acc:.2f}")
    elif cmd == "attack":
        print(harness.export_adversarial(cfg, out))
    elif cmd == "purify":
        for p in harness.export_purified(cfg, out, args.condition):
            print(p)
    elif cmd == "eval":
        harness.run_experiment(cfg, out_dir=out)
        print(f"{out}/{harness.REPORT_NAME}")
    elif cmd == "report":
        harness.write_report(cfg, out)
        print(f"{out}/{harness.TABLES_NAME}")
    elif cmd == "heatmap":
        for h in harness.export_heatmaps(cfg, out):
            print(f"{out}/{h['file']}.pgm")
    return 0


if __name__ == "__main__":
    sys.exit(main())
