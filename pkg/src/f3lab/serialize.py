"""Bit-stable text formats: JSON with 17-significant-digit floats and the
per-sample records CSV."""
from __future__ import annotations

import csv
import json
import math

import numpy as np


def format_float(x):
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return format(x, ".17g")


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return {None: "null", True: "true", False: "false"}[None if obj is None else bool(obj)]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return _quote(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_quote(str(k))}: {_encode(obj[k], indent, level + 1)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _quote(s):
    return json.dumps(s, ensure_ascii=True)


def dumps(obj, indent=2):
    """JSON text with sorted keys and every float written with 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_text(path, text):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)


RECORD_FIELDS = ("condition", "kind", "seed", "index", "qtype", "label", "clean_pred",
                 "pred", "mse", "kl", "ref_mse", "ref_kl", "l1", "linf")
_INT_FIELDS = {"seed", "index", "qtype", "label", "clean_pred", "pred"}
_FLOAT_FIELDS = {"mse", "kl", "ref_mse", "ref_kl", "l1", "linf"}


def write_records(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            row = []
            for f in RECORD_FIELDS:
                v = r.get(f)
                if v is None:
                    row.append("")
                elif f in _FLOAT_FIELDS:
                    row.append(format_float(v))
                else:
                    row.append(str(int(v)) if f in _INT_FIELDS else str(v))
            w.writerow(row)


def read_records(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        out = []
        for row in reader:
            rec = {}
            for f in RECORD_FIELDS:
                v = row[f]
                if v == "":
                    rec[f] = None
                elif f in _INT_FIELDS:
                    rec[f] = int(v)
                elif f in _FLOAT_FIELDS:
                    rec[f] = float(v)
                else:
                    rec[f] = v
            out.append(rec)
    return out
