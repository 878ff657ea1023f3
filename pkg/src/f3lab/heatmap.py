"""Attention heatmaps: the (L, H, M) attention tensor projected to an
(L, M) matrix by a max over heads, exported as a text grid and an 8-bit PGM."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .serialize import format_float

_TEXT_MAGIC = "# f3lab heatmap v1"
_DEGENERATE = 1e-12


def project(attention):
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected an (L, H, M) tensor, got shape {a.shape}")
    return a.max(axis=1)


def scale_matrix(mat):
    """Min-max scale to [0, 1]. A constant matrix maps to zeros and is flagged."""
    lo, hi = float(mat.min()), float(mat.max())
    degenerate = hi - lo < _DEGENERATE
    scaled = np.zeros_like(mat) if degenerate else (mat - lo) / (hi - lo)
    return scaled, {"min": lo, "max": hi, "degenerate": degenerate}


def export_heatmap(attention, stem):
    """Write ``stem.txt`` and ``stem.pgm``; return the scale record."""
    mat = project(attention)
    scaled, scale = scale_matrix(mat)
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    scale_line = (f"# scale {format_float(scale['min'])} {format_float(scale['max'])} "
                  f"degenerate={int(scale['degenerate'])}")
    lines = [_TEXT_MAGIC, f"# shape {mat.shape[0]} {mat.shape[1]}", scale_line]
    lines += [" ".join(format_float(v) for v in row) for row in scaled]
    with open(stem.with_suffix(".txt"), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{scale_line}\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode()
    with open(stem.with_suffix(".pgm"), "wb") as fh:
        fh.write(header + pixels.tobytes())
    return scale


def _parse_scale(line):
    parts = line.split()
    return {"min": float(parts[2]), "max": float(parts[3]),
            "degenerate": parts[4] == "degenerate=1"}


def _unscale(scaled, scale):
    if scale["degenerate"]:
        return np.full_like(scaled, scale["min"])
    return scale["min"] + scaled * (scale["max"] - scale["min"])


def import_heatmap(path):
    """Read a ``.txt`` or ``.pgm`` export back to the unscaled (L, M) matrix."""
    path = Path(path)
    if path.suffix == ".pgm":
        return _import_pgm(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _TEXT_MAGIC:
        raise ValueError(f"{path}: not a heatmap text file")
    rows, cols = map(int, lines[1].split()[2:4])
    scale = _parse_scale(lines[2])
    scaled = np.array([[float(v) for v in ln.split()] for ln in lines[3:3 + rows]])
    if scaled.shape != (rows, cols):
        raise ValueError(f"{path}: grid is {scaled.shape}, header says {(rows, cols)}")
    return _unscale(scaled, scale)


def _import_pgm(path):
    blob = path.read_bytes()
    fields, scale, pos = [], None, 0
    while len(fields) < 4:
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode()
        pos = end + 1
        if line.startswith("# scale"):
            scale = _parse_scale(line)
        elif not line.startswith("#"):
            fields += line.split()
    if fields[0] != "P5" or scale is None:
        raise ValueError(f"{path}: not a heatmap PGM")
    cols, rows = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(blob[pos:pos + rows * cols], dtype=np.uint8)
    return _unscale(pixels.reshape(rows, cols) / 255.0, scale)
