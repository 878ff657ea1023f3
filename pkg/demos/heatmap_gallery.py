"""Export clean, adversarial and purified attention heatmaps for a few
samples of a finished run, then print them as coarse ASCII art.

    f3lab eval configs/smoke.json --output runs/smoke
    python3 demos/heatmap_gallery.py configs/smoke.json runs/smoke
"""
import sys

from f3lab.config import load_config
from f3lab.harness import export_heatmaps
from f3lab.heatmap import import_heatmap

SHADES = " .:-=+*#%@"


def ascii_art(mat):
    lo, hi = mat.min(), mat.max()
    span = hi - lo if hi > lo else 1.0
    return "\n".join("".join(SHADES[int((v - lo) / span * (len(SHADES) - 1))] for v in row)
                     for row in mat)


def main(config, out):
    cfg = load_config(config)
    for h in export_heatmaps(cfg, out):
        mat = import_heatmap(f"{out}/{h['file']}.txt")
        print(f"{h['condition']}  sample {h['sample']}  (layers x visual tokens)")
        print(ascii_art(mat))
        print()


if __name__ == "__main__":
    main(*sys.argv[1:3])
