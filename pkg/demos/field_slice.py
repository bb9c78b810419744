"""Print a coarse ASCII view of the static potential field of the fig2_layout preset."""

import csv
import sys
import tempfile
from pathlib import Path

import numpy as np

from apfdrive.batch import dump_field
from apfdrive.config import load_config

SHADES = " .:-=+*#%@"


def main():
    cfg = load_config("fig2_layout")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "field.csv"
        dump_field(cfg, -6.0, 12.0, -6.0, 6.0, 0.5, str(out))
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
    xs = sorted({float(r["x"]) for r in rows})
    ys = sorted({float(r["y"]) for r in rows}, reverse=True)
    total = {(float(r["x"]), float(r["y"])): float(r["F_total"]) for r in rows}
    # log scale so the barriers don't wash out everything else
    grid = np.log1p(np.array([[total[(x, y)] for x in xs] for y in ys]))
    levels = np.minimum((grid / grid.max() * (len(SHADES) - 1)).astype(int), len(SHADES) - 1)
    for y, row in zip(ys, levels):
        sys.stdout.write(f"{y:6.2f} |" + "".join(SHADES[i] for i in row) + "|\n")
    print(f"x from {xs[0]} to {xs[-1]} m, peak {max(total.values()):.1f}")


if __name__ == "__main__":
    main()
