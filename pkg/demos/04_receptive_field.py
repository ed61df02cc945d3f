#!/usr/bin/env python3
"""Discrete receptive fields: why four flipped directions plus a 3x3
aggregator reach the whole pair while forward-only skip scanning cannot.

Writes coverage heatmaps (PGM) next to this script.

Run:  python3 demos/04_receptive_field.py
"""

import os

import numpy as np

from mambamatch.analysis import (aggregated_receptive, coverage_report, scan_receptive,
                                 write_coverage_pgm)
from mambamatch.jego import build_layout

layout = build_layout(8, 8)

# --- without aggregation a cell sees only its own sequence prefix ----------
start = tuple(layout.directions[0].joint[0])
end = tuple(layout.directions[0].joint[-1])
print("rightward scan start covers", scan_receptive(layout, start).sum(), "position(s)")
print("rightward scan end covers", scan_receptive(layout, end).sum(),
      f"of {layout.total_tokens} (its whole slice)")

# --- one 3x3 hop over balanced directions reaches everything ---------------
mid = (0, 4, 4)
print("interior cell + aggregation covers",
      aggregated_receptive(layout, mid).sum(), f"of {layout.total_tokens}")

rep_jego = coverage_report(8, 8, "jego")
rep_ev = coverage_report(8, 8, "evmamba")
print(f"jego     coverage: min {rep_jego.min_coverage:.3f}  mean {rep_jego.mean_coverage:.3f}")
print(f"evmamba  coverage: min {rep_ev.min_coverage:.3f}  mean {rep_ev.mean_coverage:.3f}")
print("forward-only scanning piles coverage toward the bottom-right corner:")
print(np.round(rep_ev.coverage[1], 2))

out_dir = os.path.dirname(os.path.abspath(__file__))
for name, rep in (("jego", rep_jego), ("evmamba", rep_ev)):
    path = os.path.join(out_dir, f"coverage_{name}.pgm")
    write_coverage_pgm(rep, path)
    print("wrote", path)
