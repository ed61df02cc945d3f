#!/usr/bin/env python3
"""The joint four-directional skip scan: layout, partition, exact round trip.

Run:  python3 demos/03_jego_scan_merge.py
"""

import numpy as np

from mambamatch import tensor as T
from mambamatch.jego import build_layout, dump_layout, jego_merge, jego_scan, joint_concat

# --- a 4x4 pair: four sequences of length N/4 = 8 --------------------------
layout = build_layout(4, 4)
print(f"joint tokens N = {layout.total_tokens}, per direction = {layout.sequence_length}")
print(dump_layout(build_layout(2, 2)))  # small enough to read in full

# each direction starts at a distinct (row, col) offset class, so every 2x2
# block of each image holds one cell of every direction
dir_map = layout.dir_of.reshape(2, 4, 4)
print("direction ownership, image A:\n", dir_map[0])

# --- within one sequence the two images interleave -------------------------
d1 = layout.directions[0]
membership = "".join("AB"[img] for img, _, _ in d1.joint)
print("image membership along the rightward scan:", membership)

# --- scan and merge are exact inverses -------------------------------------
rng = np.random.default_rng(0)
fa = rng.standard_normal((4, 4, 8)).astype(np.float32)
fb = rng.standard_normal((4, 4, 8)).astype(np.float32)
xh, xv = joint_concat(T.Tensor(fa), T.Tensor(fb))
sequences = jego_scan(xh, xv, layout)
ra, rb = jego_merge(sequences, layout)
print("merge(scan(F)) == F bit-exactly:",
      np.array_equal(ra.data, fa) and np.array_equal(rb.data, fb))

# --- token ledger: joint skip scan keeps the total at N ---------------------
from mambamatch.analysis import strategy_table

print("\nstrategy ledger for an 8x8 pair (N = 128):")
print(f"{'strategy':>12} {'tokens':>8} {'omni':>5} {'global':>7}")
for row in strategy_table(8, 8):
    print(f"{row.name:>12} {row.tokens:>8} {str(row.omnidirectional):>5} "
          f"{str(row.global_field):>7}")
