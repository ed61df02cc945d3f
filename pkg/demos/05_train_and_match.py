#!/usr/bin/env python3
"""End to end: synthesize a corpus, train briefly, match a held-out pair.

Takes a couple of minutes on one core. For the full training smoke test see
tests/test_acceptance.py.

Run:  python3 demos/05_train_and_match.py
"""

import os
import tempfile

import numpy as np

from mambamatch.matcher import match_pair, write_matches
from mambamatch.pgm import write_pgm
from mambamatch.supervision import (TrainConfig, coarse_precision, random_texture,
                                    synth_pair, train)

work = tempfile.mkdtemp(prefix="mambamatch_demo_")
corpus = os.path.join(work, "corpus")
os.makedirs(corpus)

rng = np.random.default_rng(7)
for i in range(8):
    write_pgm(os.path.join(corpus, f"texture_{i:02d}.pgm"), random_texture(rng, 96))
print("corpus of 8 synthetic textures at", corpus)

config = TrainConfig(steps=120, seed=0)
print(f"training {config.steps} steps (batch {config.batch}) ...")
weights, metrics = train(config, corpus, os.path.join(work, "run"))
for row in metrics[:: max(1, len(metrics) // 5)]:
    print(f"  epoch {row['epoch']:2d}: coarse {row['loss_c']:.3f} "
          f"fine {row['loss_f']:.3f} subpix {row['loss_s']:.3f} "
          f"precision {row['precision']:.2f}")

# --- match a completely fresh warped pair ----------------------------------
pair = synth_pair(random_texture(np.random.default_rng(99), 96),
                  np.random.default_rng(100))
matches = match_pair(pair.img_a, pair.img_b, weights)
correct, total = coarse_precision(matches, pair.h_mat)
print(f"\nheld-out pair: {total} matches, {correct} within one coarse cell "
      f"({correct / max(total, 1):.0%})")

out = os.path.join(work, "matches.txt")
write_matches(out, matches)
print("match records written to", out)
with open(out) as f:
    for line in list(f)[:5]:
        print("  ", line.rstrip())
