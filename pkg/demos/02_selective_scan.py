#!/usr/bin/env python3
"""The selective state-space recurrence and its global-convolution twin.

Shows the zero-order-hold discretization, the causal recurrence, the
time-invariant convolutional mode agreeing with it, and the causality of a
full block.

Run:  python3 demos/02_selective_scan.py
"""

import numpy as np

from mambamatch import tensor as T
from mambamatch.ssm import (SsmDims, discretize, global_conv_scan, init_block,
                            mamba_block, selective_scan)

rng = np.random.default_rng(0)

# --- discretization: A = exp(dt * A'), B = dt * B' -------------------------
a_cont = T.Tensor(np.full((1, 1), -1.0))
b_cont = T.Tensor(np.ones((1, 1)))
dt = T.Tensor(np.full((1, 1), np.log(2.0)))
a, b = discretize(a_cont, b_cont, dt)
print(f"A' = -1, dt = ln 2  ->  A = {a.data[0, 0, 0]:.3f}  (exp(-ln 2) = 0.5)")

# --- the recurrence, by hand: h = 0.5 h + x, y = 2 h -----------------------
n = 6
a = T.Tensor(np.full((n, 1, 1), 0.5))
b = T.Tensor(np.ones((n, 1, 1)))
c = T.Tensor(np.full((n, 1), 2.0))
x = T.Tensor(np.ones((n, 1)))
y = selective_scan(a, b, c, x)
print("recurrent outputs:", np.round(y.data[:, 0], 4))  # 2, 3, 3.5, ...

# --- time-invariant parameters: recurrence == causal convolution ----------
ce, cs, n = 4, 3, 48
a_ti = rng.uniform(0, 0.95, (ce, cs)).astype(np.float32)
b_ti = rng.standard_normal((ce, cs)).astype(np.float32)
c_ti = rng.standard_normal(cs).astype(np.float32)
seq = rng.standard_normal((n, ce)).astype(np.float32)
rec = selective_scan(T.Tensor(np.broadcast_to(a_ti, (n, ce, cs)).copy()),
                     T.Tensor(np.broadcast_to(b_ti, (n, ce, cs)).copy()),
                     T.Tensor(np.broadcast_to(c_ti, (n, cs)).copy()),
                     T.Tensor(seq))
conv = global_conv_scan(a_ti, b_ti, c_ti, T.Tensor(seq))
print(f"max |recurrent - convolutional| over N={n}: {np.abs(rec.data - conv.data).max():.2e}")

# --- the full block is causal ----------------------------------------------
params = init_block(SsmDims(c_model=3, c_expand=6, c_state=4), rng)
params.w_out.data[:] = rng.standard_normal(params.w_out.shape) * 0.2
base = rng.standard_normal((8, 3)).astype(np.float32)
out0 = mamba_block(T.Tensor(base), params).data
bumped = base.copy()
bumped[4] += 1.0
out1 = mamba_block(T.Tensor(bumped), params).data
print("positions 0-3 unchanged after bumping position 4:",
      np.array_equal(out0[:4], out1[:4]))
print("positions 4-7 changed:", not np.allclose(out0[4:], out1[4:]))
