#!/usr/bin/env python3
"""A tour of the tensor core: taped ops, exact oracles, gradient checking.

Run:  python3 demos/01_tensor_autodiff.py
"""

import numpy as np

from mambamatch import tensor as T

rng = np.random.default_rng(0)

# --- forward ops are plain numpy underneath -------------------------------
x = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
y = T.tsum(T.mul(x, x))
print("sum(x^2) =", y.item())

grads = T.backward(y, [x])
print("d/dx sum(x^2) =\n", grads[x])  # 2x

# --- contractions accumulate taps in a fixed order ------------------------
# so a naive loop oracle reproduces them bit for bit, even in float32
a = rng.standard_normal((3, 4)).astype(np.float32)
w = rng.standard_normal((4, 2)).astype(np.float32)
fast = T.linear(T.Tensor(a), T.Tensor(w)).data
slow = np.zeros((3, 2), np.float32)
for i in range(3):
    for j in range(2):
        s = np.float32(0)
        for k in range(4):
            s = s + a[i, k] * w[k, j]
        slow[i, j] = s
print("tap-ordered linear == loop oracle:", np.array_equal(fast, slow))

# --- finite differences validate every composite gradient -----------------
leaf = T.Tensor(rng.standard_normal((4, 4)), dtype=np.float64, requires_grad=True)


def loss_fn(t):
    return T.tsum(T.mul(T.softmax(t, 1), T.gelu(t)))


analytic = T.backward(loss_fn(leaf), [leaf])[leaf]
h = 1e-3
flat = leaf.data.reshape(-1)
numeric = np.zeros_like(flat)
for i in range(flat.size):
    orig = flat[i]
    flat[i] = orig + h
    up = loss_fn(leaf).item()
    flat[i] = orig - h
    down = loss_fn(leaf).item()
    flat[i] = orig
    numeric[i] = (up - down) / (2 * h)
rel = np.abs(analytic.reshape(-1) - numeric) / (np.abs(numeric) + 1e-6)
print(f"max relative error vs central differences: {rel.max():.2e}")

# --- non-finite values are an error state, not a value --------------------
try:
    T.exp(T.Tensor([1000.0]))
except T.NonFiniteError as err:
    print("overflow raises:", err)
