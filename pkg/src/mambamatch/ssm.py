"""Selective state-space primitives and the full Mamba block.

The block maps a sequence (N, C1) to (N, C1): layer norm, two linear
branches, a causal depthwise convolution with SiLU, input-dependent SSM
parameters, a zero-order-hold discretized diagonal recurrence, gating, and
a residual output projection. The recurrence is also available in a
time-invariant global-convolution mode for equivalence checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "SsmDims",
    "SsmBlockParams",
    "init_block",
    "discretize",
    "selective_scan",
    "global_conv_scan",
    "mamba_block",
]


@dataclass(frozen=True)
class SsmDims:
    """Width configuration: model width C1, expanded width C_e, state width C_s."""

    c_model: int = 32
    c_expand: int = 64
    c_state: int = 8
    conv_window: int = 4

    def __post_init__(self):
        if min(self.c_model, self.c_expand, self.c_state, self.conv_window) <= 0:
            raise ValueError("all SSM dimensions must be positive")
        if self.c_expand < self.c_model:
            raise ValueError("expanded width must be >= model width")


@dataclass
class SsmBlockParams:
    """Learnables of one block; projections are bias-free except the step bias."""

    w_x: Tensor        # C1 x C_e
    w_z: Tensor        # C1 x C_e
    conv_k: Tensor     # w x C_e depthwise
    w_dt: Tensor       # C_e x C_e
    dt_bias: Tensor    # C_e
    a_cont: Tensor     # C_e x C_s, strictly negative at init
    w_b: Tensor        # C_e x C_s
    w_c: Tensor        # C_e x C_s
    w_out: Tensor      # C_e x C1
    ln_gain: Tensor    # C1
    ln_shift: Tensor   # C1

    @property
    def dims(self) -> SsmDims:
        return SsmDims(self.w_x.shape[0], self.w_x.shape[1], self.a_cont.shape[1],
                       self.conv_k.shape[0])

    def named(self, prefix: str):
        return [(f"{prefix}.{name}", getattr(self, name))
                for name in ("w_x", "w_z", "conv_k", "w_dt", "dt_bias", "a_cont",
                             "w_b", "w_c", "w_out", "ln_gain", "ln_shift")]


def init_block(dims: SsmDims, rng: np.random.Generator, dtype=np.float32) -> SsmBlockParams:
    """Deterministic init: bounded-uniform weights, zero biases, negative-ramp A'."""
    c1, ce, cs, w = dims.c_model, dims.c_expand, dims.c_state, dims.conv_window

    def u(shape, fan_in):
        return Tensor(T.uniform_init(rng, shape, fan_in, dtype=dtype),
                      dtype=dtype, requires_grad=True)

    # A'[e, s] = -(s + 1): a deterministic ramp of decay timescales
    a0 = -np.tile(np.arange(1, cs + 1, dtype=dtype), (ce, 1))
    return SsmBlockParams(
        w_x=u((c1, ce), c1),
        w_z=u((c1, ce), c1),
        conv_k=u((w, ce), w),
        w_dt=u((ce, ce), ce),
        dt_bias=Tensor(np.zeros(ce, dtype), dtype=dtype, requires_grad=True),
        a_cont=Tensor(a0, dtype=dtype, requires_grad=True),
        w_b=u((ce, cs), ce),
        w_c=u((ce, cs), ce),
        # residual-branch output starts at zero: the block is the identity at
        # init, which the short desk-scale training budget depends on
        w_out=Tensor(np.zeros((ce, c1), dtype), dtype=dtype, requires_grad=True),
        ln_gain=Tensor(np.ones(c1, dtype), dtype=dtype, requires_grad=True),
        ln_shift=Tensor(np.zeros(c1, dtype), dtype=dtype, requires_grad=True),
    )


def discretize(a_cont: Tensor, b_cont: Tensor, dt: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold for the diagonal state matrix, Euler step for the input.

    a_cont: (C_e, C_s); b_cont: (N, C_s); dt: (N, C_e), strictly positive.
    Returns A, B of shape (N, C_e, C_s) with A = exp(dt * a_cont) and
    B = dt * b_cont.
    """
    n, ce = dt.shape
    cs = a_cont.shape[1]
    if a_cont.shape[0] != ce or b_cont.shape != (n, cs):
        raise ValueError("discretize: inconsistent shapes")
    if not (dt.data > 0).all():
        raise AssertionError("discretize requires dt > 0 (softplus upstream)")

    ad, bd, dd = a_cont.data, b_cont.data, dt.data
    a_full = np.exp(dd[:, :, None] * ad[None, :, :])
    b_full = dd[:, :, None] * bd[:, None, :]

    def bwd_a(g):
        ga = (g * a_full * dd[:, :, None]).sum(axis=0)
        gdt = (g * a_full * ad[None, :, :]).sum(axis=2)
        return ga.astype(ad.dtype), gdt.astype(dd.dtype)

    a_out = T._result(a_full.astype(dd.dtype), "discretize_a", (a_cont, dt), bwd_a)

    def bwd_b(g):
        gb = (g * dd[:, :, None]).sum(axis=1)
        gdt = (g * bd[:, None, :]).sum(axis=2)
        return gb.astype(bd.dtype), gdt.astype(dd.dtype)

    b_out = T._result(b_full.astype(dd.dtype), "discretize_b", (b_cont, dt), bwd_b)
    return a_out, b_out


def selective_scan(a: Tensor, b: Tensor, c: Tensor, x: Tensor) -> Tensor:
    """Diagonal SSM recurrence h_i = A_i*h + B_i*x_i, y_i = sum_s h_i * C_i.

    a, b: (N, C_e, C_s); c: (N, C_s); x: (N, C_e). The backward pass is the
    standard reverse recurrence over the stored state history.
    """
    n, ce, cs = a.shape
    if b.shape != (n, ce, cs) or c.shape != (n, cs) or x.shape != (n, ce):
        raise ValueError("selective_scan: inconsistent shapes")
    ad, bd, cd, xd = a.data, b.data, c.data, x.data
    hs = np.zeros((n, ce, cs), dtype=xd.dtype)
    y = np.zeros((n, ce), dtype=xd.dtype)
    h = np.zeros((ce, cs), dtype=xd.dtype)
    for i in range(n):
        h = ad[i] * h + bd[i] * xd[i][:, None]
        hs[i] = h
        # ordered accumulation over the state axis
        acc = np.zeros(ce, dtype=xd.dtype)
        for s in range(cs):
            acc += h[:, s] * cd[i, s]
        y[i] = acc

    def bwd(g):
        ga = np.zeros_like(ad)
        gb = np.zeros_like(bd)
        gc = np.zeros_like(cd)
        gx = np.zeros_like(xd)
        lam = g[n - 1][:, None] * cd[n - 1][None, :]
        for i in range(n - 1, -1, -1):
            gc[i] = (g[i][:, None] * hs[i]).sum(axis=0)
            h_prev = hs[i - 1] if i > 0 else np.zeros((ce, cs), dtype=xd.dtype)
            ga[i] = lam * h_prev
            gb[i] = lam * xd[i][:, None]
            gx[i] = (lam * bd[i]).sum(axis=1)
            if i > 0:
                lam = lam * ad[i] + g[i - 1][:, None] * cd[i - 1][None, :]
        return ga, gb, gc, gx

    return T._result(y, "selective_scan", (a, b, c, x), bwd)


def global_conv_scan(a_ti, b_ti, c_ti, x: Tensor) -> Tensor:
    """Time-invariant SSM evaluated as a causal convolution (verification mode).

    a_ti, b_ti: (C_e, C_s); c_ti: (C_s,). Stacked (N, ...) parameters are
    accepted only if every position carries identical values. The kernel is
    K_j = sum_s C * A^j * B and y = x (*) K, equal to ``selective_scan`` with
    position-constant parameters. Forward-only: no gradient is taped.
    """
    def collapse(arr, ndim):
        arr = np.asarray(arr, dtype=x.data.dtype)
        if arr.ndim == ndim + 1:
            if not (arr == arr[0]).all():
                raise ValueError("global_conv_scan requires position-invariant parameters")
            arr = arr[0]
        if arr.ndim != ndim:
            raise ValueError("global_conv_scan: bad parameter rank")
        return arr

    def raw(v):
        return v.data if isinstance(v, Tensor) else v

    ad = collapse(raw(a_ti), 2)
    bd = collapse(raw(b_ti), 2)
    cd = collapse(raw(c_ti), 1)
    xd = x.data
    n, ce = xd.shape
    # kernel taps K[j, e] via cumulative powers of the diagonal transition
    k = np.zeros((n, ce), dtype=xd.dtype)
    p = bd.copy()
    for j in range(n):
        k[j] = (p * cd[None, :]).sum(axis=1)
        p = p * ad
    y = np.zeros_like(xd)
    for i in range(n):
        for j in range(i + 1):
            y[i] += k[j] * xd[i - j]
    return Tensor(y, dtype=xd.dtype)


def mamba_block(seq: Tensor, params: SsmBlockParams) -> Tensor:
    """One full block: LN -> branches -> causal conv + SiLU -> SSM -> gate -> residual."""
    if seq.ndim != 2 or seq.shape[1] != params.w_x.shape[0]:
        raise ValueError(f"mamba_block: expected (N, {params.w_x.shape[0]}) input")
    normed = T.layer_norm(seq, params.ln_gain, params.ln_shift)
    x_pre = T.linear(normed, params.w_x)
    z = T.linear(normed, params.w_z)
    x = T.silu(T.conv1d_depthwise(x_pre, params.conv_k, mode="causal"))
    # softplus underflows to exact zero below -103 in f32; keep dt > 0
    dt = T.clamp_min(T.softplus(T.add(T.linear(x, params.w_dt), params.dt_bias)), 1e-30)
    b_cont = T.linear(x, params.w_b)
    c = T.linear(x, params.w_c)
    a, b = discretize(params.a_cont, b_cont, dt)
    y_ssm = selective_scan(a, b, c, x)
    gated = T.mul(y_ssm, T.silu(z))
    return T.add(T.linear(gated, params.w_out), seq)
