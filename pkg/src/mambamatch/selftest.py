"""Built-in invariant suites for the command-line self test.

Covers the load-bearing structural properties: scan partition and
round-trip, recurrent/convolutional SSM equivalence, block causality, and
finite-difference gradient checks. ``fault="merge"`` corrupts the merge
scatter of a copied layout so the partition suite demonstrably fails.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .jego import Direction, ScanLayout, build_layout, jego_merge, jego_scan, joint_concat
from .ssm import SsmDims, global_conv_scan, init_block, mamba_block, selective_scan
from .supervision import coarse_loss, epipolar_loss, essential_matrix

__all__ = ["run_selftest"]


def _fault_layout(layout: ScanLayout) -> ScanLayout:
    # swap two scatter destinations in direction 0: partition now lies
    d0 = layout.directions[0]
    flat = d0.flat.copy()
    flat[0], flat[1] = flat[1], flat[0]
    bad = Direction(d0.index, d0.name, d0.grid, d0.offset, d0.flip, flat, d0.joint)
    return ScanLayout(layout.hc, layout.wc, layout.step,
                      (bad,) + layout.directions[1:], layout.dir_of, layout.seq_pos)


def _suite_partition(fault: str | None) -> bool:
    ok = True
    for hc, wc in [(2, 2), (4, 6), (8, 8)]:
        layout = build_layout(hc, wc)
        seen = np.zeros(2 * hc * wc, dtype=int)
        for d in layout.directions:
            ids = d.joint[:, 0] * hc * wc + d.joint[:, 1] * wc + d.joint[:, 2]
            seen[ids] += 1
        ok &= bool((seen == 1).all())
    return ok


def _suite_round_trip(fault: str | None) -> bool:
    rng = np.random.default_rng(0)
    ok = True
    for hc, wc in [(2, 2), (6, 4), (8, 8)]:
        layout = build_layout(hc, wc)
        merge_layout = _fault_layout(layout) if fault == "merge" else layout
        a = rng.standard_normal((hc, wc, 3)).astype(np.float32)
        b = rng.standard_normal((hc, wc, 3)).astype(np.float32)
        xh, xv = joint_concat(T.Tensor(a), T.Tensor(b))
        ra, rb = jego_merge(jego_scan(xh, xv, layout), merge_layout)
        ok &= np.array_equal(ra.data, a) and np.array_equal(rb.data, b)
    return ok


def _suite_mode_equivalence(fault: str | None) -> bool:
    ok = True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n, ce, cs = int(rng.integers(4, 64)), 4, 3
        a = rng.uniform(0.0, 0.99, (ce, cs)).astype(np.float32)
        b = rng.standard_normal((ce, cs)).astype(np.float32)
        c = rng.standard_normal(cs).astype(np.float32)
        x = rng.standard_normal((n, ce)).astype(np.float32)
        rec = selective_scan(T.Tensor(np.broadcast_to(a, (n, ce, cs)).copy()),
                             T.Tensor(np.broadcast_to(b, (n, ce, cs)).copy()),
                             T.Tensor(np.broadcast_to(c, (n, cs)).copy()),
                             T.Tensor(x)).data
        conv = global_conv_scan(a, b, c, T.Tensor(x)).data
        ok &= bool(np.abs(rec - conv).max() < 1e-5)
    return ok


def _suite_causality(fault: str | None) -> bool:
    rng = np.random.default_rng(1)
    params = init_block(SsmDims(c_model=3, c_expand=4, c_state=2), rng)
    base_in = rng.standard_normal((8, 3)).astype(np.float32)
    base_out = mamba_block(T.Tensor(base_in), params).data
    ok = True
    for i in range(8):
        bumped = base_in.copy()
        bumped[i] += 0.5
        out = mamba_block(T.Tensor(bumped), params).data
        ok &= np.array_equal(out[:i], base_out[:i])
    return ok


def _fd_check(fn, leaves, h=1e-3, rtol=1e-4) -> bool:
    loss = fn(leaves)
    grads = T.backward(loss, leaves)
    for t in leaves:
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(leaves).item()
            flat[i] = orig - h
            lm = fn(leaves).item()
            flat[i] = orig
            num[i] = (lp - lm) / (2 * h)
        rel = np.abs(grads[t].reshape(-1) - num) / (np.abs(num) + 1e-6)
        if rel.max() >= rtol:
            return False
    return True


def _suite_gradients(fault: str | None) -> bool:
    rng = np.random.default_rng(2)

    def leaf(shape):
        return T.Tensor(rng.standard_normal(shape), dtype=np.float64, requires_grad=True)

    ok = _fd_check(lambda ls: T.tsum(T.mul(T.softmax(ls[0], 1), ls[1])),
                   [leaf((3, 4)), leaf((3, 4))])
    ok &= _fd_check(lambda ls: T.tsum(T.mul(T.conv2d(ls[0], ls[1]), T.conv2d(ls[0], ls[1]))),
                    [leaf((4, 4, 2)), leaf((3, 3, 2, 1))])
    gt = np.zeros((3, 3), np.float64)
    gt[0, 0] = gt[1, 2] = 1.0
    ok &= _fd_check(lambda ls: coarse_loss(T.softmax(ls[0], 1), T.softmax(ls[0], 0), gt),
                    [leaf((3, 3))])
    e = essential_matrix(np.eye(3), np.array([0.3, -0.5, 0.8]))

    def eploss(ls):
        ones = T.Tensor(np.ones((4, 1)), dtype=np.float64)
        xb = T.concat([ls[0], ones], axis=1)
        ya = T.concat([ls[1], ones], axis=1)
        return epipolar_loss(xb, ya, e)

    ok &= _fd_check(eploss, [leaf((4, 2)), leaf((4, 2))])
    return ok


SUITES = [
    ("partition", _suite_partition),
    ("round-trip", _suite_round_trip),
    ("mode-equivalence", _suite_mode_equivalence),
    ("causality", _suite_causality),
    ("gradients", _suite_gradients),
]


def run_selftest(fault: str | None = None, log=print) -> bool:
    """Run all suites, print one status line each, return overall pass."""
    all_ok = True
    for name, suite in SUITES:
        ok = suite(fault)
        log(f"{name}: {'PASS' if ok else 'FAIL'}")
        all_ok &= ok
    return all_ok
