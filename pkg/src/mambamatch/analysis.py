"""Discrete verification of complexity and receptive-field claims.

Two instruments:

* a token ledger: total sequence length as a function of the joint feature
  count N for each scan strategy (skip four-directional, skip forward-only,
  bidirectional, four-directional dense, pairwise attention);

* exhaustive reachability over the joint grid of an image pair. Each joint
  position belongs to exactly one directional sequence. ``scan_receptive``
  is the exact causal set: the positions at-or-before it within its own
  sequence. ``aggregated_receptive`` models one 3x3 aggregation hop: every
  neighbor contributes the causal cone of its scan direction's full sweep
  over the joint grid (all positions at-or-before the neighbor in that
  direction's raster order). Neighbors of a forward and a backward
  horizontal sequence sit raster-adjacent, and their two cones already
  cover the whole grid -- the discrete mechanism behind the globality
  claim. With radius 0 (no aggregation) the exact causal set is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jego import Direction, ScanLayout, build_layout, start_offset
from .pgm import write_pgm

__all__ = [
    "StrategyLedger",
    "strategy_tokens",
    "strategy_table",
    "build_layout_evmamba",
    "scan_receptive",
    "directional_cone",
    "aggregated_receptive",
    "CoverageReport",
    "coverage_report",
    "write_coverage_csv",
    "write_coverage_pgm",
]


@dataclass(frozen=True)
class StrategyLedger:
    name: str
    tokens: int
    directions: int
    omnidirectional: bool
    global_field: bool


_TOKEN_FACTORS = {"jego": 1, "evmamba": 1, "vim": 2, "vmamba": 4}


def strategy_tokens(strategy: str, h: int, w: int, p: int = 2) -> int:
    """Total tokens processed per layer for a joint pair with N = 2*h*w features."""
    n = 2 * h * w
    key = strategy.lower()
    if key == "transformer":
        return n * n  # pairwise interactions, flagged as quadratic
    if key not in _TOKEN_FACTORS:
        raise ValueError(f"unknown strategy {strategy!r}")
    return _TOKEN_FACTORS[key] * n


def strategy_table(h: int, w: int) -> list[StrategyLedger]:
    """The model-property ledger for a given grid size."""
    rows = [
        ("transformer", 1, False, True),
        ("evmamba", 2, False, False),
        ("vim", 2, False, True),
        ("vmamba", 4, True, True),
        ("jego", 4, True, True),
    ]
    return [StrategyLedger(name, strategy_tokens(name, h, w), dirs, omni, glob)
            for name, dirs, omni, glob in rows]


# ---------------------------------------------------------------------------
# layouts under analysis


def build_layout_evmamba(hc: int, wc: int, step: int = 2) -> ScanLayout:
    """Skip-scan baseline: same four slices, forward traversals only.

    Horizontal slices scan right, vertical slices scan down; nothing is
    flipped, so only two directions exist and the receptive field piles up
    toward the bottom-right.
    """
    if hc % step or wc % step:
        raise ValueError("grid dims must be divisible by the skip step")
    specs = [(1, "right", "h"), (2, "right", "h"), (3, "down", "v"), (4, "down", "v")]
    directions = []
    for i, name, grid in specs:
        m, n = start_offset(i)
        gh, gw = (hc, 2 * wc) if grid == "h" else (2 * hc, wc)
        rr = np.arange(m, gh, step)
        cc = np.arange(n, gw, step)
        if grid == "h":
            rows, cols = np.repeat(rr, len(cc)), np.tile(cc, len(rr))
        else:
            rows, cols = np.tile(rr, len(cc)), np.repeat(cc, len(rr))
        flat = rows * gw + cols
        if grid == "h":
            joint = np.stack([cols // wc, rows, cols % wc], axis=1)
        else:
            joint = np.stack([rows // hc, rows % hc, cols], axis=1)
        directions.append(Direction(i, name, grid, (m, n), False, flat, joint))
    n_joint = 2 * hc * wc
    dir_of = np.full(n_joint, -1, dtype=np.intp)
    seq_pos = np.full(n_joint, -1, dtype=np.intp)
    for slot, d in enumerate(directions):
        ids = d.joint[:, 0] * hc * wc + d.joint[:, 1] * wc + d.joint[:, 2]
        dir_of[ids] = slot
        seq_pos[ids] = np.arange(len(ids))
    return ScanLayout(hc, wc, step, tuple(directions), dir_of, seq_pos)


def _joint_id(layout: ScanLayout, pos) -> int:
    img, r, c = pos
    if not (0 <= img < 2 and 0 <= r < layout.hc and 0 <= c < layout.wc):
        raise ValueError(f"position {pos} outside the joint grid")
    return int(img * layout.hc * layout.wc + r * layout.wc + c)


def _sweep_ranks(layout: ScanLayout) -> list[np.ndarray]:
    """Per direction: the rank of every joint position in its full-grid sweep."""
    hc, wc = layout.hc, layout.wc
    ids = np.arange(2 * hc * wc)
    img, rc = np.divmod(ids, hc * wc)
    r, c = np.divmod(rc, wc)
    ranks = []
    for d in layout.directions:
        if d.grid == "h":
            raster = r * (2 * wc) + img * wc + c
        else:
            raster = c * (2 * hc) + img * hc + r
        if d.flip:
            raster = (2 * hc * wc - 1) - raster
        ranks.append(raster)
    return ranks


def scan_receptive(layout: ScanLayout, pos) -> np.ndarray:
    """Exact causal set: boolean mask of positions preceding ``pos`` in its
    own directional sequence, inclusive."""
    jid = _joint_id(layout, pos)
    slot = int(layout.dir_of[jid])
    k = int(layout.seq_pos[jid])
    d = layout.directions[slot]
    mask = np.zeros(layout.total_tokens, dtype=bool)
    members = d.joint[: k + 1]
    ids = members[:, 0] * layout.hc * layout.wc + members[:, 1] * layout.wc + members[:, 2]
    mask[ids] = True
    return mask


def directional_cone(layout: ScanLayout, slot: int, pos) -> np.ndarray:
    """Full-sweep causal cone: every joint position at-or-before ``pos`` in
    direction ``slot``'s raster order over the whole joint grid."""
    ranks = _sweep_ranks(layout)[slot]
    return ranks <= ranks[_joint_id(layout, pos)]


def aggregated_receptive(layout: ScanLayout, pos, radius: int = 1) -> np.ndarray:
    """Receptive set after one aggregation hop of half-width ``radius``.

    radius 0 degenerates to the exact within-sequence causal set.
    """
    if radius == 0:
        return scan_receptive(layout, pos)
    img, r, c = pos
    ranks = _sweep_ranks(layout)
    mask = np.zeros(layout.total_tokens, dtype=bool)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < layout.hc and 0 <= cc < layout.wc):
                continue
            nid = _joint_id(layout, (img, rr, cc))
            slot = int(layout.dir_of[nid])
            mask |= ranks[slot] <= ranks[slot][nid]
    return mask


# ---------------------------------------------------------------------------
# coverage reports


@dataclass
class CoverageReport:
    hc: int
    wc: int
    kind: str
    coverage: np.ndarray  # (2, hc, wc) fraction of the joint grid reached

    @property
    def min_coverage(self) -> float:
        return float(self.coverage.min()) if self.coverage.size else 0.0

    @property
    def mean_coverage(self) -> float:
        return float(self.coverage.mean()) if self.coverage.size else 0.0

    def interior_min(self) -> float:
        """Minimum over positions whose 3x3 neighborhood is fully inside an image."""
        if self.hc < 3 or self.wc < 3:
            return float("nan")
        return float(self.coverage[:, 1:-1, 1:-1].min())


def coverage_report(hc: int, wc: int, kind: str = "jego", radius: int = 1) -> CoverageReport:
    """Exhaustive per-position coverage fractions for a layout family."""
    if hc == 0 or wc == 0:
        return CoverageReport(hc, wc, kind, np.zeros((2, hc, wc)))
    if kind == "jego":
        layout = build_layout(hc, wc)
    elif kind == "evmamba":
        layout = build_layout_evmamba(hc, wc)
    else:
        raise ValueError(f"unknown layout kind {kind!r}")
    total = layout.total_tokens
    cov = np.zeros((2, hc, wc))
    for img in range(2):
        for r in range(hc):
            for c in range(wc):
                cov[img, r, c] = aggregated_receptive(layout, (img, r, c), radius).sum() / total
    return CoverageReport(hc, wc, kind, cov)


def write_coverage_csv(report: CoverageReport, path) -> None:
    with open(path, "w") as f:
        f.write("image,row,col,coverage\n")
        for img in range(2):
            for r in range(report.hc):
                for c in range(report.wc):
                    f.write(f"{img},{r},{c},{report.coverage[img, r, c]:.6f}\n")
        f.write(f"# min,{report.min_coverage:.6f}\n")
        f.write(f"# mean,{report.mean_coverage:.6f}\n")


def write_coverage_pgm(report: CoverageReport, path) -> None:
    """Heatmap with the two images side by side, 255 = full-grid coverage."""
    side = np.concatenate([report.coverage[0], report.coverage[1]], axis=1)
    write_pgm(path, side * 255.0)
