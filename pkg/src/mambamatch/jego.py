"""Joint four-directional skip scan over an image pair, inverse merge, aggregator.

The coarse maps of two images are concatenated horizontally (side by side)
and vertically (stacked). Each of four directions slices its joint grid at
stride ``p`` from a distinct (row, col) offset and traverses it in raster
(horizontal grid) or column-major (vertical grid) order; two directions are
flipped, yielding right/left/up/down scans. The four slices partition the
2*Hc*Wc joint positions, so total sequence length stays at N = 2*Hc*Wc and
merge is an exact inverse of scan.

Because consecutive raster steps inside the horizontally concatenated grid
alternate between the two images at least once per scanned row, cross-view
interaction happens inside the recurrence itself rather than in a separate
cross-attention stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import SsmBlockParams, mamba_block
from .tensor import Tensor

__all__ = [
    "Direction",
    "ScanLayout",
    "AggregatorParams",
    "start_offset",
    "build_layout",
    "swap_images",
    "joint_concat",
    "jego_scan",
    "jego_merge",
    "aggregate",
    "joint_mamba_layer",
    "init_aggregator",
    "dump_layout",
]

DIRECTION_NAMES = ("right", "left", "up", "down")


@dataclass(frozen=True)
class Direction:
    """One directional sequence: its joint grid, slice offset and traversal."""

    index: int                # 1-based, matching the offset rule
    name: str
    grid: str                 # 'h' (Hc x 2Wc) or 'v' (2Hc x Wc)
    offset: tuple[int, int]   # (m, n) slice start
    flip: bool
    flat: np.ndarray          # traversal in raw slice order, flat grid indices
    joint: np.ndarray         # (L, 3) canonical (image, row, col), traversal order


@dataclass(frozen=True)
class ScanLayout:
    """Precomputed index permutations for one (Hc, Wc, p) configuration."""

    hc: int
    wc: int
    step: int
    directions: tuple[Direction, ...]
    dir_of: np.ndarray    # canonical joint id -> direction slot (0..3)
    seq_pos: np.ndarray   # canonical joint id -> traversal position in its sequence

    @property
    def total_tokens(self) -> int:
        return 2 * self.hc * self.wc

    @property
    def sequence_length(self) -> int:
        return self.total_tokens // (self.step * self.step)

    def grid_shape(self, grid: str) -> tuple[int, int]:
        return (self.hc, 2 * self.wc) if grid == "h" else (2 * self.hc, self.wc)


def start_offset(i: int) -> tuple[int, int]:
    """Slice start (m, n) for direction i in 1..4: floor((i-1)/2), (i-1) mod 2."""
    return ((i - 1) // 2, (i - 1) % 2)


def _canonical(grid: str, hc: int, wc: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if grid == "h":
        img = cols // wc
        r, c = rows, cols % wc
    else:
        img = rows // hc
        r, c = rows % hc, cols
    return np.stack([img, r, c], axis=1)


def build_layout(hc: int, wc: int, step: int = 2) -> ScanLayout:
    """Construct the four directional traversals for an even (Hc, Wc) grid.

    Directions 1/2 slice the horizontal joint grid (right, then left via a
    flip); directions 3/4 slice the vertical joint grid column-major (up via
    a flip, then down). The flip assignment keeps the stated direction
    semantics; the partition and round-trip properties hold either way.
    """
    if hc <= 0 or wc <= 0:
        raise ValueError("grid dims must be positive")
    if hc % step or wc % step:
        raise ValueError(f"step {step} must divide grid dims ({hc}, {wc}); pad first")

    specs = [
        (1, "right", "h", False),
        (2, "left", "h", True),
        (3, "up", "v", True),
        (4, "down", "v", False),
    ]
    directions = []
    for i, name, grid, flipped in specs:
        m, n = start_offset(i)
        gh, gw = (hc, 2 * wc) if grid == "h" else (2 * hc, wc)
        rr = np.arange(m, gh, step)
        cc = np.arange(n, gw, step)
        if grid == "h":  # raster: rows outer, columns inner
            rows = np.repeat(rr, len(cc))
            cols = np.tile(cc, len(rr))
        else:  # column-major: columns outer, rows inner
            rows = np.tile(rr, len(cc))
            cols = np.repeat(cc, len(rr))
        flat = rows * gw + cols
        joint = _canonical(grid, hc, wc, rows, cols)
        if flipped:
            joint = joint[::-1].copy()
        directions.append(Direction(i, name, grid, (m, n), flipped, flat, joint))

    n_joint = 2 * hc * wc
    dir_of = np.full(n_joint, -1, dtype=np.intp)
    seq_pos = np.full(n_joint, -1, dtype=np.intp)
    for slot, d in enumerate(directions):
        ids = d.joint[:, 0] * hc * wc + d.joint[:, 1] * wc + d.joint[:, 2]
        if (dir_of[ids] != -1).any():
            raise AssertionError("directional slices overlap; partition violated")
        dir_of[ids] = slot
        seq_pos[ids] = np.arange(len(ids))
    if (dir_of == -1).any():
        raise AssertionError("directional slices miss joint positions; partition violated")

    return ScanLayout(hc, wc, step, tuple(directions), dir_of, seq_pos)


def swap_images(layout: ScanLayout) -> ScanLayout:
    """Relabel the layout as if the two images swapped halves of the joint grids.

    The traversals visit the same offset classes in the same order, but every
    coordinate moves to the other image's half. Slice sets are preserved
    (offsets are parity classes and Wc, Hc are even), only orders change.
    """
    hc, wc = layout.hc, layout.wc
    directions = []
    for d in layout.directions:
        gh, gw = layout.grid_shape(d.grid)
        rows, cols = d.flat // gw, d.flat % gw
        if d.grid == "h":
            cols = (cols + wc) % gw
        else:
            rows = (rows + hc) % gh
        flat = rows * gw + cols
        joint = d.joint.copy()
        joint[:, 0] = 1 - joint[:, 0]
        directions.append(Direction(d.index, d.name, d.grid, d.offset, d.flip, flat, joint))
    dir_of = layout.dir_of.reshape(2, -1)[::-1].reshape(-1).copy()
    seq_pos = layout.seq_pos.reshape(2, -1)[::-1].reshape(-1).copy()
    return ScanLayout(hc, wc, layout.step, tuple(directions), dir_of, seq_pos)


def joint_concat(f_a: Tensor, f_b: Tensor) -> tuple[Tensor, Tensor]:
    """Horizontal [A | B] and vertical [A ; B] joint feature maps."""
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature maps differ: {f_a.shape} vs {f_b.shape}")
    return T.concat([f_a, f_b], axis=1), T.concat([f_a, f_b], axis=0)


def jego_scan(x_h: Tensor, x_v: Tensor, layout: ScanLayout) -> list[Tensor]:
    """Gather the four directional sequences, applying flips."""
    if x_h.shape[:2] != layout.grid_shape("h") or x_v.shape[:2] != layout.grid_shape("v"):
        raise ValueError("joint grids do not match layout")
    c1 = x_h.shape[2]
    flat_h = T.reshape(x_h, (x_h.shape[0] * x_h.shape[1], c1))
    flat_v = T.reshape(x_v, (x_v.shape[0] * x_v.shape[1], c1))
    seqs = []
    for d in layout.directions:
        seq = T.gather_rows(flat_h if d.grid == "h" else flat_v, d.flat)
        if d.flip:
            seq = T.flip(seq, axis=0)
        seqs.append(seq)
    return seqs


def jego_merge(seqs: list[Tensor], layout: ScanLayout) -> tuple[Tensor, Tensor]:
    """Scatter sequences back to their scanned positions and fuse the two grids.

    The horizontal grid fills only the rows the horizontal slices cover and
    the vertical grid fills the complementary positions, so the sum assigns
    every output cell exactly one scanned value (exact inverse of the scan).
    """
    if len(seqs) != 4:
        raise ValueError("expected four directional sequences")
    length = layout.sequence_length
    for d, s in zip(layout.directions, seqs):
        if s.shape[0] != length:
            raise ValueError(f"direction {d.index}: length {s.shape[0]} != {length}")
    c1 = seqs[0].shape[1]
    acc = {"h": None, "v": None}
    for d, seq in zip(layout.directions, seqs):
        if d.flip:
            seq = T.flip(seq, axis=0)
        gh, gw = layout.grid_shape(d.grid)
        placed = T.scatter_rows(seq, d.flat, gh * gw)
        acc[d.grid] = placed if acc[d.grid] is None else T.add(acc[d.grid], placed)
    y_h = T.reshape(acc["h"], (layout.hc, 2 * layout.wc, c1))
    y_v = T.reshape(acc["v"], (2 * layout.hc, layout.wc, c1))
    f_a = T.add(T.narrow(y_h, 1, 0, layout.wc), T.narrow(y_v, 0, 0, layout.hc))
    f_b = T.add(T.narrow(y_h, 1, layout.wc, layout.wc), T.narrow(y_v, 0, layout.hc, layout.hc))
    return f_a, f_b


@dataclass
class AggregatorParams:
    """Gated 3x3 convolution unit: out = conv(gelu(conv(x)) * conv(x))."""

    gate_k: Tensor
    gate_b: Tensor
    value_k: Tensor
    value_b: Tensor
    out_k: Tensor
    out_b: Tensor

    def named(self, prefix: str):
        return [(f"{prefix}.{name}", getattr(self, name))
                for name in ("gate_k", "gate_b", "value_k", "value_b", "out_k", "out_b")]


def init_aggregator(channels: int, rng: np.random.Generator, dtype=np.float32) -> AggregatorParams:
    fan_in = 9 * channels

    def k():
        return Tensor(T.uniform_init(rng, (3, 3, channels, channels), fan_in, dtype=dtype),
                      dtype=dtype, requires_grad=True)

    def b():
        return Tensor(np.zeros(channels, dtype), dtype=dtype, requires_grad=True)

    return AggregatorParams(k(), b(), k(), b(), k(), b())


def aggregate(fmap: Tensor, params: AggregatorParams) -> Tensor:
    """Consolidate neighboring directional receptive fields toward each cell."""
    gate = T.gelu(T.conv2d(fmap, params.gate_k, params.gate_b))
    value = T.conv2d(fmap, params.value_k, params.value_b)
    return T.conv2d(T.mul(gate, value), params.out_k, params.out_b)


def joint_mamba_layer(f_a: Tensor, f_b: Tensor, blocks: list[SsmBlockParams],
                      agg: AggregatorParams, layout: ScanLayout | None = None,
                      step: int = 2) -> tuple[Tensor, Tensor]:
    """Full coarse-interaction layer: scan -> four Mamba blocks -> merge -> aggregate.

    Odd grid sizes are zero-padded to the next multiple of the skip step and
    cropped back after the merge.
    """
    if f_a.shape != f_b.shape:
        raise ValueError("feature maps must share a shape")
    if len(blocks) != 4:
        raise ValueError("one Mamba block per direction is required")
    hc, wc, _ = f_a.shape
    ph = (-hc) % step
    pw = (-wc) % step
    if ph or pw:
        pads = [(0, ph), (0, pw), (0, 0)]
        f_a = T.pad(f_a, pads)
        f_b = T.pad(f_b, pads)
    if layout is None:
        layout = build_layout(hc + ph, wc + pw, step)
    x_h, x_v = joint_concat(f_a, f_b)
    seqs = jego_scan(x_h, x_v, layout)
    refined = [mamba_block(seq, blk) for seq, blk in zip(seqs, blocks)]
    m_a, m_b = jego_merge(refined, layout)
    if ph or pw:
        m_a = T.narrow(T.narrow(m_a, 0, 0, hc), 1, 0, wc)
        m_b = T.narrow(T.narrow(m_b, 0, 0, hc), 1, 0, wc)
    return aggregate(m_a, agg), aggregate(m_b, agg)


def dump_layout(layout: ScanLayout) -> str:
    """Debug text: one line per direction, 'dir i: (m,n) flip len [coords...]'."""
    lines = []
    for d in layout.directions:
        coords = " ".join(f"({img},{r},{c})" for img, r, c in d.joint)
        lines.append(f"dir {d.index}: ({d.offset[0]},{d.offset[1]}) "
                     f"{int(d.flip)} {len(d.flat)} [{coords}]")
    return "\n".join(lines) + "\n"
