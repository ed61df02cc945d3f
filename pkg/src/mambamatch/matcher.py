"""End-to-end correspondence pipeline.

A small strided convolutional encoder produces fine (1/2) and coarse (1/8)
feature pyramids; joint scan-merge layers let the two coarse maps interact;
bidirectional softmax matching proposes coarse matches; 5x5 windows of fine
features are mixed and dual-softmax + mutual-nearest-neighbor picks one
fine cell pair per coarse match; a tanh regression head adds bounded
sub-pixel offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .jego import AggregatorParams, build_layout, init_aggregator, joint_mamba_layer
from .ssm import SsmBlockParams, SsmDims, init_block
from .tensor import Tensor

__all__ = [
    "MatcherConfig",
    "MatcherWeights",
    "MatchSet",
    "PipelineResult",
    "init_weights",
    "save_weights",
    "load_weights",
    "encode",
    "coarse_similarity",
    "coarse_probabilities",
    "coarse_match",
    "crop_windows",
    "MixerParams",
    "init_mixer",
    "mixer",
    "fine_match",
    "subpixel_refine",
    "run_pipeline",
    "match_pair",
    "write_matches",
    "read_matches",
]

COARSE_STRIDE = 8
FINE_STRIDE = 2
FINE_PER_COARSE = COARSE_STRIDE // FINE_STRIDE


@dataclass(frozen=True)
class MatcherConfig:
    """Desk-scale defaults; the paper-scale widths are 256/512/64."""

    temperature: float = 0.1
    coarse_threshold: float = 0.2
    window: int = 5
    c_coarse: int = 32
    c_fine: int = 16
    c_expand: int = 64
    c_state: int = 8
    conv_window: int = 4
    layers: int = 1
    encoder_stem: int = 8
    encoder_mid: int = 24

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 < self.coarse_threshold < 1.0):
            raise ValueError("coarse threshold must be in (0, 1)")
        if self.window % 2 == 0:
            raise ValueError("fine window must be odd")

    def ssm_dims(self) -> SsmDims:
        return SsmDims(self.c_coarse, self.c_expand, self.c_state, self.conv_window)


@dataclass
class MixerParams:
    """Two residual MLP stages: across tokens, then across channels."""

    w_tok1: Tensor
    b_tok1: Tensor
    w_tok2: Tensor
    b_tok2: Tensor
    w_ch1: Tensor
    b_ch1: Tensor
    w_ch2: Tensor
    b_ch2: Tensor

    def named(self, prefix: str):
        return [(f"{prefix}.{name}", getattr(self, name))
                for name in ("w_tok1", "b_tok1", "w_tok2", "b_tok2",
                             "w_ch1", "b_ch1", "w_ch2", "b_ch2")]


def init_mixer(tokens: int, channels: int, rng: np.random.Generator) -> MixerParams:
    def w(cin, cout):
        return Tensor(T.uniform_init(rng, (cin, cout), cin), requires_grad=True)

    def b(c):
        return Tensor(np.zeros(c, np.float32), requires_grad=True)

    def zero(cin, cout):
        # second linear of each residual branch starts at zero (identity mixer)
        return Tensor(np.zeros((cin, cout), np.float32), requires_grad=True)

    return MixerParams(w(tokens, tokens), b(tokens), zero(tokens, tokens), b(tokens),
                       w(channels, channels), b(channels), zero(channels, channels), b(channels))


def mixer(x: Tensor, params: MixerParams) -> Tensor:
    """(M, T, C) -> (M, T, C): token-mixing MLP then channel-mixing MLP, both residual."""
    if x.shape[1] != params.w_tok1.shape[0]:
        raise ValueError(f"mixer built for T={params.w_tok1.shape[0]}, got {x.shape[1]} tokens")
    t = T.transpose(x, (0, 2, 1))
    t = T.linear(T.gelu(T.linear(t, params.w_tok1, params.b_tok1)), params.w_tok2, params.b_tok2)
    mid = T.add(x, T.transpose(t, (0, 2, 1)))
    c = T.linear(T.gelu(T.linear(mid, params.w_ch1, params.b_ch1)), params.w_ch2, params.b_ch2)
    return T.add(mid, c)


@dataclass
class EncoderParams:
    """Four conv stages, each conv -> channel LayerNorm -> GELU.

    The normalization stands in for the heavily normalized encoder this
    desk-scale stack replaces; without it the bounded-uniform init shrinks
    activations by ~3x per stage and the gated aggregator squares the
    collapse, leaving the coarse softmax exactly uniform.
    """

    kernels: list[Tensor]
    biases: list[Tensor]
    ln_gains: list[Tensor]
    ln_shifts: list[Tensor]

    def named(self, prefix: str):
        out = []
        for i in range(len(self.kernels)):
            out.append((f"{prefix}.k{i}", self.kernels[i]))
            out.append((f"{prefix}.b{i}", self.biases[i]))
            out.append((f"{prefix}.g{i}", self.ln_gains[i]))
            out.append((f"{prefix}.s{i}", self.ln_shifts[i]))
        return out


@dataclass
class LayerParams:
    blocks: list[SsmBlockParams]
    agg: AggregatorParams

    def named(self, prefix: str):
        out = []
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named(f"{prefix}.dir{i}"))
        out.extend(self.agg.named(f"{prefix}.agg"))
        return out


@dataclass
class MatcherWeights:
    config: MatcherConfig
    encoder: EncoderParams
    layers: list[LayerParams]
    fine_mixer: MixerParams
    sub_mixer: MixerParams
    sub_w: Tensor
    sub_b: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.named("enc")
        for i, layer in enumerate(self.layers):
            out.extend(layer.named(f"layer{i}"))
        out.extend(self.fine_mixer.named("fine_mixer"))
        out.extend(self.sub_mixer.named("sub_mixer"))
        out.append(("sub_head.w", self.sub_w))
        out.append(("sub_head.b", self.sub_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_weights(config: MatcherConfig, seed: int = 0) -> MatcherWeights:
    """Deterministic initialization of the full pipeline from one seed."""
    rng = np.random.default_rng(seed)
    widths = [(1, config.encoder_stem), (config.encoder_stem, config.c_fine),
              (config.c_fine, config.encoder_mid), (config.encoder_mid, config.c_coarse)]
    kernels, biases, gains, shifts = [], [], [], []
    for cin, cout in widths:
        kernels.append(Tensor(T.uniform_init(rng, (3, 3, cin, cout), 9 * cin),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(cout, np.float32), requires_grad=True))
        gains.append(Tensor(np.ones(cout, np.float32), requires_grad=True))
        shifts.append(Tensor(np.zeros(cout, np.float32), requires_grad=True))
    layers = [LayerParams([init_block(config.ssm_dims(), rng) for _ in range(4)],
                          init_aggregator(config.c_coarse, rng))
              for _ in range(config.layers)]
    tokens = 2 * config.window * config.window
    return MatcherWeights(
        config=config,
        encoder=EncoderParams(kernels, biases, gains, shifts),
        layers=layers,
        fine_mixer=init_mixer(tokens, config.c_fine, rng),
        sub_mixer=init_mixer(1, 2 * config.c_fine, rng),
        # zero head: offsets start at the fine-cell centers
        sub_w=Tensor(np.zeros((2 * config.c_fine, 4), np.float32), requires_grad=True),
        sub_b=Tensor(np.zeros(4, np.float32), requires_grad=True),
    )


def save_weights(dir_path, weights: MatcherWeights) -> None:
    save_checkpoint(dir_path, dict(weights.named()))


def load_weights(dir_path, config: MatcherConfig) -> MatcherWeights:
    stored = load_checkpoint(dir_path)
    weights = init_weights(config, seed=0)
    for name, tensor in weights.named():
        if name not in stored:
            raise ValueError(f"checkpoint is missing parameter {name}")
        if stored[name].shape != tensor.shape:
            raise ValueError(f"{name}: checkpoint shape {stored[name].shape} != {tensor.shape}"
                             " (config mismatch?)")
        tensor.data[...] = stored[name]
    return weights


# ---------------------------------------------------------------------------
# encoder


def _strided(x: Tensor) -> Tensor:
    return T.strided_slice(x, (0, 0, 0), (2, 2, 1))


def encode(image: np.ndarray, weights: MatcherWeights) -> tuple[Tensor, Tensor, tuple[int, int]]:
    """Image (H, W) in [0, 255] -> coarse (H/8, W/8, C1), fine (H/2, W/2, C2).

    The image is zero-padded up to multiples of 8; the returned original
    (H, W) lets callers clamp coordinates back.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2D grayscale image, got {img.shape}")
    orig = img.shape
    ph = (-img.shape[0]) % COARSE_STRIDE
    pw = (-img.shape[1]) % COARSE_STRIDE
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)))
    x = Tensor(img[:, :, None] / 255.0)
    enc = weights.encoder

    def stage(inp, i, strided):
        out = T.conv2d(inp, enc.kernels[i], enc.biases[i])
        if strided:
            out = _strided(out)
        return T.gelu(T.layer_norm(out, enc.ln_gains[i], enc.ln_shifts[i]))

    h1 = stage(x, 0, True)
    fine = stage(h1, 1, False)
    h3 = stage(fine, 2, True)
    coarse = stage(h3, 3, True)
    return coarse, fine, orig


# ---------------------------------------------------------------------------
# coarse matching


def coarse_similarity(feat_a: Tensor, feat_b: Tensor, temperature: float) -> Tensor:
    """S(i, j) = <a_i, b_j> / tau over flattened coarse grids."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return T.scale(T.linear(feat_a, T.transpose(feat_b, (1, 0))), 1.0 / temperature)


def coarse_probabilities(sim: Tensor) -> tuple[Tensor, Tensor]:
    return T.softmax(sim, axis=1), T.softmax(sim, axis=0)


def coarse_match(p_ab: np.ndarray, p_ba: np.ndarray,
                 threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Union of thresholded row maxima of P_A->B and column maxima of P_B->A.

    Returns (M, 2) index pairs in row-major order and per-pair confidence,
    the larger of the two qualifying probabilities.
    """
    row_mask = (p_ab == p_ab.max(axis=1, keepdims=True)) & (p_ab >= threshold)
    col_mask = (p_ba == p_ba.max(axis=0, keepdims=True)) & (p_ba >= threshold)
    union = row_mask | col_mask
    ij = np.argwhere(union)
    conf_grid = np.where(row_mask & col_mask, np.maximum(p_ab, p_ba),
                         np.where(row_mask, p_ab, p_ba))
    conf = conf_grid[tuple(ij.T)]
    return ij.astype(np.intp), conf.astype(np.float32)


# ---------------------------------------------------------------------------
# fine matching


def crop_windows(fine: Tensor, centers: np.ndarray,
                 window: int = 5) -> tuple[Tensor, np.ndarray]:
    """Crop (M, w*w, C) windows around fine-grid centers (zero-padded borders).

    Also returns the (M, w*w, 2) book of absolute fine (row, col) coordinates
    per window cell; window index w*w//2 is the center itself.
    """
    half = window // 2
    hf, wf, c = fine.shape
    padded = T.pad(fine, [(half, half), (half, half), (0, 0)])
    wpad = wf + 2 * half
    flat = T.reshape(padded, ((hf + 2 * half) * wpad, c))
    centers = np.asarray(centers, dtype=np.intp)
    m = centers.shape[0]
    offs = np.arange(window) - half
    drr, dcc = np.meshgrid(offs, offs, indexing="ij")
    cell_r = centers[:, 0, None] + drr.ravel()[None, :]  # absolute fine rows
    cell_c = centers[:, 1, None] + dcc.ravel()[None, :]
    idx = ((cell_r + half) * wpad + (cell_c + half)).ravel()
    gathered = T.gather_rows(flat, idx)
    windows = T.reshape(gathered, (m, window * window, c))
    book = np.stack([cell_r, cell_c], axis=2)
    return windows, book


@dataclass
class FineResult:
    p_f: Tensor                # (M, w2, w2) dual-softmax probabilities
    pairs: np.ndarray          # (M, 2) window-cell indices (a, b)
    conf: np.ndarray           # (M,)
    mixed_a: Tensor            # (M, w2, C) post-mixer windows
    mixed_b: Tensor


def fine_match(windows_a: Tensor, windows_b: Tensor, params: MixerParams) -> FineResult:
    """Mix the concatenated windows, dual-softmax the inner products, pick the
    mutual-nearest-neighbor cell pair with maximal probability per match.

    Probability ties (e.g. identical windows) break toward the window
    centers, keeping the selection anchored at the coarse match.
    """
    m, w2, _ = windows_a.shape
    window = int(round(w2 ** 0.5))
    center = (window - 1) / 2
    offs = np.stack(np.divmod(np.arange(w2), window), axis=1) - center
    center_bias = np.linalg.norm(offs, axis=1).astype(np.float32)
    tokens = T.concat([windows_a, windows_b], axis=1)
    mixed = mixer(tokens, params)
    mixed_a = T.narrow(mixed, 1, 0, w2)
    mixed_b = T.narrow(mixed, 1, w2, w2)
    sim = T.pair_inner(mixed_a, mixed_b)
    p_f = T.mul(T.softmax(sim, axis=2), T.softmax(sim, axis=1))
    pd = p_f.data
    tie = 1e-7 * (center_bias[:, None] + center_bias[None, :])
    pairs = np.zeros((m, 2), dtype=np.intp)
    conf = np.zeros(m, dtype=np.float32)
    for i in range(m):
        score = pd[i] - tie
        row_arg = score.argmax(axis=1)
        col_arg = score.argmax(axis=0)
        mutual = np.flatnonzero(col_arg[row_arg[np.arange(w2)]] == np.arange(w2))
        best = mutual[score[mutual, row_arg[mutual]].argmax()]
        pairs[i] = (best, row_arg[best])
        conf[i] = pd[i][best, row_arg[best]]
    return FineResult(p_f, pairs, conf, mixed_a, mixed_b)


def subpixel_refine(fine_result: FineResult, book_a: np.ndarray, book_b: np.ndarray,
                    weights: MatcherWeights, image_shape: tuple[int, int]
                    ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Regress bounded offsets from the matched cells' features.

    Returns (delta, pixel coordinate tensor, clamped pixel array). Pixel
    coordinates are 2 * fine_cell + 2 * delta per axis, delta in [-1, 1]
    (one fine cell of slack).
    """
    m, w2, c = fine_result.mixed_a.shape
    rows = np.arange(m) * w2
    # the epipolar loss on wrong matches produces huge terms; detaching here
    # confines that gradient to the offset head instead of the whole trunk
    feat_a = T.gather_rows(T.reshape(T.detach(fine_result.mixed_a), (m * w2, c)),
                           rows + fine_result.pairs[:, 0])
    feat_b = T.gather_rows(T.reshape(T.detach(fine_result.mixed_b), (m * w2, c)),
                           rows + fine_result.pairs[:, 1])
    feats = T.reshape(T.concat([feat_a, feat_b], axis=1), (m, 1, 2 * c))
    mixed = T.reshape(mixer(feats, weights.sub_mixer), (m, 2 * c))
    delta = T.tanh(T.linear(mixed, weights.sub_w, weights.sub_b))  # (M, 4) in [-1, 1]

    cell_a = book_a[np.arange(m), fine_result.pairs[:, 0]]  # (M, 2) fine (r, c)
    cell_b = book_b[np.arange(m), fine_result.pairs[:, 1]]
    base = np.stack([cell_a[:, 1], cell_a[:, 0], cell_b[:, 1], cell_b[:, 0]],
                    axis=1).astype(np.float32) * FINE_STRIDE  # (x_A, y_A, x_B, y_B)
    coords = T.add(T.scale(delta, float(FINE_STRIDE)), Tensor(base))
    h, w = image_shape
    clamped = coords.data.copy()
    clamped[:, (0, 2)] = np.clip(clamped[:, (0, 2)], 0.0, w - 1.0)
    clamped[:, (1, 3)] = np.clip(clamped[:, (1, 3)], 0.0, h - 1.0)
    return delta, coords, clamped


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class MatchSet:
    """Correspondences at the three refinement levels."""

    grid: tuple[int, int]                  # coarse grid (Hc, Wc)
    image_shape: tuple[int, int]
    coarse_ij: np.ndarray                  # (M, 2) flat coarse indices (i, j)
    coarse_conf: np.ndarray
    fine_ab: np.ndarray                    # (M, 2) window cells
    fine_conf: np.ndarray
    fine_cells: np.ndarray                 # (M, 4) fine-grid (r_A, c_A, r_B, c_B)
    subpixel: np.ndarray                   # (M, 4) pixel (x_A, y_A, x_B, y_B)

    def __len__(self) -> int:
        return len(self.coarse_ij)

    def coarse_cells(self) -> tuple[np.ndarray, np.ndarray]:
        wc = self.grid[1]
        a = np.stack(np.divmod(self.coarse_ij[:, 0], wc), axis=1)
        b = np.stack(np.divmod(self.coarse_ij[:, 1], wc), axis=1)
        return a, b


@dataclass
class PipelineResult:
    """Everything the losses need, plus the assembled match set."""

    grid: tuple[int, int]
    image_shape: tuple[int, int]
    p_ab: Tensor
    p_ba: Tensor
    coarse_ij: np.ndarray
    coarse_conf: np.ndarray
    fine: FineResult | None
    book_a: np.ndarray | None
    book_b: np.ndarray | None
    delta: Tensor | None
    coords: Tensor | None
    matches: MatchSet | None = None


def run_pipeline(img_a: np.ndarray, img_b: np.ndarray,
                 weights: MatcherWeights) -> PipelineResult:
    """Full forward pass; taped when gradients are enabled."""
    cfg = weights.config
    if np.asarray(img_a).shape != np.asarray(img_b).shape:
        raise ValueError("the joint scan expects images of equal size")
    coarse_a, fine_a, orig = encode(img_a, weights)
    coarse_b, fine_b, _ = encode(img_b, weights)
    hc, wc, c1 = coarse_a.shape
    layout = build_layout(hc, wc) if hc % 2 == 0 and wc % 2 == 0 else None
    for layer in weights.layers:
        coarse_a, coarse_b = joint_mamba_layer(coarse_a, coarse_b, layer.blocks,
                                               layer.agg, layout=layout)
    # 1/sqrt(C) on each side keeps logits O(<a,b>/C / tau); without it the
    # temperature saturates both softmaxes from the first step
    flat_a = T.scale(T.reshape(coarse_a, (hc * wc, c1)), c1 ** -0.5)
    flat_b = T.scale(T.reshape(coarse_b, (hc * wc, c1)), c1 ** -0.5)
    sim = coarse_similarity(flat_a, flat_b, cfg.temperature)
    p_ab, p_ba = coarse_probabilities(sim)
    ij, conf = coarse_match(p_ab.data, p_ba.data, cfg.coarse_threshold)

    result = PipelineResult((hc, wc), orig, p_ab, p_ba, ij, conf,
                            None, None, None, None, None)
    if len(ij) == 0:
        result.matches = MatchSet((hc, wc), orig, ij, conf,
                                  np.zeros((0, 2), np.intp), np.zeros(0, np.float32),
                                  np.zeros((0, 4), np.intp), np.zeros((0, 4), np.float32))
        return result

    cells_a = np.stack(np.divmod(ij[:, 0], wc), axis=1) * FINE_PER_COARSE
    cells_b = np.stack(np.divmod(ij[:, 1], wc), axis=1) * FINE_PER_COARSE
    windows_a, book_a = crop_windows(fine_a, cells_a, cfg.window)
    windows_b, book_b = crop_windows(fine_b, cells_b, cfg.window)
    fine = fine_match(windows_a, windows_b, weights.fine_mixer)
    delta, coords, clamped = subpixel_refine(fine, book_a, book_b, weights, orig)

    m = len(ij)
    fine_cells = np.concatenate([book_a[np.arange(m), fine.pairs[:, 0]],
                                 book_b[np.arange(m), fine.pairs[:, 1]]], axis=1)
    result.fine = fine
    result.book_a, result.book_b = book_a, book_b
    result.delta, result.coords = delta, coords
    result.matches = MatchSet((hc, wc), orig, ij, conf, fine.pairs, fine.conf,
                              fine_cells, clamped)
    return result


def match_pair(img_a: np.ndarray, img_b: np.ndarray, weights: MatcherWeights,
               config: MatcherConfig | None = None) -> MatchSet:
    """Inference entry point; deterministic for fixed weights and inputs."""
    if config is not None and config != weights.config:
        raise ValueError("config does not match the loaded weights")
    with T.no_grad():
        return run_pipeline(img_a, img_b, weights).matches


# ---------------------------------------------------------------------------
# match records


def write_matches(path, matches: MatchSet, level: str = "subpixel") -> int:
    """Write 'x_A y_A x_B y_B conf level' records; returns the record count."""
    if level not in ("coarse", "fine", "subpixel"):
        raise ValueError(f"unknown record level {level!r}")
    lines = []
    if level == "coarse":
        a, b = matches.coarse_cells()
        half = COARSE_STRIDE / 2 - 0.5  # cell center in pixels
        for (ra, ca), (rb, cb), conf in zip(a, b, matches.coarse_conf):
            lines.append(f"{ca * COARSE_STRIDE + half:.4f} {ra * COARSE_STRIDE + half:.4f} "
                         f"{cb * COARSE_STRIDE + half:.4f} {rb * COARSE_STRIDE + half:.4f} "
                         f"{conf:.6f} coarse")
    elif level == "fine":
        for k in range(len(matches)):
            ra, ca, rb, cb = matches.fine_cells[k] * FINE_STRIDE
            lines.append(f"{ca:.4f} {ra:.4f} {cb:.4f} {rb:.4f} "
                         f"{matches.fine_conf[k]:.6f} fine")
    else:
        for k in range(len(matches)):
            x = matches.subpixel[k]
            lines.append(f"{x[0]:.4f} {x[1]:.4f} {x[2]:.4f} {x[3]:.4f} "
                         f"{matches.fine_conf[k]:.6f} subpixel")
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


def read_matches(path) -> list[tuple[float, float, float, float, float, str]]:
    out = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            out.append((*map(float, parts[:5]), parts[5]))
    return out
