"""Synthetic-warp ground truth, the three losses, and the training loop.

Pairs are generated from single base images by plane-induced homographies:
a random relative pose (R, t) and plane (n, d) under fixed intrinsics give
H = K (R + t n^T / d) K^-1 and the essential matrix E = [t]_x R, so the
same sample supervises coarse/fine cell matching (reprojection through H)
and sub-pixel refinement (symmetric epipolar distance under E).

Training minimizes L_c + L_f + L_s with momentum gradient descent under a
cosine-decayed learning rate with one epoch of linear warm-up.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .matcher import (COARSE_STRIDE, FINE_STRIDE, MatcherConfig, MatcherWeights,
                      init_weights, match_pair, run_pipeline, save_weights)
from .pgm import read_pgm
from .tensor import Tensor

__all__ = [
    "PairSample",
    "TrainConfig",
    "TrainingDiverged",
    "essential_matrix",
    "plane_homography",
    "warp_points",
    "synth_pair",
    "random_texture",
    "gt_from_warp",
    "fine_gt",
    "focal_loss",
    "coarse_loss",
    "fine_loss",
    "epipolar_loss",
    "normalized_points",
    "learning_rate",
    "coarse_precision",
    "train",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborts with the offending step in the message."""


@dataclass
class PairSample:
    img_a: np.ndarray
    img_b: np.ndarray
    h_mat: np.ndarray      # 3x3 homography, A pixel coords -> B pixel coords
    r_mat: np.ndarray
    t_vec: np.ndarray      # unit norm
    k_mat: np.ndarray
    e_mat: np.ndarray      # [t]_x R


def cross_matrix(t: np.ndarray) -> np.ndarray:
    tx, ty, tz = t
    return np.array([[0.0, -tz, ty], [tz, 0.0, -tx], [-ty, tx, 0.0]])


def essential_matrix(r_mat: np.ndarray, t_vec: np.ndarray) -> np.ndarray:
    """E = [t]_x R for a unit-normalized translation; zero t is degenerate."""
    norm = np.linalg.norm(t_vec)
    if norm < 1e-8:
        raise ValueError("degenerate pose: zero translation leaves E undefined")
    return cross_matrix(np.asarray(t_vec, dtype=np.float64) / norm) @ r_mat


def plane_homography(k_mat, r_mat, t_vec, normal, depth) -> np.ndarray:
    """Pixel-space homography induced by the plane n.X = depth in camera A."""
    h = k_mat @ (r_mat + np.outer(t_vec, normal) / depth) @ np.linalg.inv(k_mat)
    return h / h[2, 2]


def warp_points(h_mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a homography to (N, 2) pixel points."""
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h_mat.T
    return hom[:, :2] / hom[:, 2:3]


def _rotation(rx, ry, rz) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _bilinear_warp(image: np.ndarray, h_mat: np.ndarray) -> np.ndarray:
    """Inverse-map: out(q) = image(H^-1 q), zeros outside."""
    h, w = image.shape
    inv = np.linalg.inv(h_mat)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = warp_points(inv, pts)
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros(h * w)
    img = image.astype(np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            out[inside] += weight[inside] * img[yi[inside], xi[inside]]
    return np.clip(np.round(out.reshape(h, w)), 0, 255).astype(np.uint8)


def synth_pair(base: np.ndarray, rng: np.random.Generator,
               max_rotation: float = 0.2, max_scale: float = 1.3) -> PairSample:
    """Warp one base image into a pose-consistent pair (resampling degenerates).

    Accepted warps keep the second frame covered up to a thin border (its
    inverse-mapped corners stay within a small margin of the base image), so
    nearly every second-image cell has a genuine counterpart instead of an
    undefined dead zone.
    """
    base = np.asarray(base)
    h, w = base.shape
    if h < 96 or w < 96:
        raise ValueError(f"base image must be at least 96x96, got {base.shape}")
    f = float(min(h, w))
    k_mat = np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    corners = np.array([[0, 0], [w - 1.0, 0], [0, h - 1.0], [w - 1.0, h - 1.0]])
    for _ in range(200):
        r_mat = _rotation(rng.uniform(-max_rotation / 3, max_rotation / 3),
                          rng.uniform(-max_rotation / 3, max_rotation / 3),
                          rng.uniform(-max_rotation, max_rotation))
        t_vec = rng.standard_normal(3)
        if np.linalg.norm(t_vec) < 1e-8:
            continue  # degenerate: pure-identity pose, E undefined
        t_vec = t_vec / np.linalg.norm(t_vec)
        normal = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), 1.0])
        normal /= np.linalg.norm(normal)
        depth = rng.uniform(5.0, 9.0)
        h_mat = plane_homography(k_mat, r_mat, t_vec, normal, depth)
        if abs(np.linalg.det(h_mat)) < 1e-6:
            continue
        warped = warp_points(h_mat, corners)
        spread = np.linalg.norm(warped - corners, axis=1).max()
        if spread > (max_scale - 1.0) * max(h, w):
            continue  # warp too violent for this desk scale
        source = warp_points(np.linalg.inv(h_mat), corners)
        margin = 10.0  # tolerate a thin undefined border, nothing more
        if (source[:, 0].min() < -margin or source[:, 0].max() > w - 1 + margin
                or source[:, 1].min() < -margin or source[:, 1].max() > h - 1 + margin):
            continue  # would leave large undefined regions in the warped frame
        img_b = _bilinear_warp(base, h_mat)
        return PairSample(base.copy(), img_b, h_mat, r_mat, t_vec, k_mat,
                          essential_matrix(r_mat, t_vec))
    raise RuntimeError("could not sample a non-degenerate pose in 200 tries")


def random_texture(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """Matchable synthetic texture: Gaussian blobs for coarse structure plus
    band-limited noise so fine-scale windows stay distinguishable."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.2 * (xs * rng.uniform(-1, 1) + ys * rng.uniform(-1, 1)) / size
    for _ in range(60):
        cx, cy = rng.uniform(0, size, 2)
        sigma = rng.uniform(2.5, size / 6)
        amp = rng.uniform(-1.0, 1.0)
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma * sigma))
    img /= max(np.abs(img).max(), 1e-9)
    detail = gaussian_filter(rng.standard_normal((size, size)), 0.7)
    img += 0.8 * detail / max(np.abs(detail).max(), 1e-9)
    img -= img.min()
    img /= max(img.max(), 1e-9)
    return np.round(img * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# ground truth from the warp


def _coarse_centers(hc: int, wc: int) -> np.ndarray:
    rr, cc = np.mgrid[0:hc, 0:wc]
    half = COARSE_STRIDE / 2 - 0.5
    return np.stack([cc.ravel() * COARSE_STRIDE + half,
                     rr.ravel() * COARSE_STRIDE + half], axis=1)


def gt_from_warp(h_mat: np.ndarray, grid: tuple[int, int],
                 image_shape: tuple[int, int]) -> np.ndarray:
    """Binary coarse matching matrix: cell centers of A projected through H.

    A cell pairs with the nearest B cell iff the projection lands inside the
    image and within half a coarse cell of that center.
    """
    hc, wc = grid
    h_img, w_img = image_shape
    centers = _coarse_centers(hc, wc)
    warped = warp_points(h_mat, centers)
    half = COARSE_STRIDE / 2 - 0.5
    cb = np.round((warped[:, 0] - half) / COARSE_STRIDE).astype(int)
    rb = np.round((warped[:, 1] - half) / COARSE_STRIDE).astype(int)
    target_centers = np.stack([cb * COARSE_STRIDE + half, rb * COARSE_STRIDE + half], axis=1)
    dist = np.linalg.norm(warped - target_centers, axis=1)
    inside_img = ((warped[:, 0] >= 0) & (warped[:, 0] <= w_img - 1)
                  & (warped[:, 1] >= 0) & (warped[:, 1] <= h_img - 1))
    valid = (inside_img & (rb >= 0) & (rb < hc) & (cb >= 0) & (cb < wc)
             & (dist < COARSE_STRIDE / 2))
    p_gt = np.zeros((hc * wc, hc * wc), dtype=np.float32)
    src = np.flatnonzero(valid)
    p_gt[src, rb[src] * wc + cb[src]] = 1.0
    return p_gt


def fine_gt(h_mat: np.ndarray, book_a: np.ndarray, book_b: np.ndarray
            ) -> tuple[np.ndarray, np.ndarray]:
    """Per coarse match: one positive at the window cell pair with minimal
    reprojection error, if that error is under one fine cell.

    A lattice-aligned warp leaves a whole diagonal of zero-error pairs; the
    tie is broken toward the pair nearest the window centers, anchoring the
    positive at the coarse match.
    """
    m, w2, _ = book_a.shape
    window = int(round(w2 ** 0.5))
    center = (window - 1) / 2
    offs = np.stack(np.divmod(np.arange(w2), window), axis=1) - center
    center_bias = np.linalg.norm(offs, axis=1)
    bias = 1e-4 * (center_bias[:, None] + center_bias[None, :])
    labels = np.zeros((m, w2, w2), dtype=np.float32)
    valid = np.zeros(m, dtype=bool)
    half = FINE_STRIDE / 2 - 0.5
    for i in range(m):
        pa = np.stack([book_a[i, :, 1] * FINE_STRIDE + half,
                       book_a[i, :, 0] * FINE_STRIDE + half], axis=1)
        pb = np.stack([book_b[i, :, 1] * FINE_STRIDE + half,
                       book_b[i, :, 0] * FINE_STRIDE + half], axis=1)
        warped = warp_points(h_mat, pa)
        dist = np.linalg.norm(warped[:, None, :] - pb[None, :, :], axis=2)
        a_best, b_best = np.unravel_index((dist + bias).argmin(), dist.shape)
        if dist[a_best, b_best] < FINE_STRIDE:
            labels[i, a_best, b_best] = 1.0
            valid[i] = True
    return labels, valid


# ---------------------------------------------------------------------------
# losses


def focal_loss(p: Tensor, positives: np.ndarray, alpha: float = 0.25,
               gamma: int = 2) -> Tensor:
    """-(1/|pos|) sum over positives of alpha (1-P)^gamma log P, clamped at 1e-8."""
    if positives.shape != p.shape:
        raise ValueError(f"ground truth shape {positives.shape} != {p.shape}")
    n_pos = float(positives.sum())
    if n_pos == 0:
        return Tensor(np.zeros(()), dtype=p.data.dtype)
    mask = Tensor(positives.astype(p.data.dtype), dtype=p.data.dtype)
    one_minus = T.add_const(T.scale(p, -1.0), 1.0)
    focal = one_minus
    for _ in range(int(gamma) - 1):
        focal = T.mul(focal, one_minus)
    nll = T.scale(T.log(T.clamp_min(p, 1e-8)), -1.0)
    terms = T.mul(mask, T.mul(focal, nll))
    return T.scale(T.tsum(terms), alpha / n_pos)


def coarse_loss(p_ab: Tensor, p_ba: Tensor, p_gt: np.ndarray) -> Tensor:
    """Focal loss of the ground truth against both directional probabilities."""
    return T.add(focal_loss(p_ab, p_gt), focal_loss(p_ba, p_gt))


def fine_loss(p_f: Tensor, labels: np.ndarray, valid: np.ndarray) -> Tensor:
    """Focal loss over the valid windows' positives."""
    masked = labels * valid[:, None, None]
    return focal_loss(p_f, masked)


def normalized_points(coords: Tensor, k_mat: np.ndarray) -> tuple[Tensor, Tensor]:
    """Pixel (M, 4) [x_A y_A x_B y_B] -> normalized homogeneous (x_B, y_A).

    Returned in the epipolar-loss argument order: second-image points first,
    since true correspondences satisfy x_B^T E y_A = 0.
    """
    m = coords.shape[0]
    fx, fy = k_mat[0, 0], k_mat[1, 1]
    cx, cy = k_mat[0, 2], k_mat[1, 2]
    ones = Tensor(np.ones((m, 1), dtype=np.float32), dtype=coords.data.dtype)

    def hom(xcol, ycol):
        x = T.scale(T.add_const(T.narrow(coords, 1, xcol, 1), -cx), 1.0 / fx)
        y = T.scale(T.add_const(T.narrow(coords, 1, ycol, 1), -cy), 1.0 / fy)
        return T.concat([x, y, ones], axis=1)

    return hom(2, 3), hom(0, 1)


def epipolar_loss(x_b: Tensor, y_a: Tensor, e_mat: np.ndarray,
                  guard: float = 1e-9) -> Tensor:
    """Mean symmetric epipolar distance: ||x^T E y||^2 (1/||E^T x||^2_{0:2} +
    1/||E y||^2_{0:2}) over matches in normalized homogeneous coordinates.

    ``x_b`` are second-image points, ``y_a`` first-image points, so true
    correspondences satisfy x^T E y = 0. An empty match set scores zero.
    """
    m = x_b.shape[0]
    if m == 0:
        return Tensor(np.zeros(()), dtype=np.float32)
    e = np.asarray(e_mat, dtype=np.float64 if x_b.data.dtype == np.float64 else np.float32)
    ey = T.linear(y_a, Tensor(e.T, dtype=x_b.data.dtype))      # (M, 3) rows E y
    etx = T.linear(x_b, Tensor(e, dtype=x_b.data.dtype))       # (M, 3) rows E^T x
    residual = T.tsum(T.mul(x_b, ey), axis=1)                  # x^T E y
    sq = T.mul(residual, residual)
    ey2 = T.tsum(T.mul(T.narrow(ey, 1, 0, 2), T.narrow(ey, 1, 0, 2)), axis=1)
    etx2 = T.tsum(T.mul(T.narrow(etx, 1, 0, 2), T.narrow(etx, 1, 0, 2)), axis=1)
    ones = Tensor(np.ones(m), dtype=x_b.data.dtype)
    weights = T.add(T.div(ones, T.add_const(etx2, guard)),
                    T.div(ones, T.add_const(ey2, guard)))
    return T.tmean(T.mul(sq, weights))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.08
    momentum: float = 0.9
    grad_clip: float = 1.0
    batch: int = 2
    pairs: int = 16
    val_pairs: int = 4
    image_size: int = 96
    seed: int = 0
    warmup_epochs: float = 1.0
    max_rotation: float = 0.2
    max_scale: float = 1.3
    matcher: MatcherConfig = field(default_factory=MatcherConfig)


def learning_rate(step: int, total_steps: int, base: float, warmup_steps: int) -> float:
    """Linear warm-up from zero, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def _load_corpus(corpus_dir: str, size: int) -> list[np.ndarray]:
    names = sorted(n for n in os.listdir(corpus_dir) if n.endswith(".pgm"))
    images = []
    for name in names:
        img = read_pgm(os.path.join(corpus_dir, name))
        if img.shape[0] < size or img.shape[1] < size:
            raise ValueError(f"{name}: corpus images must be at least {size}x{size}")
        top = (img.shape[0] - size) // 2
        left = (img.shape[1] - size) // 2
        images.append(img[top:top + size, left:left + size])
    if len(images) < 8:
        raise ValueError(f"need at least 8 base images, found {len(images)} in {corpus_dir}")
    return images


def coarse_precision(matches, h_mat: np.ndarray) -> tuple[int, int]:
    """(correct, predicted): a coarse match is correct when the warped A cell
    center lands within one coarse cell of the matched B cell center."""
    if len(matches) == 0:
        return 0, 0
    cells_a, cells_b = matches.coarse_cells()
    half = COARSE_STRIDE / 2 - 0.5
    pa = np.stack([cells_a[:, 1] * COARSE_STRIDE + half,
                   cells_a[:, 0] * COARSE_STRIDE + half], axis=1)
    pb = np.stack([cells_b[:, 1] * COARSE_STRIDE + half,
                   cells_b[:, 0] * COARSE_STRIDE + half], axis=1)
    err = np.linalg.norm(warp_points(h_mat, pa) - pb, axis=1)
    return int((err < COARSE_STRIDE).sum()), len(matches)


def _pair_losses(pair: PairSample, weights: MatcherWeights, p_gt: np.ndarray):
    result = run_pipeline(pair.img_a, pair.img_b, weights)
    l_c = coarse_loss(result.p_ab, result.p_ba, p_gt)
    if result.fine is None:
        return l_c, None, None
    labels, valid = fine_gt(pair.h_mat, result.book_a, result.book_b)
    l_f = fine_loss(result.fine.p_f, labels, valid)
    x_b, y_a = normalized_points(result.coords, pair.k_mat)
    l_s = epipolar_loss(x_b, y_a, pair.e_mat)
    return l_c, l_f, l_s


def train(config: TrainConfig, corpus_dir: str, out_dir: str
          ) -> tuple[MatcherWeights, list[dict]]:
    """Optimize the matcher on synthetic pairs; write checkpoint/ and metrics.csv.

    Deterministic for a fixed (corpus, config): one seeded generator drives
    pose sampling, a fixed-order parameter list drives the updates.
    """
    os.makedirs(out_dir, exist_ok=True)
    images = _load_corpus(corpus_dir, config.image_size)
    rng = np.random.default_rng(config.seed)
    pairs = [synth_pair(images[i % len(images)], rng, config.max_rotation, config.max_scale)
             for i in range(config.pairs)]
    val_rng = np.random.default_rng(config.seed + 1)
    val_pairs = [synth_pair(images[(i + 3) % len(images)], val_rng,
                            config.max_rotation, config.max_scale)
                 for i in range(config.val_pairs)]

    weights = init_weights(config.matcher, seed=config.seed)
    params = weights.parameters()
    velocity = [np.zeros_like(p.data) for p in params]

    hc = pairs[0].img_a.shape[0] // COARSE_STRIDE
    wc = pairs[0].img_a.shape[1] // COARSE_STRIDE
    gts = [gt_from_warp(p.h_mat, (hc, wc), p.img_a.shape) for p in pairs]
    metrics: list[dict] = []
    epoch_acc = {"loss_c": [], "loss_f": [], "loss_s": []}
    batch = max(1, config.batch)
    steps_per_epoch = max(1, len(pairs) // batch)
    warmup = int(round(steps_per_epoch * config.warmup_epochs))

    for step in range(config.steps):
        acc: dict | None = None
        step_losses = {"loss_c": 0.0, "loss_f": 0.0, "loss_s": 0.0}
        try:
            for k in range(batch):
                idx = (step * batch + k) % len(pairs)
                l_c, l_f, l_s = _pair_losses(pairs[idx], weights, gts[idx])
                total = l_c
                if l_f is not None:
                    total = T.add(total, l_f)
                if l_s is not None:
                    total = T.add(total, l_s)
                grads = T.backward(total, params)
                if acc is None:
                    acc = grads
                else:
                    for p in params:
                        acc[p] = acc[p] + grads[p]
                step_losses["loss_c"] += l_c.item() / batch
                step_losses["loss_f"] += (l_f.item() if l_f is not None else 0.0) / batch
                step_losses["loss_s"] += (l_s.item() if l_s is not None else 0.0) / batch
        except T.NonFiniteError as err:
            raise TrainingDiverged(f"non-finite loss at step {step}: {err}") from err
        for p in params:
            acc[p] = acc[p] / batch

        lr = learning_rate(step, config.steps, config.lr, warmup)
        if config.grad_clip > 0:
            # zero-variance layer-norm zones (dead warp regions) spike the
            # gradient by orders of magnitude; a norm clip keeps steps sane
            norm = math.sqrt(sum(float((acc[p] ** 2).sum()) for p in params))
            if norm > config.grad_clip:
                scale_g = config.grad_clip / norm
                for p in params:
                    acc[p] = acc[p] * scale_g
        for i, p in enumerate(params):
            velocity[i] = config.momentum * velocity[i] - lr * acc[p]
            p.data += velocity[i].astype(p.data.dtype)

        for key, value in step_losses.items():
            epoch_acc[key].append(value)
        end_of_epoch = (step + 1) % steps_per_epoch == 0 or step + 1 == config.steps
        if end_of_epoch:
            correct = predicted = 0
            for vp in val_pairs:
                c, n = coarse_precision(match_pair(vp.img_a, vp.img_b, weights), vp.h_mat)
                correct += c
                predicted += n
            metrics.append({
                "epoch": len(metrics),
                "loss_c": float(np.mean(epoch_acc["loss_c"])),
                "loss_f": float(np.mean(epoch_acc["loss_f"])),
                "loss_s": float(np.mean(epoch_acc["loss_s"])),
                "precision": correct / predicted if predicted else 0.0,
            })
            epoch_acc = {"loss_c": [], "loss_f": [], "loss_s": []}

    save_weights(os.path.join(out_dir, "checkpoint"), weights)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write("epoch,loss_c,loss_f,loss_s,precision\n")
        for row in metrics:
            f.write(f"{row['epoch']},{row['loss_c']:.6f},{row['loss_f']:.6f},"
                    f"{row['loss_s']:.6f},{row['precision']:.6f}\n")
    return weights, metrics
