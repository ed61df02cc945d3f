"""Warp synthesis, ground-truth construction, the three losses, schedules."""

import numpy as np
import pytest

from mambamatch import tensor as T
from mambamatch.supervision import (coarse_loss, coarse_precision, cross_matrix,
                                    epipolar_loss, essential_matrix, fine_gt, fine_loss,
                                    focal_loss, gt_from_warp, learning_rate, normalized_points,
                                    plane_homography, random_texture, synth_pair, warp_points)
from mambamatch.tensor import Tensor
from conftest import fd_gradcheck


# ---------------------------------------------------------------------------
# pose and warp synthesis


def test_essential_matrix_pure_translation():
    e = essential_matrix(np.eye(3), np.array([1.0, 0.0, 0.0]))
    assert np.array_equal(e, np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], float))


def test_essential_matrix_rejects_zero_translation():
    with pytest.raises(ValueError):
        essential_matrix(np.eye(3), np.zeros(3))


def test_identity_pose_gives_identity_homography():
    k = np.array([[100.0, 0, 48], [0, 100.0, 48], [0, 0, 1]])
    h = plane_homography(k, np.eye(3), np.zeros(3), np.array([0, 0, 1.0]), 5.0)
    assert np.allclose(h, np.eye(3))


def test_warp_points_bit_exact():
    h = np.array([[1.5, 0.0, 3.0], [0.25, 1.0, -2.0], [0.0, 0.001, 1.0]])
    pts = np.array([[0.0, 0.0], [95.0, 0.0], [0.0, 95.0], [95.0, 95.0]])
    expected = np.empty_like(pts)
    for i, (x, y) in enumerate(pts):
        hom = h @ np.array([x, y, 1.0])
        expected[i] = hom[:2] / hom[2]
    assert np.array_equal(warp_points(h, pts), expected)


def test_synth_pair_contracts(rng):
    base = random_texture(rng, 96)
    pair = synth_pair(base, rng)
    assert pair.img_b.shape == base.shape
    assert abs(np.linalg.norm(pair.t_vec) - 1.0) < 1e-9
    assert np.allclose(pair.e_mat, cross_matrix(pair.t_vec) @ pair.r_mat)
    assert abs(np.linalg.det(pair.h_mat)) > 1e-6
    # epipolar consistency of the warp itself: plane points obey x^T E y = 0
    pts_a = np.array([[20.0, 30.0], [70.0, 50.0], [40.0, 80.0]])
    pts_b = warp_points(pair.h_mat, pts_a)
    kinv = np.linalg.inv(pair.k_mat)
    for pa, pb in zip(pts_a, pts_b):
        ya = kinv @ np.array([*pa, 1.0])
        xb = kinv @ np.array([*pb, 1.0])
        assert abs(xb @ pair.e_mat @ ya) < 1e-9


def test_synth_pair_rejects_small_images(rng):
    with pytest.raises(ValueError):
        synth_pair(np.zeros((40, 40), np.uint8), rng)


def test_random_texture_range(rng):
    tex = random_texture(rng, 96)
    assert tex.shape == (96, 96) and tex.dtype == np.uint8
    assert tex.min() == 0 and tex.max() == 255


# ---------------------------------------------------------------------------
# ground truth


def test_gt_identity_warp():
    gt = gt_from_warp(np.eye(3), (4, 4), (32, 32))
    assert np.array_equal(gt, np.eye(16, dtype=np.float32))


def test_gt_one_cell_translation_unmatched_border():
    h = np.eye(3)
    h[1, 2] = 8.0  # one coarse cell down
    gt = gt_from_warp(h, (4, 4), (32, 32))
    expected = np.zeros((16, 16), np.float32)
    for r in range(3):
        for c in range(4):
            expected[r * 4 + c, (r + 1) * 4 + c] = 1.0
    assert np.array_equal(gt, expected)
    assert gt[12:].sum() == 0  # bottom row maps outside


def test_gt_out_of_image_all_zero():
    h = np.eye(3)
    h[0, 2] = 500.0
    gt = gt_from_warp(h, (4, 4), (32, 32))
    assert not gt.any()


def test_gt_at_most_one_positive_per_row(rng):
    for _ in range(10):
        pair = synth_pair(random_texture(rng, 96), rng)
        gt = gt_from_warp(pair.h_mat, (12, 12), (96, 96))
        assert (gt.sum(axis=1) <= 1).all()


def test_gt_half_cell_boundary_is_strict():
    h = np.eye(3)
    h[0, 2] = 4.0  # exactly half a coarse cell: distance == 4, not < 4
    gt = gt_from_warp(h, (4, 4), (32, 32))
    assert not gt.any()


def test_fine_gt_identity_anchors_center():
    book = np.stack(np.divmod(np.arange(25), 5), axis=1).reshape(1, 25, 2) + 8
    labels, valid = fine_gt(np.eye(3), book, book)
    assert valid[0]
    assert labels[0].argmax() == 12 * 25 + 12


def test_fine_gt_shifted_window_invalid():
    book_a = np.stack(np.divmod(np.arange(25), 5), axis=1).reshape(1, 25, 2) + 8
    book_b = book_a + 20  # windows do not overlap under identity warp
    labels, valid = fine_gt(np.eye(3), book_a, book_b)
    assert not valid[0]
    assert not labels.any()


# ---------------------------------------------------------------------------
# losses


def test_focal_loss_perfect_predictions():
    p = Tensor(np.ones((3, 3)))
    gt = np.eye(3, dtype=np.float32)
    assert focal_loss(p, gt).item() == 0.0


def test_focal_loss_hand_value():
    p = Tensor(np.array([[0.5]]))
    gt = np.ones((1, 1), np.float32)
    expected = 0.25 * 0.25 * np.log(2.0)
    assert abs(focal_loss(p, gt).item() - expected) < 1e-7


def test_focal_loss_monotone_in_confidence():
    gt = np.ones((1, 1), np.float32)
    values = [focal_loss(Tensor(np.array([[p]])), gt).item()
              for p in (0.1, 0.3, 0.5, 0.7, 0.9, 0.99)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(v >= 0 for v in values)


def test_focal_loss_no_positives_zero(rng):
    p = Tensor(rng.uniform(0.1, 0.9, (4, 4)))
    assert focal_loss(p, np.zeros((4, 4), np.float32)).item() == 0.0


def test_coarse_loss_composition(rng):
    p_ab = Tensor(rng.uniform(0.05, 0.95, (4, 4)).astype(np.float32))
    p_ba = Tensor(rng.uniform(0.05, 0.95, (4, 4)).astype(np.float32))
    gt = np.eye(4, dtype=np.float32)
    total = coarse_loss(p_ab, p_ba, gt).item()
    assert abs(total - (focal_loss(p_ab, gt).item() + focal_loss(p_ba, gt).item())) < 1e-7


def test_coarse_loss_symmetric_inputs(rng):
    p = rng.uniform(0.05, 0.95, (4, 4)).astype(np.float32)
    gt = np.eye(4, dtype=np.float32)
    both = coarse_loss(Tensor(p), Tensor(p), gt).item()
    assert abs(both - 2 * focal_loss(Tensor(p), gt).item()) < 1e-7


def test_fine_loss_mirrors_focal(rng):
    p_f = Tensor(rng.uniform(0.05, 0.95, (3, 25, 25)).astype(np.float32))
    labels = np.zeros((3, 25, 25), np.float32)
    labels[0, 12, 12] = labels[1, 3, 7] = labels[2, 0, 24] = 1.0
    valid = np.array([True, True, False])
    masked = labels * valid[:, None, None]
    assert abs(fine_loss(p_f, labels, valid).item()
               - focal_loss(p_f, masked).item()) < 1e-9
    assert fine_loss(p_f, labels, np.zeros(3, bool)).item() == 0.0


def test_epipolar_hand_case_and_scale_invariance():
    e = essential_matrix(np.eye(3), np.array([1.0, 0.0, 0.0]))
    x = Tensor(np.array([[0.0, 1.0, 1.0]]))
    y = Tensor(np.array([[0.0, 0.0, 1.0]]))
    assert abs(epipolar_loss(x, y, e).item() - 2.0) < 1e-6
    for s in (0.1, 10.0):
        assert abs(epipolar_loss(x, y, s * e).item() - 2.0) < 1e-6


def test_epipolar_zero_on_the_line():
    e = essential_matrix(np.eye(3), np.array([1.0, 0.0, 0.0]))
    # for t = e_x the epipolar constraint is y2*z1 = z2*y1
    x = Tensor(np.array([[5.0, 2.0, 1.0]]))
    y = Tensor(np.array([[-3.0, 2.0, 1.0]]))
    assert epipolar_loss(x, y, e).item() < 1e-10


def test_epipolar_swap_symmetry(rng):
    e = essential_matrix(np.eye(3), np.array([0.3, -0.5, 0.8]))
    x = Tensor(np.concatenate([rng.standard_normal((4, 2)), np.ones((4, 1))], 1))
    y = Tensor(np.concatenate([rng.standard_normal((4, 2)), np.ones((4, 1))], 1))
    assert abs(epipolar_loss(x, y, e).item() - epipolar_loss(y, x, e.T).item()) < 1e-6


def test_epipolar_empty_matchset():
    x = Tensor(np.zeros((0, 3)))
    y = Tensor(np.zeros((0, 3)))
    assert epipolar_loss(x, y, np.eye(3)).item() == 0.0


def test_normalized_points_applies_intrinsics():
    k = np.array([[100.0, 0, 50.0], [0, 100.0, 40.0], [0, 0, 1]])
    coords = Tensor(np.array([[150.0, 140.0, 50.0, 40.0]]))
    xb, ya = normalized_points(coords, k)
    assert np.allclose(ya.data, [[1.0, 1.0, 1.0]])  # A side: (150, 140)
    assert np.allclose(xb.data, [[0.0, 0.0, 1.0]])  # B side: principal point


def test_normalized_points_epipolar_consistency(rng):
    # projecting warped pairs through the real intrinsics scores ~zero
    base = random_texture(rng, 96)
    pair = synth_pair(base, rng)
    pts_a = np.array([[24.0, 24.0], [60.0, 36.0], [40.0, 72.0]])
    pts_b = warp_points(pair.h_mat, pts_a)
    coords = Tensor(np.concatenate([pts_a, pts_b], axis=1))
    xb, ya = normalized_points(coords, pair.k_mat)
    assert epipolar_loss(xb, ya, pair.e_mat).item() < 1e-6


# ---------------------------------------------------------------------------
# gradients of the losses (finite differences, float64)


def test_fd_gradient_coarse_loss(rng):
    gt = np.zeros((3, 4), np.float64)
    gt[0, 1] = gt[2, 3] = 1.0

    def fn(ls):
        return coarse_loss(T.softmax(ls[0], 1), T.softmax(ls[0], 0), gt)

    leaves = [Tensor(rng.standard_normal((3, 4)), dtype=np.float64, requires_grad=True)]
    fd_gradcheck(fn, leaves)


def test_fd_gradient_fine_loss(rng):
    labels = np.zeros((2, 4, 4), np.float64)
    labels[0, 1, 2] = labels[1, 0, 0] = 1.0
    valid = np.array([True, True])

    def fn(ls):
        p = T.mul(T.softmax(ls[0], 2), T.softmax(ls[0], 1))
        return fine_loss(p, labels, valid)

    leaves = [Tensor(rng.standard_normal((2, 4, 4)), dtype=np.float64, requires_grad=True)]
    fd_gradcheck(fn, leaves)


def test_fd_gradient_epipolar_loss(rng):
    e = essential_matrix(_rotation_for_test(), np.array([0.2, 0.4, -0.9]))

    def fn(ls):
        ones = Tensor(np.ones((3, 1)), dtype=np.float64)
        xb = T.concat([ls[0], ones], axis=1)
        ya = T.concat([ls[1], ones], axis=1)
        return epipolar_loss(xb, ya, e)

    leaves = [Tensor(rng.standard_normal((3, 2)), dtype=np.float64, requires_grad=True),
              Tensor(rng.standard_normal((3, 2)), dtype=np.float64, requires_grad=True)]
    fd_gradcheck(fn, leaves)


def _rotation_for_test():
    from mambamatch.supervision import _rotation
    return _rotation(0.1, -0.2, 0.3)


# ---------------------------------------------------------------------------
# schedule and precision metric


def test_warmup_schedule_boundaries():
    assert learning_rate(0, 200, 0.1, 16) == 0.0
    assert learning_rate(16, 200, 0.1, 16) == 0.1
    assert abs(learning_rate(8, 200, 0.1, 16) - 0.05) < 1e-12


def test_cosine_decay_monotone_after_warmup():
    rates = [learning_rate(s, 100, 0.1, 10) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[0] == 0.1
    assert learning_rate(99, 100, 0.1, 10) < 0.001


def test_coarse_precision_counts():
    from mambamatch.matcher import MatchSet
    ij = np.array([[0, 0], [5, 5], [0, 15]])
    ms = MatchSet((4, 4), (32, 32), ij, np.ones(3, np.float32),
                  np.zeros((3, 2), np.intp), np.ones(3, np.float32),
                  np.zeros((3, 4), np.intp), np.zeros((3, 4), np.float32))
    correct, total = coarse_precision(ms, np.eye(3))
    assert total == 3 and correct == 2  # (0,15) is far off the identity warp
