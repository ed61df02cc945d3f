"""Encoder shapes, coarse/fine matching contracts, sub-pixel bounds, records."""

import numpy as np
import pytest

from mambamatch import tensor as T
from mambamatch.matcher import (MatcherConfig, MixerParams, coarse_match,
                                coarse_probabilities, coarse_similarity, crop_windows,
                                encode, fine_match, init_weights, load_weights,
                                match_pair, mixer, read_matches, run_pipeline,
                                save_weights, subpixel_refine, write_matches)
from mambamatch.tensor import Tensor


@pytest.fixture(scope="module")
def weights():
    return init_weights(MatcherConfig(), seed=0)


def textured(rng, size=64):
    img = rng.uniform(0, 255, (size, size))
    return img.astype(np.uint8)


# ---------------------------------------------------------------------------
# encoder


def test_encode_shapes(weights, rng):
    img = textured(rng, 64)
    with T.no_grad():
        coarse, fine, orig = encode(img, weights)
    assert coarse.shape == (8, 8, 32)
    assert fine.shape == (32, 32, 16)
    assert orig == (64, 64)


def test_encode_pads_odd_sizes(weights, rng):
    img = textured(rng, 64)[:50, :60]
    with T.no_grad():
        coarse, fine, orig = encode(img, weights)
    assert coarse.shape == (7, 8, 32)
    assert orig == (50, 60)


def test_encode_translation_equivariance_interior(weights, rng):
    img = textured(rng, 64)
    shifted = np.roll(img, 8, axis=0)  # one coarse cell
    with T.no_grad():
        c0, _, _ = encode(img, weights)
        c1, _, _ = encode(shifted, weights)
    # interior crop: borders feel the zero padding
    assert np.allclose(c1.data[3:6, 2:6], c0.data[2:5, 2:6], atol=1e-5)


def test_encode_deterministic(weights, rng):
    img = textured(rng, 64)
    with T.no_grad():
        a = encode(img, weights)[0].data
        b = encode(img, weights)[0].data
    assert np.array_equal(a, b)


def test_encode_rejects_empty(weights):
    with pytest.raises(ValueError):
        encode(np.zeros((0, 64)), weights)
    with pytest.raises(ValueError):
        encode(np.zeros((4, 4, 3)), weights)


# ---------------------------------------------------------------------------
# coarse similarity and matching


def test_similarity_orthonormal_identity():
    eye = Tensor(np.eye(4, 6))
    sim = coarse_similarity(eye, eye, temperature=0.1)
    assert np.allclose(sim.data, np.eye(4) * 10.0, atol=1e-6)


def test_similarity_temperature_scale(rng):
    fa = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    fb = Tensor(rng.standard_normal((5, 4)).astype(np.float32))
    s1 = coarse_similarity(fa, fb, 1.0).data
    s01 = coarse_similarity(fa, fb, 0.1).data
    assert np.allclose(s01, 10.0 * s1, rtol=1e-6)


def test_similarity_matches_loop_oracle(rng):
    fa = rng.standard_normal((3, 4)).astype(np.float32)
    fb = rng.standard_normal((2, 4)).astype(np.float32)
    out = coarse_similarity(Tensor(fa), Tensor(fb), 0.5).data
    ref = np.zeros((3, 2), np.float32)
    for i in range(3):
        for j in range(2):
            s = np.float32(0)
            for c in range(4):
                s = s + fa[i, c] * fb[j, c]
            ref[i, j] = s * np.float32(1.0 / 0.5)
    assert np.array_equal(out, ref)
    with pytest.raises(ValueError):
        coarse_similarity(Tensor(fa), Tensor(fb), 0.0)


def coarse_match_oracle(p_ab, p_ba, threshold):
    """Literal row-max/col-max/threshold/union rules, loop form."""
    n_a, n_b = p_ab.shape
    found = {}
    for i in range(n_a):
        row_max = max(p_ab[i])
        for j in range(n_b):
            if p_ab[i, j] == row_max and p_ab[i, j] >= threshold:
                found[(i, j)] = max(found.get((i, j), 0.0), p_ab[i, j])
    for j in range(n_b):
        col_max = max(p_ba[i][j] for i in range(n_a))
        for i in range(n_a):
            if p_ba[i, j] == col_max and p_ba[i, j] >= threshold:
                found[(i, j)] = max(found.get((i, j), 0.0), p_ba[i, j])
    pairs = sorted(found)
    return pairs, [found[p] for p in pairs]


def test_coarse_match_diag_dominant():
    sim = Tensor(np.array([[10.0, 0.0], [0.0, 10.0]]))
    p_ab, p_ba = coarse_probabilities(sim)
    ij, conf = coarse_match(p_ab.data, p_ba.data, 0.2)
    assert ij.tolist() == [[0, 0], [1, 1]]
    assert (conf > 0.99).all()


def test_coarse_match_uniform_below_threshold():
    # uniform rows give 1/n mass per cell; under the 0.2 threshold from n = 6
    sim = Tensor(np.zeros((6, 6)))
    p_ab, p_ba = coarse_probabilities(sim)
    ij, _ = coarse_match(p_ab.data, p_ba.data, 0.2)
    assert len(ij) == 0


def test_coarse_match_many_to_one_union():
    sim = Tensor(np.array([[5.0], [5.0]]))
    p_ab, p_ba = coarse_probabilities(sim)
    ij, conf = coarse_match(p_ab.data, p_ba.data, 0.2)
    assert ij.tolist() == [[0, 0], [1, 0]]
    assert np.allclose(conf[:1], 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_coarse_match_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_a, n_b = rng.integers(2, 9, size=2)
    sim = Tensor(rng.standard_normal((n_a, n_b)).astype(np.float32) * 3)
    p_ab, p_ba = coarse_probabilities(sim)
    ij, conf = coarse_match(p_ab.data, p_ba.data, 0.2)
    ref_pairs, ref_conf = coarse_match_oracle(p_ab.data, p_ba.data, 0.2)
    assert [tuple(p) for p in ij.tolist()] == ref_pairs
    assert np.allclose(conf, ref_conf)


def test_union_contains_dual_softmax_mnn(rng):
    # every mutual argmax above threshold in both directions is in the union
    for _ in range(20):
        sim = Tensor(rng.standard_normal((6, 6)).astype(np.float32) * 4)
        p_ab, p_ba = coarse_probabilities(sim)
        ij, _ = coarse_match(p_ab.data, p_ba.data, 0.2)
        got = {tuple(p) for p in ij.tolist()}
        for i in range(6):
            j = p_ab.data[i].argmax()
            if (p_ab.data[:, j].argmax() == i and p_ab.data[i, j] >= 0.2
                    and p_ba.data[i, j] >= 0.2 and p_ba.data[:, j].argmax() == i):
                assert (i, j) in got


def test_probability_contracts(rng):
    sim = Tensor(rng.standard_normal((7, 5)).astype(np.float32))
    p_ab, p_ba = coarse_probabilities(sim)
    assert np.allclose(p_ab.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(p_ba.data.sum(axis=0), 1.0, atol=1e-6)
    assert (p_ab.data >= 0).all() and (p_ab.data <= 1).all()


# ---------------------------------------------------------------------------
# windows, mixer, fine matching


def test_crop_windows_center_covers_map(rng):
    fmap = Tensor(rng.standard_normal((5, 5, 3)).astype(np.float32))
    wins, book = crop_windows(fmap, np.array([[2, 2]]), window=5)
    assert np.array_equal(wins.data[0].reshape(5, 5, 3), fmap.data)
    assert book[0, 12].tolist() == [2, 2]


def test_crop_windows_corner_zero_padded(rng):
    fmap = Tensor(rng.standard_normal((6, 6, 2)).astype(np.float32))
    wins, book = crop_windows(fmap, np.array([[0, 0]]), window=5)
    grid = wins.data[0].reshape(5, 5, 2)
    assert not grid[:2, :, :].any() and not grid[:, :2, :].any()
    assert np.array_equal(grid[2:, 2:], fmap.data[:3, :3])
    assert book[0, 0].tolist() == [-2, -2]


def zero_mixer(tokens, channels):
    def z(a, b):
        return Tensor(np.zeros((a, b), np.float32))

    def zb(a):
        return Tensor(np.zeros(a, np.float32))

    return MixerParams(z(tokens, tokens), zb(tokens), z(tokens, tokens), zb(tokens),
                       z(channels, channels), zb(channels), z(channels, channels), zb(channels))


def test_mixer_zero_weights_identity(rng):
    x = Tensor(rng.standard_normal((2, 6, 4)).astype(np.float32))
    out = mixer(x, zero_mixer(6, 4))
    assert np.array_equal(out.data, x.data)


def test_mixer_matches_manual_composition(rng):
    from mambamatch.matcher import init_mixer
    params = init_mixer(6, 4, np.random.default_rng(3))
    params.w_tok2.data[:] = T.uniform_init(np.random.default_rng(4), (6, 6), 6)
    params.w_ch2.data[:] = T.uniform_init(np.random.default_rng(5), (4, 4), 4)
    x = Tensor(rng.standard_normal((2, 6, 4)).astype(np.float32))
    out = mixer(x, params)
    t = T.transpose(x, (0, 2, 1))
    t = T.linear(T.gelu(T.linear(t, params.w_tok1, params.b_tok1)), params.w_tok2, params.b_tok2)
    mid = T.add(x, T.transpose(t, (0, 2, 1)))
    ref = T.add(mid, T.linear(T.gelu(T.linear(mid, params.w_ch1, params.b_ch1)),
                              params.w_ch2, params.b_ch2))
    assert np.array_equal(out.data, ref.data)
    with pytest.raises(ValueError):
        mixer(Tensor(np.zeros((1, 5, 4))), params)


def test_fine_match_orthonormal_diagonal():
    # identical orthonormal windows: dual-softmax peaks on the diagonal and
    # the tie-break anchors the selection at the window centers
    eye = np.eye(25, dtype=np.float32)[None, :, :]
    fr = fine_match(Tensor(eye), Tensor(eye), zero_mixer(50, 25))
    assert fr.pairs[0].tolist() == [12, 12]
    assert fr.p_f.data[0].argmax() % 26 == 0  # maxima on the diagonal
    row_sm = T.softmax(T.pair_inner(Tensor(eye), Tensor(eye)), axis=2).data
    col_sm = T.softmax(T.pair_inner(Tensor(eye), Tensor(eye)), axis=1).data
    assert np.allclose(row_sm.sum(axis=2), 1.0, atol=1e-6)
    assert np.allclose(col_sm.sum(axis=1), 1.0, atol=1e-6)


def test_fine_match_one_pair_per_window(rng):
    wa = Tensor(rng.standard_normal((4, 25, 8)).astype(np.float32))
    wb = Tensor(rng.standard_normal((4, 25, 8)).astype(np.float32))
    fr = fine_match(wa, wb, zero_mixer(50, 8))
    assert fr.pairs.shape == (4, 2)
    assert (fr.pairs >= 0).all() and (fr.pairs < 25).all()
    # selected pair is a mutual argmax of its window's probability matrix
    for i in range(4):
        a, b = fr.pairs[i]
        assert fr.p_f.data[i, a].argmax() == b
        assert fr.p_f.data[i, :, b].argmax() == a


# ---------------------------------------------------------------------------
# sub-pixel refinement


def test_subpixel_zero_head_gives_cell_centers(weights, rng):
    img = textured(rng, 64)
    with T.no_grad():
        res = run_pipeline(img, img, weights)
    if res.fine is None:
        pytest.skip("untrained weights produced no matches on this texture")
    assert np.array_equal(res.delta.data, np.zeros_like(res.delta.data))


def test_subpixel_bounds_with_random_head(rng):
    cfg = MatcherConfig()
    w = init_weights(cfg, seed=1)
    w.sub_w.data[:] = rng.standard_normal(w.sub_w.shape).astype(np.float32) * 3
    from mambamatch.matcher import FineResult
    m = 6
    mixed_a = Tensor(rng.standard_normal((m, 25, 16)).astype(np.float32))
    mixed_b = Tensor(rng.standard_normal((m, 25, 16)).astype(np.float32))
    fr = FineResult(Tensor(np.ones((m, 25, 25)) / 625), np.full((m, 2), 12, np.intp),
                    np.ones(m, np.float32), mixed_a, mixed_b)
    book = np.tile(np.stack(np.divmod(np.arange(25), 5), 1).reshape(1, 25, 2), (m, 1, 1)) + 3
    with T.no_grad():
        delta, coords, clamped = subpixel_refine(fr, book, book, w, (32, 32))
    assert (np.abs(delta.data) <= 1.0).all()
    base = book[np.arange(m), 12][:, ::-1] * 2  # (x, y) of the matched cell
    assert (np.abs(coords.data[:, :2] - base) <= 2.0 + 1e-5).all()
    assert (clamped[:, (0, 2)] <= 31).all() and (clamped >= 0).all()


# ---------------------------------------------------------------------------
# full pipeline and records


def test_blank_images_give_empty_matchset(weights):
    blank = np.full((64, 64), 128, np.uint8)
    ms = match_pair(blank, blank, weights)
    assert len(ms) == 0


def test_pipeline_rejects_mismatched_sizes(weights, rng):
    with pytest.raises(ValueError):
        match_pair(textured(rng, 64), textured(rng, 64)[:32], weights)


def test_end_to_end_gradients_nonzero(rng):
    # coarse loss reaches the encoder and the scan blocks (the block's inner
    # weights only see gradient once the residual output projection is live)
    w = init_weights(MatcherConfig(), seed=2)
    for blk in w.layers[0].blocks:
        blk.w_out.data[:] = T.uniform_init(np.random.default_rng(9), blk.w_out.shape,
                                           blk.w_out.shape[0])
    img_a = textured(rng, 32)
    img_b = textured(rng, 32)
    res = run_pipeline(img_a, img_b, w)
    gt = np.eye(16, dtype=np.float32)
    from mambamatch.supervision import coarse_loss
    loss = coarse_loss(res.p_ab, res.p_ba, gt)
    grads = T.backward(loss, w.parameters())
    named = dict(w.named())
    for name in ("enc.k0", "layer0.dir0.w_x", "layer0.dir0.w_out", "layer0.agg.gate_k"):
        assert np.abs(grads[named[name]]).max() > 0, name


def test_end_to_end_fd_spot_check(rng):
    # wiring check on a 16x16 pair: analytic gradient of the coarse loss vs
    # central differences on a few parameter entries (float32, so coarse h
    # and tolerance; the 1e-4 precision checks live in the op-level suite)
    w = init_weights(MatcherConfig(), seed=3)
    for blk in w.layers[0].blocks:
        blk.w_out.data[:] = T.uniform_init(np.random.default_rng(4), blk.w_out.shape,
                                           blk.w_out.shape[0])
    img_a = textured(rng, 16)
    img_b = textured(rng, 16)
    gt = np.eye(4, dtype=np.float32)
    from mambamatch.supervision import coarse_loss

    def loss_value():
        res = run_pipeline(img_a, img_b, w)
        return coarse_loss(res.p_ab, res.p_ba, gt)

    grads = T.backward(loss_value(), w.parameters())
    named = dict(w.named())
    rng_pick = np.random.default_rng(0)
    for name in ("enc.k3", "layer0.agg.out_k", "layer0.dir1.w_out"):
        tensor = named[name]
        flat = tensor.data.reshape(-1)
        idx = int(rng_pick.integers(flat.size))
        h = 1e-2
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_value().item()
        flat[idx] = orig - h
        down = loss_value().item()
        flat[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[tensor].reshape(-1)[idx]
        assert abs(analytic - numeric) / (abs(numeric) + 1e-4) < 0.05, name


def test_match_records_all_levels(tmp_path, rng):
    w = init_weights(MatcherConfig(), seed=0)
    # synthesize a MatchSet directly so every writer branch is exercised
    from mambamatch.matcher import MatchSet
    ms = MatchSet((4, 4), (32, 32),
                  np.array([[0, 5]]), np.array([0.9], np.float32),
                  np.array([[12, 13]]), np.array([0.8], np.float32),
                  np.array([[2, 3, 4, 5]]), np.array([[6.5, 4.25, 10.0, 8.75]], np.float32))
    for level, x_expect in (("coarse", 3.5), ("fine", 6.0), ("subpixel", 6.5)):
        path = tmp_path / f"{level}.txt"
        write_matches(path, ms, level=level)
        row = read_matches(path)[0]
        assert row[5] == level
        assert row[0] == x_expect
    with pytest.raises(ValueError):
        write_matches(tmp_path / "x.txt", ms, level="pixel")


def test_checkpoint_manifest_validation(tmp_path, rng):
    from mambamatch.checkpoint import load_checkpoint, save_checkpoint
    save_checkpoint(tmp_path / "c", {"a.b": np.ones((2, 3), np.float32)})
    back = load_checkpoint(tmp_path / "c")
    assert np.array_equal(back["a.b"], np.ones((2, 3), np.float32))
    manifest = tmp_path / "c" / "manifest.txt"
    manifest.write_text("a.b 9 9\n")
    with pytest.raises(ValueError, match="manifest"):
        load_checkpoint(tmp_path / "c")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_match_records_round_trip(tmp_path, weights, rng):
    img = textured(rng, 64)
    ms = match_pair(img, img, weights)
    path = tmp_path / "m.txt"
    n = write_matches(path, ms)
    rows = read_matches(path)
    assert len(rows) == n == len(ms)
    for row in rows:
        assert row[5] == "subpixel"
        assert 0.0 < row[4] <= 1.0


def test_weights_checkpoint_round_trip(tmp_path, weights, rng):
    save_weights(tmp_path / "ckpt", weights)
    restored = load_weights(tmp_path / "ckpt", MatcherConfig())
    for (na, ta), (nb, tb) in zip(weights.named(), restored.named()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)
    img = textured(rng, 64)
    a = match_pair(img, img, weights)
    b = match_pair(img, img, restored)
    assert np.array_equal(a.subpixel, b.subpixel)


def test_load_weights_rejects_config_mismatch(tmp_path, weights):
    save_weights(tmp_path / "ckpt", weights)
    with pytest.raises(ValueError):
        load_weights(tmp_path / "ckpt", MatcherConfig(c_coarse=16))


def test_matcher_config_validation():
    with pytest.raises(ValueError):
        MatcherConfig(temperature=-1.0)
    with pytest.raises(ValueError):
        MatcherConfig(coarse_threshold=1.5)
    with pytest.raises(ValueError):
        MatcherConfig(window=4)
