"""Command-line behavior: exit codes, file outputs, determinism, config parsing."""

import numpy as np
import pytest

from mambamatch.cli import EXIT_EMPTY, EXIT_ERROR, EXIT_OK, main, parse_config, parse_dims
from mambamatch.matcher import MatcherConfig, init_weights, save_weights
from mambamatch.pgm import read_pgm, write_pgm
from mambamatch.selftest import run_selftest
from mambamatch.supervision import random_texture


@pytest.fixture(scope="module")
def weights_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("weights") / "ckpt"
    save_weights(d, init_weights(MatcherConfig(), seed=0))
    return str(d)


@pytest.fixture()
def images(tmp_path):
    rng = np.random.default_rng(7)
    a = tmp_path / "a.pgm"
    b = tmp_path / "b.pgm"
    tex = random_texture(rng, 96)
    write_pgm(a, tex)
    write_pgm(b, tex)
    return str(a), str(b)


# ---------------------------------------------------------------------------
# config grammar


def test_parse_config_roundtrip(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# a comment\nsteps = 50\nlr = 0.01  # inline\n\ntemperature = 0.2\n")
    kv = parse_config(str(cfg))
    assert kv == {"steps": "50", "lr": "0.01", "temperature": "0.2"}


def test_parse_config_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("warp_speed = 9\n")
    with pytest.raises(ValueError, match="unknown key"):
        parse_config(str(cfg))


def test_parse_config_bad_line(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps 50\n")
    with pytest.raises(ValueError, match="expected"):
        parse_config(str(cfg))


def test_parse_dims():
    assert parse_dims("8x8") == (8, 8)
    assert parse_dims("4X6") == (4, 6)
    with pytest.raises(ValueError):
        parse_dims("8by8")


# ---------------------------------------------------------------------------
# match command


def test_match_untrained_blank_is_empty_exit(tmp_path, weights_dir):
    blank = tmp_path / "blank.pgm"
    write_pgm(blank, np.full((64, 64), 100, np.uint8))
    out = tmp_path / "out"
    code = main(["match", str(blank), str(blank), "--weights", weights_dir,
                 "--out", str(out)])
    assert code == EXIT_EMPTY
    assert (out / "matches.txt").read_text() == ""


def test_match_missing_weights_errors(tmp_path, images):
    code = main(["match", images[0], images[1],
                 "--weights", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == EXIT_ERROR


def test_match_rejects_color_pgm(tmp_path, weights_dir):
    bad = tmp_path / "c.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 48)
    code = main(["match", str(bad), str(bad), "--weights", weights_dir,
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_ERROR


def test_match_deterministic_outputs(tmp_path, weights_dir, images):
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        main(["match", images[0], images[1], "--weights", weights_dir, "--out", str(out)])
        outs.append((out / "matches.txt").read_bytes())
    assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# bench and erf commands


def test_bench_outputs_ledger(capsys):
    code = main(["bench", "--dims", "8x8"])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "strategy,tokens,directions,omnidirectional,global"
    rows = {ln.split(",")[0]: ln.split(",") for ln in lines[1:]}
    assert rows["jego"][1] == "128"
    assert rows["vim"][1] == "256"
    assert rows["vmamba"][1] == "512"
    assert rows["evmamba"][1] == "128"
    assert rows["transformer"][1] == str(128 * 128)


def test_bench_scales_linearly(capsys):
    main(["bench", "--dims", "4x4"])
    small = capsys.readouterr().out
    main(["bench", "--dims", "8x8"])
    large = capsys.readouterr().out
    tok = lambda text, name: int([ln for ln in text.splitlines() if ln.startswith(name)][0].split(",")[1])
    assert tok(large, "jego") == 4 * tok(small, "jego")


def test_bench_invalid_dims():
    assert main(["bench", "--dims", "0x8"]) == EXIT_ERROR
    assert main(["bench", "--dims", "axb"]) == EXIT_ERROR


def test_erf_writes_reports(tmp_path):
    out = tmp_path / "erf"
    code = main(["erf", "--dims", "4x4", "--out", str(out)])
    assert code == EXIT_OK
    for kind in ("jego", "evmamba"):
        csv = (out / f"coverage_{kind}.csv").read_text().splitlines()
        assert csv[0] == "image,row,col,coverage"
        heat = read_pgm(out / f"coverage_{kind}.pgm")
        assert heat.shape == (4, 8)


def test_erf_rejects_odd_dims(tmp_path):
    assert main(["erf", "--dims", "3x4", "--out", str(tmp_path)]) == EXIT_ERROR


# ---------------------------------------------------------------------------
# selftest


def test_selftest_passes(capsys):
    code = main(["selftest"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "selftest: PASS" in out
    for suite in ("partition", "round-trip", "mode-equivalence", "causality", "gradients"):
        assert f"{suite}: PASS" in out


def test_selftest_merge_fault_detected(capsys):
    ok = run_selftest(fault="merge")
    out = capsys.readouterr().out
    assert not ok
    assert "round-trip: FAIL" in out
    assert "partition: PASS" in out  # the fault hits the merge scatter, not the slicing


def test_unknown_jego_log_level(monkeypatch):
    monkeypatch.setenv("JEGO_LOG", "verbose")
    assert main(["bench", "--dims", "4x4"]) == EXIT_ERROR


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == EXIT_ERROR
    assert main(["match"]) == EXIT_ERROR
