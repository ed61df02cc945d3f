"""Command-line entry point: match, train, bench, erf, selftest.

Exit codes: 0 success, 1 usage or I/O error, 2 empty-result success (a
distinct code so shell pipelines can branch on "ran fine, found nothing").
All outputs land under --out; the JEGO_LOG environment variable (off, info,
debug) controls logging verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .analysis import coverage_report, strategy_table, write_coverage_csv, write_coverage_pgm
from .matcher import MatcherConfig, load_weights, match_pair, write_matches
from .pgm import read_pgm
from .selftest import run_selftest
from .supervision import TrainConfig, train

__all__ = ["main", "parse_config", "parse_dims"]

log = logging.getLogger("mambamatch")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EMPTY = 2

_MATCHER_KEYS = {f.name: f.type for f in dataclasses.fields(MatcherConfig)}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "matcher"}


def parse_config(path: str) -> dict:
    """Line-oriented ``key = value`` with ``#`` comments; unknown keys error."""
    known = set(_MATCHER_KEYS) | set(_TRAIN_KEYS)
    out: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def _coerce(value: str, kind: str):
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def _split_config(kv: dict, seed: int | None) -> TrainConfig:
    matcher_kwargs = {k: _coerce(v, _MATCHER_KEYS[k]) for k, v in kv.items() if k in _MATCHER_KEYS}
    train_kwargs = {k: _coerce(v, _TRAIN_KEYS[k]) for k, v in kv.items() if k in _TRAIN_KEYS}
    if seed is not None:
        train_kwargs["seed"] = seed  # an explicit flag beats the config file
    return TrainConfig(matcher=MatcherConfig(**matcher_kwargs), **train_kwargs)


def parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as err:
        raise ValueError(f"--dims expects HxW, got {text!r}") from err


def _setup_logging() -> None:
    level = os.environ.get("JEGO_LOG", "off").lower()
    levels = {"off": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ValueError(f"JEGO_LOG must be one of off/info/debug, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def cmd_match(args) -> int:
    config_kv = parse_config(args.config) if args.config else {}
    matcher_kwargs = {k: _coerce(v, _MATCHER_KEYS[k])
                      for k, v in config_kv.items() if k in _MATCHER_KEYS}
    config = MatcherConfig(**matcher_kwargs)
    weights = load_weights(args.weights, config)
    img_a = read_pgm(args.image_a)
    img_b = read_pgm(args.image_b)
    log.info("matching %s against %s", args.image_a, args.image_b)
    matches = match_pair(img_a, img_b, weights)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "matches.txt")
    count = write_matches(out_path, matches)
    log.info("wrote %d matches to %s", count, out_path)
    return EXIT_OK if count else EXIT_EMPTY


def cmd_train(args) -> int:
    config_kv = parse_config(args.config) if args.config else {}
    config = _split_config(config_kv, args.seed)
    log.info("training for %d steps on corpus %s", config.steps, args.corpus)
    _, metrics = train(config, args.corpus, args.out)
    log.info("final metrics: %s", metrics[-1] if metrics else "none")
    return EXIT_OK


def cmd_bench(args) -> int:
    h, w = parse_dims(args.dims)
    if h <= 0 or w <= 0:
        raise ValueError("bench dims must be positive")
    print("strategy,tokens,directions,omnidirectional,global")
    for row in strategy_table(h, w):
        print(f"{row.name},{row.tokens},{row.directions},"
              f"{int(row.omnidirectional)},{int(row.global_field)}")
    return EXIT_OK


def cmd_erf(args) -> int:
    h, w = parse_dims(args.dims)
    if h <= 0 or w <= 0 or h % 2 or w % 2:
        raise ValueError("erf dims must be positive and even")
    os.makedirs(args.out, exist_ok=True)
    for kind in ("jego", "evmamba"):
        report = coverage_report(h, w, kind)
        write_coverage_csv(report, os.path.join(args.out, f"coverage_{kind}.csv"))
        write_coverage_pgm(report, os.path.join(args.out, f"coverage_{kind}.pgm"))
        log.info("%s: min %.3f mean %.3f", kind, report.min_coverage, report.mean_coverage)
    return EXIT_OK


def cmd_selftest(args) -> int:
    ok = run_selftest()
    print("selftest:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mambamatch",
                                     description="Joint-scan state-space feature matcher")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed override (defaults to 0 / the config file value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two PGM images with trained weights")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--weights", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("train", help="train on a directory of PGM base images")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="print the token-count ledger")
    p.add_argument("--dims", required=True, help="coarse grid HxW")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("erf", help="write receptive-field coverage reports")
    p.add_argument("--dims", required=True, help="coarse grid HxW")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_erf)

    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as err:  # argparse uses code 2 for usage errors
        return EXIT_ERROR if err.code else EXIT_OK
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
