"""Desk-scale Mamba-based semi-dense feature matcher.

A dependency-light numpy implementation of a selective state-space matcher:
joint four-directional skip scanning over an image pair, coarse-to-fine
correspondence with sub-pixel refinement, synthetic-warp supervision, and
discrete complexity / receptive-field analysis.
"""

from .tensor import Tensor, NonFiniteError, backward, no_grad
from .ssm import (SsmBlockParams, SsmDims, discretize, global_conv_scan, init_block,
                  mamba_block, selective_scan)
from .jego import (AggregatorParams, ScanLayout, aggregate, build_layout, dump_layout,
                   jego_merge, jego_scan, joint_concat, joint_mamba_layer)
from .matcher import (MatcherConfig, MatcherWeights, MatchSet, init_weights, load_weights,
                      match_pair, run_pipeline, save_weights, write_matches)
from .supervision import (PairSample, TrainConfig, coarse_loss, epipolar_loss, fine_loss,
                          focal_loss, gt_from_warp, random_texture, synth_pair, train)
from .analysis import (CoverageReport, aggregated_receptive, coverage_report, scan_receptive,
                       strategy_table, strategy_tokens)
from .selftest import run_selftest

__version__ = "0.1.0"

__all__ = [
    "Tensor", "NonFiniteError", "backward", "no_grad",
    "SsmBlockParams", "SsmDims", "discretize", "global_conv_scan", "init_block",
    "mamba_block", "selective_scan",
    "AggregatorParams", "ScanLayout", "aggregate", "build_layout", "dump_layout",
    "jego_merge", "jego_scan", "joint_concat", "joint_mamba_layer",
    "MatcherConfig", "MatcherWeights", "MatchSet", "init_weights", "load_weights",
    "match_pair", "run_pipeline", "save_weights", "write_matches",
    "PairSample", "TrainConfig", "coarse_loss", "epipolar_loss", "fine_loss",
    "focal_loss", "gt_from_warp", "random_texture", "synth_pair", "train",
    "CoverageReport", "aggregated_receptive", "coverage_report", "scan_receptive",
    "strategy_table", "strategy_tokens",
    "run_selftest",
]
