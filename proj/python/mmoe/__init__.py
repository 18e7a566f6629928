"""Matryoshka mixture-of-experts toolkit: routing, schedules, analysis and the mmoe CLI."""

import json

from ._mmoe import (
    Checkpoint,
    ConfigError,
    FormatError,
    NumericError,
    ShapeError,
    enforce_budget,
    focused_spearman,
    mods,
    run_cli,
    select_topk,
    select_topp,
    spearman_rank,
    weighted_k_probabilities,
)

__version__ = "0.1.0"


def model_config(checkpoint):
    return json.loads(checkpoint.model_config)


def cli(*args):
    """Run an mmoe subcommand, raising RuntimeError on a nonzero exit."""
    code, out, err = run_cli([str(a) for a in args])
    if code != 0:
        raise RuntimeError(f"mmoe {' '.join(map(str, args))} exited with {code}: {err.strip()}")
    return out


__all__ = [
    "Checkpoint",
    "ConfigError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "cli",
    "enforce_budget",
    "focused_spearman",
    "model_config",
    "mods",
    "run_cli",
    "select_topk",
    "select_topp",
    "spearman_rank",
    "weighted_k_probabilities",
]
