"""Generalized positional encodings: analytic property lab and nanolm bindings."""

from ._core import (
    Alibi,
    Ape,
    CheckpointError,
    Custom,
    Rope,
    UsageError,
    __version__,
    alibi_slopes,
    analyze,
    classify_convergence,
    corpus_report,
    default_grid,
    encoding_name,
    entropy_curve,
    evaluate,
    finetune,
    gps_test,
    gpe_score,
    grad_check,
    grad_q,
    identity,
    ldcp_range,
    mc_score_moments,
    partial_normalization,
    property_report,
    read_metadata,
    rope_angles,
    sample_unit_vector,
    sweep,
    train,
    truncated_entropy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
