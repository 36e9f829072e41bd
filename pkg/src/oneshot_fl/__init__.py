"""Deterministic simulator comparing one-shot and multi-round federated averaging."""

from .numerics import (
    InvalidInputError,
    RngStream,
    ShapeError,
    axpy,
    fork_stream,
    l2_norm,
    load_vector,
    save_vector,
    vec_sub,
    weighted_sum,
)
from .protocol import FLConfig, Federation, aggregate, comm_cost, run_multiround, run_oneshot

__version__ = "0.1.0"
