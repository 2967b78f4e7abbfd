"""Fusion compiler for tensor programs built from contractions and reductions."""

from __future__ import annotations

from .algebra import SOFTMAX, ReductionAlgebra, check_algebra, run_online, run_stable
from .dsl import format_program, parse_program
from .evaluate import eval_naive
from .executor import ExecConfig, TrafficReport, execute, execute_unfused
from .fusion import FusionOptions, KernelSchedule, schedule
from .grid import LogicalGrid, TileConfig, delinearize, linearize
from .ir import DType, GraphBuilder, IRError, TensorGraph, validate
from .variants import AttentionSpec, build_variant, corpus

__all__ = [
    "SOFTMAX",
    "AttentionSpec",
    "DType",
    "ExecConfig",
    "FusionOptions",
    "GraphBuilder",
    "IRError",
    "KernelSchedule",
    "LogicalGrid",
    "ReductionAlgebra",
    "TensorGraph",
    "TileConfig",
    "TrafficReport",
    "build_variant",
    "check_algebra",
    "corpus",
    "delinearize",
    "eval_naive",
    "execute",
    "execute_unfused",
    "format_program",
    "linearize",
    "parse_program",
    "run_online",
    "run_stable",
    "schedule",
    "validate",
]
