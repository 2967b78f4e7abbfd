"""Human and machine-readable renderings of plans, traffic and verification."""

from __future__ import annotations

import json
from typing import Any, Mapping

from .executor import TrafficReport
from .fusion import KernelSchedule

SCORE_DIMS = ("M", "N")


def emit_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def parse_json(text: str) -> Any:
    return json.loads(text)


def score_elements(report: TrafficReport, graph_dims: Mapping[str, tuple[str, ...]]) -> int:
    """Materialised elements of values indexed by both query and key positions."""
    return sum(n for v, n in report.materialized.items() if set(SCORE_DIMS) <= set(graph_dims.get(v, ())))


def plan_text(sched: KernelSchedule) -> str:
    lines = [f"kernels: {len(sched.kernels)}"]
    for k in sched.kernels:
        lines.append(f"{k.name}: {len(k.members)} ops  sketch {k.sketch}  tiled {k.tiled}")
        lines.append(f"  members: {', '.join(k.member_ids)}")
        if k.demoted:
            lines.append(f"  demoted: {', '.join(k.demoted)}")
        if k.tiled.eliminated:
            lines.append(f"  eliminated: {', '.join(k.tiled.eliminated)}")
        grid = " x ".join(f"{n}:{t}" for n, t in k.grid.axes) or "single block"
        lines.append(f"  grid: {grid} ({k.grid.total} blocks)")
        lines.append(f"  reads: {', '.join(k.inputs)}")
        lines.append(f"  writes: {', '.join(k.outputs)}")
    if sched.plans:
        lines.append("fusions:")
        for p in sched.plans:
            extra = f" demoted {list(p.demoted_dims)}" if p.demoted_dims else ""
            lines.append(f"  {p.kind.value}: {p.producer} -> {p.consumer}{extra} => {p.sketch}")
    for d in sched.diagnostics:
        lines.append(f"note: {d}")
    return "\n".join(lines) + "\n"


def traffic_text(report: TrafficReport, title: str) -> str:
    lines = [
        f"{title}:",
        f"  kernels: {report.kernel_count}",
        f"  global reads: {report.global_reads}",
        f"  global writes: {report.global_writes}",
        f"  intermediate bytes materialized: {report.intermediate_bytes_materialized}",
    ]
    return "\n".join(lines) + "\n"


def ratio(a: float, b: float) -> float | None:
    return None if b == 0 else a / b


def sweep_text(rows: list[dict]) -> str:
    head = f"{'n':>6} {'fused traffic':>14} {'x':>6} {'unfused score elems':>20} {'x':>6} {'fused interm. bytes':>20}"
    lines = [head]
    prev = None
    for r in rows:
        ft, us = r["fused"]["total_traffic"], r["unfused"]["score_elements"]
        fx = f"{ft / prev[0]:.2f}" if prev and prev[0] else "-"
        ux = f"{us / prev[1]:.2f}" if prev and prev[1] else "-"
        lines.append(f"{r['n']:>6} {ft:>14} {fx:>6} {us:>20} {ux:>6} {r['fused']['intermediate_bytes_materialized']:>20}")
        prev = (ft, us)
    return "\n".join(lines) + "\n"
