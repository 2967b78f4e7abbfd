"""Command-line driver: compile, run, verify, stats and corpus listing."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .algebra import SOFTMAX, check_algebra, run_online, run_stable
from .dsl import DslError, parse_program
from .evaluate import EvaluationError, eval_naive
from .executor import ExecConfig, ExecutionError, compare, execute, execute_unfused, normwise_error
from .fusion import FusionKind, FusionOptions, KernelSchedule, schedule
from .grid import GridError, TileConfig
from .ir import DType, IRError, TensorGraph, validate
from .report import emit_json, plan_text, score_elements, sweep_text, traffic_text
from .semantic import DEFAULT_SAMPLES
from .variants import VARIANTS, AttentionSpec, build_variant, constant_inputs, corpus, random_bindings

TOLERANCE = {DType.F32: 1e-5, DType.F64: 1e-10}

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Loaded:
    def __init__(self, name: str, graph: TensorGraph, constants=None, spec: AttentionSpec | None = None):
        self.name = name
        self.graph = graph
        self.constants = constants or {}
        self.spec = spec


def _with_dtype(graph: TensorGraph, dtype: DType) -> TensorGraph:
    nodes = [replace(n, outputs=tuple(replace(r, dtype=dtype) for r in n.outputs)) for n in graph.nodes]
    return graph.with_nodes(nodes)


def _resolve_spec(args) -> tuple[str, AttentionSpec]:
    entries = dict(corpus())
    name = args.variant
    if name in entries:
        spec = entries[name]
    elif name in VARIANTS:
        spec = AttentionSpec(name)
    else:
        raise UsageError(f"unknown variant {name!r}; see the corpus command")
    changes = {}
    for flag, field_name in (("seq", "seq"), ("heads", "heads"), ("kv_heads", "kv_heads"), ("batch", "batch"), ("head_dim", "head_dim")):
        val = getattr(args, flag, None)
        if val is not None:
            changes[field_name] = val
    if args.dtype:
        changes["dtype"] = DType(args.dtype)
    try:
        spec = spec.with_(**changes) if changes else spec
    except IRError as exc:
        raise UsageError(str(exc)) from None
    return name, spec


def load(args, seq: int | None = None) -> Loaded:
    if bool(args.input) == bool(args.variant):
        raise UsageError("give exactly one of --input or --variant")
    if args.input:
        path = Path(args.input)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        lines: dict[str, int] = {}
        try:
            graph = parse_program(text, lines)
        except DslError as exc:
            raise UsageError(f"{path}:{exc.line}: {exc.message}") from None
        diags = validate(graph)
        if diags:
            msgs = [f"{path}:{lines.get(d.node, 0)}: {d.node}: {d.message}" for d in diags]
            raise UsageError("\n".join(msgs))
        if args.dtype:
            graph = _with_dtype(graph, DType(args.dtype))
        return Loaded(path.stem, graph)
    name, spec = _resolve_spec(args)
    if seq is not None:
        spec = spec.with_(seq=seq)
    return Loaded(name, build_variant(spec), constant_inputs(spec), spec)


def _tiles(args) -> TileConfig:
    sizes = {}
    for item in args.tile or []:
        dim, sep, size = item.partition("=")
        if not sep or not size.strip().isdigit() or int(size) < 1:
            raise UsageError(f"bad --tile {item!r}; expected dim=size with size >= 1")
        sizes[dim.strip()] = int(size)
    return TileConfig(sizes)


def _options(args) -> FusionOptions:
    return FusionOptions(semantic=not args.no_semantic, structural=not args.no_structural, tiled=not args.no_tiled)


def _schedule(args, loaded: Loaded) -> KernelSchedule:
    tiles = _tiles(args)
    unknown = set(tiles.sizes) - set(loaded.graph.dims)
    if unknown:
        raise UsageError(f"--tile names unknown dims: {sorted(unknown)}")
    try:
        return schedule(loaded.graph, SOFTMAX, tiles, _options(args))
    except GridError as exc:
        raise UsageError(str(exc)) from None


def _config(args) -> ExecConfig:
    return ExecConfig(trace=bool(getattr(args, "trace", False)), inject_fault=bool(getattr(args, "inject_bug", False)))


def _out(args, human: str, data) -> None:
    sys.stdout.write(emit_json(data) if args.format == "json" else human)


# -- commands -----------------------------------------------------------------

def cmd_compile(args) -> int:
    loaded = load(args)
    sched = _schedule(args, loaded)
    _out(args, plan_text(sched), {"graph": loaded.name, "plan": sched.to_dict()})
    return EXIT_OK


def cmd_run(args) -> int:
    loaded = load(args)
    sched = _schedule(args, loaded)
    bindings = random_bindings(loaded.graph, args.seed, loaded.constants)
    res = execute(sched, bindings, _config(args))
    outs = {
        k: {"shape": list(v.shape), "sum": float(v.sum()), "max_abs": float(np.abs(v).max(initial=0.0))}
        for k, v in res.outputs.items()
    }
    data = {"graph": loaded.name, "seed": args.seed, "outputs": outs, "traffic": res.report.to_dict()}
    human = [f"{loaded.name} seed={args.seed}"]
    human += [f"  {k}: shape {o['shape']} sum {o['sum']:.12g} max|x| {o['max_abs']:.6g}" for k, o in outs.items()]
    human.append(traffic_text(res.report, "fused").rstrip())
    if args.emit_plan:
        data["plan"] = sched.to_dict()
        human.append(plan_text(sched).rstrip())
    if res.trace is not None:
        data["trace"] = res.trace.lines()
        human += res.trace.lines()
    _out(args, "\n".join(human) + "\n", data)
    return EXIT_OK


def online_suite(seed: int = 0, count: int = 200, max_len: int = 512) -> dict:
    """Online vs two-pass reduction on random and adversarial vectors."""
    rng = np.random.default_rng(seed)
    vecs = [rng.uniform(-10, 10, rng.integers(1, max_len + 1)) for _ in range(count)]
    vecs += [np.zeros(7), np.arange(1.0, 11.0), np.array([3.0, 1.0, 3.0, -2.0]), np.array([4.2])]
    worst = {"max": 0.0, "sum": 0.0}
    for x in vecs:
        ms, ds = run_stable(x)
        mo, do = run_online(x)
        worst["max"] = max(worst["max"], compare(mo, ms)[1])
        worst["sum"] = max(worst["sum"], compare(do, ds)[1])
    return {"vectors": len(vecs), "worst_rel": worst, "passed": max(worst.values()) <= 1e-12}


def cmd_verify(args) -> int:
    loaded = load(args)
    sched = _schedule(args, loaded)
    dtypes = {r.dtype for n in loaded.graph.nodes for r in n.outputs}
    tol = TOLERANCE[DType.F32 if DType.F32 in dtypes else DType.F64]
    cfg = _config(args)
    rows, failures = [], []
    for seed in range(args.seed, args.seed + args.seeds):
        bindings = random_bindings(loaded.graph, seed, loaded.constants)
        fused = execute(sched, bindings, cfg).outputs
        ref = eval_naive(loaded.graph, bindings)
        for name in sorted(ref):
            abs_err, rel_err = compare(fused[name], ref[name])
            norm = normwise_error(fused[name], ref[name])
            ok = norm <= tol
            rows.append({"seed": seed, "output": name, "max_abs": abs_err, "max_rel": rel_err, "norm_rel": norm, "passed": ok})
            if not ok:
                failures.append(f"{loaded.name} seed={seed} output={name} norm_rel={norm:.3e} > {tol:g}")
    data = {"graph": loaded.name, "tolerance": tol, "kernels": len(sched), "results": rows}
    if any(p.kind is FusionKind.SEMANTIC for p in sched.plans):
        alg = check_algebra(SOFTMAX, DEFAULT_SAMPLES)
        suite = online_suite()
        data["algebra"] = alg.to_dict()
        data["online_suite"] = suite
        if not alg.ok:
            failures.append(f"{loaded.name}: algebra axioms failed")
        if not suite["passed"]:
            failures.append(f"{loaded.name}: online and two-pass reductions disagree")
    data["passed"] = not failures
    data["failures"] = failures
    human = [f"{loaded.name}: {len(sched)} kernel(s), tolerance {tol:g}"]
    for r in rows:
        human.append(f"  seed {r['seed']} {r['output']}: norm_rel {r['norm_rel']:.3e} max_rel {r['max_rel']:.3e} "
                     f"{'ok' if r['passed'] else 'FAIL'}")
    if "algebra" in data:
        human.append(f"  algebra axioms: {'ok' if data['algebra']['ok'] else 'FAIL'}")
        human.append(f"  online vs two-pass ({data['online_suite']['vectors']} vectors): "
                     f"{'ok' if data['online_suite']['passed'] else 'FAIL'}")
    human += [f"FAIL {f}" for f in failures]
    human.append("PASS" if not failures else "FAIL")
    _out(args, "\n".join(human) + "\n", data)
    return EXIT_OK if not failures else EXIT_FAIL


def _stats_for(args, loaded: Loaded) -> dict:
    sched = _schedule(args, loaded)
    bindings = random_bindings(loaded.graph, args.seed, loaded.constants)
    fused = execute(sched, bindings, _config(args)).report
    _, unfused = execute_unfused(loaded.graph, bindings)
    dims = {r.name: r.dims for n in loaded.graph.nodes for r in n.outputs}
    entry = {}
    for tag, rep in (("fused", fused), ("unfused", unfused)):
        d = rep.to_dict()
        d["total_traffic"] = rep.total_traffic
        d["score_elements"] = score_elements(rep, dims)
        entry[tag] = d
    entry["ratios"] = {
        "traffic": unfused.total_traffic / fused.total_traffic if fused.total_traffic else None,
        "kernels": unfused.kernel_count / fused.kernel_count if fused.kernel_count else None,
    }
    return entry


def _parse_sweep(text: str) -> list[int]:
    key, sep, vals = text.partition("=")
    if key.strip() != "n" or not sep:
        raise UsageError(f"bad --sweep {text!r}; expected n=256,512,...")
    try:
        ns = [int(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --sweep {text!r}") from None
    if not ns or min(ns) < 1:
        raise UsageError(f"bad --sweep {text!r}")
    return ns


def cmd_stats(args) -> int:
    if args.sweep:
        if not args.variant:
            raise UsageError("--sweep needs --variant")
        rows = []
        for n in _parse_sweep(args.sweep):
            loaded = load(args, seq=n)
            rows.append({"n": n, **_stats_for(args, loaded)})
        _out(args, sweep_text(rows), {"graph": args.variant, "sweep": rows})
        return EXIT_OK
    loaded = load(args)
    entry = _stats_for(args, loaded)
    human = traffic_text(_report(entry["fused"]), "fused") + traffic_text(_report(entry["unfused"]), "unfused")
    r = entry["ratios"]
    if r["traffic"] is not None:
        human += f"traffic ratio (unfused/fused): {r['traffic']:.3f}\n"
    _out(args, human, {"graph": loaded.name, **entry})
    return EXIT_OK


def _report(d: dict):
    from .executor import TrafficReport

    return TrafficReport.from_dict({k: v for k, v in d.items() if k not in ("total_traffic", "score_elements")})


def cmd_corpus(args) -> int:
    entries = corpus()
    data = [{"name": n, "variant": s.variant, "seq": s.seq, "heads": s.heads, "kv_heads": s.kv_heads,
             "head_dim": s.head_dim} for n, s in entries]
    human = "".join(
        f"{d['name']:<28} {d['variant']:<15} n={d['seq']:<5} heads={d['heads']}"
        + (f" kv_heads={d['kv_heads']}" if d["kv_heads"] else "") + "\n"
        for d in data
    )
    _out(args, human, {"corpus": data})
    return EXIT_OK


COMMANDS = {"compile": cmd_compile, "run": cmd_run, "verify": cmd_verify, "stats": cmd_stats, "corpus": cmd_corpus}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("human", "json"), default="human")
    src = argparse.ArgumentParser(add_help=False)
    src.add_argument("--variant", help="corpus entry (see `corpus`) or bare variant id")
    src.add_argument("--input", help="program in the text format")
    src.add_argument("--seq", type=int, help="sequence length override for variants")
    src.add_argument("--heads", type=int)
    src.add_argument("--kv-heads", type=int, dest="kv_heads")
    src.add_argument("--batch", type=int)
    src.add_argument("--head-dim", type=int, dest="head_dim")
    src.add_argument("--dtype", choices=("f32", "f64"))
    src.add_argument("--tile", action="append", metavar="DIM=SIZE", help="tile size hint (repeatable)")
    src.add_argument("--seed", type=int, default=0)
    src.add_argument("--no-semantic", action="store_true")
    src.add_argument("--no-structural", action="store_true")
    src.add_argument("--no-tiled", action="store_true")
    src.add_argument("--emit-plan", action="store_true")
    src.add_argument("--trace", action="store_true")
    src.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="sketchfuse", description="Fusion compiler for tensor programs.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("compile", parents=[common, src], help="print the kernel plan")
    sub.add_parser("run", parents=[common, src], help="execute the fused plan once")
    v = sub.add_parser("verify", parents=[common, src], help="fused vs reference over several seeds")
    v.add_argument("--seeds", type=int, default=3)
    s = sub.add_parser("stats", parents=[common, src], help="traffic of fused and unfused execution")
    s.add_argument("--sweep", help="n=256,512,1024")
    sub.add_parser("corpus", parents=[common], help="list the benchmark corpus")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IRError, EvaluationError, ExecutionError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
