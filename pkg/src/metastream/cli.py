"""``metastream`` command line: run, compile, validate and bench pipelines.

Exit codes: 0 ok, 1 user error (bad expression, invalid DAG, bad flag),
2 stream error (the stream itself failed).
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from . import bench
from .graph import CompositionError, dump, validate
from .metac import CompileError, compile_dag, emit_instructions, structural_behavior
from .metar import behavior_named
from .pipeline import ParseError, lower, parse_pipeline
from .protocol import Error
from .runtime import DEFAULT_MAX_MESSAGES, DeploymentError, deploy

OK, USER_ERROR, STREAM_ERROR = 0, 1, 2

log = logging.getLogger("metastream")


class UserError(Exception):
    pass


def _lowered(args):
    try:
        low = lower(parse_pipeline(args.expr))
    except (ParseError, CompositionError) as e:
        raise UserError(str(e)) from None
    try:
        meta = structural_behavior(args.structural)
    except ValueError as e:
        raise UserError(str(e)) from None
    problems = validate(low.dag)
    if problems:
        raise UserError("invalid pipeline:\n" + "\n".join(f"  {v}" for v in problems))
    try:
        low.dag = compile_dag(low.dag, meta)
    except CompileError as e:
        raise UserError(str(e)) from None
    return low


def cmd_validate(args) -> int:
    try:
        low = lower(parse_pipeline(args.expr))
    except (ParseError, CompositionError) as e:
        raise UserError(str(e)) from None
    problems = validate(low.dag)
    if problems:
        for v in problems:
            print(f"constraint {v.constraint}: {v.message}")
        return USER_ERROR
    print("ok")
    return OK


def cmd_compile(args) -> int:
    if not args.dag_only:
        try:
            source = lower(parse_pipeline(args.expr)).dag
        except (ParseError, CompositionError) as e:
            raise UserError(str(e)) from None
        for instr in emit_instructions(source):
            print(instr)
        print()
    low = _lowered(args)
    sys.stdout.write(dump(low.dag))
    return OK


def cmd_run(args) -> int:
    low = _lowered(args)
    try:
        behavior = behavior_named(args.behavior, log_sink=lambda rec: print(*rec, file=sys.stderr))
    except ValueError as e:
        raise UserError(str(e)) from None
    trace_file = open(args.trace, "w") if args.trace else None
    try:
        handle = deploy(
            low.dag,
            low.bindings,
            behavior,
            deterministic=args.deterministic,
            seed=args.seed,
            trace=(lambda rec: trace_file.write(f"{rec}\n")) if trace_file else False,
            max_messages=args.max_messages,
        )
        outcomes = handle.results()
        handle.wait()
    except DeploymentError as e:
        raise UserError(str(e)) from None
    finally:
        if trace_file:
            trace_file.close()
    status = OK
    for label in low.sink_labels:
        outcome = outcomes[label]
        prefix = f"{label}: " if len(low.sink_labels) > 1 else ""
        if isinstance(outcome, Error):
            print(f"{prefix}error: {outcome.error}", file=sys.stderr)
            status = STREAM_ERROR
        elif outcome.value is not None:
            print(f"{prefix}{outcome.value}")
    return status


def cmd_bench(args) -> int:
    try:
        if args.mode == "dagsize":
            ops = bench.parse_sweep(args.ops or ("0..2000" if args.full else "0..500"), args.points)
            values = bench.parse_sweep(args.values or "1000", args.points)
        else:
            ops = bench.parse_sweep(args.ops or "250", args.points)
            values = bench.parse_sweep(args.values or "0..10000", args.points)
        variants = [v.strip() for v in args.variants.split(",")]
    except ValueError as e:
        raise UserError(f"bad sweep: {e}") from None

    def progress(row):
        print(f"{row.mode} ops={row.ops} values={row.values} {row.variant}: "
              f"{row.elapsed_ms:.1f} ms", file=sys.stderr)

    try:
        rows = bench.run_bench(
            args.mode, ops, values, variants=variants, behavior=args.behavior,
            reps=args.reps, deterministic=args.deterministic,
            progress=progress if args.verbose else None,
        )
    except ValueError as e:
        raise UserError(str(e)) from None
    if args.csv:
        with open(args.csv, "w") as f:
            bench.write_csv(rows, f)
    else:
        bench.write_csv(rows, sys.stdout)
    summary = bench.summarize(rows)
    for (mode, n_ops, n_values), ratio in summary["ratios"].items():
        print(f"ratio meta/fast ops={n_ops} values={n_values}: {ratio:.2f}", file=sys.stderr)
    for variant, r2 in summary["r2"].items():
        print(f"linear fit {variant}: R^2 = {r2:.4f}", file=sys.stderr)
    return OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metastream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def pipeline_args(p, structural=True, flags=("--structural",)):
        p.add_argument("expr", help="pipeline expression, e.g. 'range(1,10) ~> map(square) ~> collect'")
        if structural:
            p.add_argument(*flags, dest="structural", default="none",
                           help="none | fusion | timestamp | parallel:<n>[:tagged]")

    p = sub.add_parser("run", help="deploy a pipeline and print its result")
    pipeline_args(p)
    p.add_argument("--behavior", default="none",
                   help="none | identity | logging | pull | smartpull | encrypt:<hexkey>")
    p.add_argument("--trace", metavar="PATH", help="write one line per delivered message")
    p.add_argument("--deterministic", action="store_true", help="single-threaded scheduler")
    p.add_argument("--seed", type=int, help="shuffle ready units with this seed (deterministic mode)")
    p.add_argument("--max-messages", type=int, default=DEFAULT_MAX_MESSAGES)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compile", help="print the instruction sequence and the rewritten DAG")
    # only structural behaviors apply at compile time, so --behavior names one too
    pipeline_args(p, flags=("--structural", "--behavior"))
    p.add_argument("--dag-only", action="store_true", help="print only the rewritten DAG")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("validate", help="check a pipeline against the deployability constraints")
    pipeline_args(p, structural=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="time meta-enabled against meta-stripped deployments")
    p.add_argument("--mode", choices=("dagsize", "load"), default="load")
    p.add_argument("--ops", help="operator counts: N, a,b,c, a..b or a..b:step")
    p.add_argument("--values", help="value counts, same forms as --ops")
    p.add_argument("--points", type=int, default=6, help="points for an a..b sweep (default 6)")
    p.add_argument("--full", action="store_true", help="dagsize sweep up to 2000 operators")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--variants", default="meta,fast")
    p.add_argument("--behavior", default="identity", help="behavior of the meta variant")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--csv", metavar="PATH", help="write rows here instead of stdout")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None and not args.deterministic:
        parser.error("--seed needs --deterministic")
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
