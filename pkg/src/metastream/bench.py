"""Benchmark harness: meta-enabled runtime against the meta-stripped one.

Two sweeps over a chain of pass-through ``map(identity)`` operators:

* ``dagsize``: the number of operators varies, the value count is fixed;
* ``load``: the chain has a fixed length, the value count varies.

Every cell runs ``reps`` times per variant and reports the median. The
repetitions are interleaved across cells.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import astuple, dataclass
from typing import Callable, Iterable, TextIO

from .graph import Dag, map_, sink_socket, source_socket
from .metar import behavior_named
from .operators import FUNCTIONS, collect_all, range_source
from .runtime import deploy

CSV_HEADER = "mode,ops,values,variant,behavior,rep,elapsed_ms"
VARIANTS = ("meta", "fast")


@dataclass(frozen=True)
class BenchRow:
    """One cell and variant; ``elapsed_ms`` is the median over ``rep`` runs."""

    mode: str
    ops: int
    values: int
    variant: str
    behavior: str
    rep: int
    elapsed_ms: float


def chain(ops: int) -> Dag:
    """``src ~> map(identity) x ops ~> out``; ``ops = 0`` wires source to sink."""
    d = source_socket("src")
    identity = FUNCTIONS["identity"]
    for _ in range(ops):
        d = d >> map_(identity)
    return d >> sink_socket("out")


def time_once(d: Dag, values: int, behavior, deterministic: bool) -> float:
    """Milliseconds from deployment until the sink's outcome is available."""
    bindings = {"src": range_source(1, values), "out": collect_all()}
    start = time.perf_counter()
    handle = deploy(d, bindings, behavior, deterministic=deterministic)
    out = handle.result()
    elapsed = time.perf_counter() - start
    if len(out) != values:
        raise RuntimeError(f"benchmark stream lost values: {len(out)} of {values}")
    return elapsed * 1000.0


def parse_sweep(text: str, points: int) -> list[int]:
    """``"250"``, ``"1,5,9"``, ``"0..10000"`` (``points`` evenly spaced) or ``"0..10000:2000"``."""
    text = text.strip()
    if ".." in text:
        lo_s, _, rest = text.partition("..")
        hi_s, _, step_s = rest.partition(":")
        lo, hi = int(lo_s), int(hi_s)
        if hi < lo:
            raise ValueError(f"empty sweep {text!r}")
        if step_s:
            step = int(step_s)
            if step <= 0:
                raise ValueError("sweep step must be positive")
            return list(range(lo, hi + 1, step))
        if points < 2 or hi == lo:
            return [lo] if hi == lo else [lo, hi]
        return sorted({round(lo + (hi - lo) * k / (points - 1)) for k in range(points)})
    return [int(x) for x in text.split(",") if x.strip()]


def run_bench(
    mode: str,
    ops: Iterable[int],
    values: Iterable[int],
    *,
    variants: Iterable[str] = VARIANTS,
    behavior: str = "identity",
    reps: int = 5,
    deterministic: bool = False,
    progress: Callable[[BenchRow], None] | None = None,
) -> list[BenchRow]:
    if reps < 1:
        raise ValueError("reps must be positive")
    variants = list(variants)
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variant(s) {sorted(unknown)}")
    meta = behavior_named(behavior)
    if meta is None:
        raise ValueError("the meta variant needs a behavior other than 'none'")
    cells = [(n_ops, n_values, variant) for n_ops in ops for n_values in values for variant in variants]
    dags = {n_ops: chain(n_ops) for n_ops in {c[0] for c in cells}}
    samples: dict[tuple, list[float]] = {c: [] for c in cells}
    # one pass over every cell per repetition, so drift in machine speed
    # spreads over all cells instead of bending a few of them
    for _ in range(reps):
        for cell in cells:
            n_ops, n_values, variant = cell
            b = meta if variant == "meta" else None
            samples[cell].append(time_once(dags[n_ops], n_values, b, deterministic))
    rows = []
    for cell in cells:
        n_ops, n_values, variant = cell
        row = BenchRow(mode, n_ops, n_values, variant, behavior if variant == "meta" else "none",
                       reps, statistics.median(samples[cell]))
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_csv(rows: Iterable[BenchRow], out: TextIO) -> None:
    out.write(CSV_HEADER + "\n")
    w = csv.writer(out, lineterminator="\n")
    for r in rows:
        w.writerow(astuple(r)[:-1] + (f"{r.elapsed_ms:.3f}",))


def read_csv(src: TextIO) -> list[BenchRow]:
    header = src.readline().strip()
    if header != CSV_HEADER:
        raise ValueError(f"unexpected header {header!r}")
    rows = []
    for rec in csv.reader(src):
        mode, ops, values, variant, behavior, rep, ms = rec
        rows.append(BenchRow(mode, int(ops), int(values), variant, behavior, int(rep), float(ms)))
    return rows


def r_squared(xs: list[float], ys: list[float]) -> float:
    """Coefficient of determination of the least-squares line through the points."""
    if len(set(ys)) == 1:
        return 1.0
    return statistics.correlation(xs, ys) ** 2


def summarize(rows: list[BenchRow]) -> dict:
    """Per-cell meta/fast ratio and, per variant, R² of elapsed against the swept axis."""
    cells: dict[tuple, dict[str, float]] = {}
    for r in rows:
        cells.setdefault((r.mode, r.ops, r.values), {})[r.variant] = r.elapsed_ms
    ratios = {
        key: v["meta"] / v["fast"]
        for key, v in cells.items()
        if "meta" in v and "fast" in v and v["fast"] > 0
    }
    fits = {}
    for variant in VARIANTS:
        mine = [r for r in rows if r.variant == variant]
        if not mine:
            continue
        axis = "values" if mine[0].mode == "load" else "ops"
        xs = [float(getattr(r, axis)) for r in mine]
        ys = [r.elapsed_ms for r in mine]
        if len(set(xs)) >= 2:
            fits[variant] = r_squared(xs, ys)
    return {"ratios": ratios, "r2": fits}
