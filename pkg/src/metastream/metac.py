"""Compile-time meta protocol: DAG construction as a rewritable stream.

A DAG is reified as a sequence of instructions (:class:`AddOperator`,
:class:`NameIt`, :class:`AddEdge`). Each instruction is paired with the
partial DAG built so far and an alias environment, and the resulting
:class:`MetaItem` is pushed through a user supplied meta DAG. Whatever the
meta DAG emits is applied, and the finished DAG is validated again.

Meta stages may rewrite the instruction, expand it into a tuple of
instructions, drop it, or perform surgery on the carried DAG with the
primitives below (:func:`fetch`, :func:`fuse`, :func:`add`, ...).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Union

from . import counters
from .engine import InlineStream
from .graph import (
    Dag,
    Edge,
    OperatorSpec,
    SocketSpec,
    Violation,
    dup,
    filter_,
    fresh_id,
    map_,
    merge,
    parallel,
    sink_socket,
    source_socket,
    topological_order,
    validate,
)

# -- instructions ----------------------------------------------------------------


@dataclass(frozen=True)
class AddOperator:
    spec: OperatorSpec | SocketSpec

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def argument(self) -> Any:
        return self.spec.argument

    def __str__(self):
        return f"operator {self.kind}" + (f" {self.spec.alias}" if self.spec.alias else "")


@dataclass(frozen=True)
class NameIt:
    alias: str

    def __str__(self):
        return f"name_it {self.alias}"


NodeName = Union[str, int]


@dataclass(frozen=True)
class AddEdge:
    src: NodeName
    src_port: int
    dst: NodeName
    dst_port: int

    def __str__(self):
        return f"edge {self.src} {self.src_port} {self.dst} {self.dst_port}"


Instruction = Union[AddOperator, NameIt, AddEdge]


class CompileError(ValueError):
    def __init__(self, message: str, violations: list[Violation] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class Env:
    """Alias bindings plus the node added by the latest AddOperator."""

    aliases: Mapping[str, int] = field(default_factory=dict)
    last: int | None = None

    def bind(self, alias: str, ref: int) -> Env:
        return replace(self, aliases={**self.aliases, alias: ref})

    def redirect(self, old_refs: Iterable[int], new_ref: int) -> Env:
        old = set(old_refs)
        aliases = {a: (new_ref if r in old else r) for a, r in self.aliases.items()}
        last = new_ref if self.last in old else self.last
        return Env(aliases, last)


@dataclass(frozen=True)
class MetaItem:
    """An instruction (or a tuple of them) with the DAG and environment it applies to."""

    instr: Instruction | tuple
    dag: Dag
    env: Env = field(default_factory=Env)

    def __post_init__(self):
        counters.bump("meta_items")

    def instructions(self) -> tuple:
        return self.instr if isinstance(self.instr, tuple) else (self.instr,)


class ReifiedOperator(NamedTuple):
    ref: int
    name: str
    argument: Any
    spec: OperatorSpec | SocketSpec
    port: int | None = None  # set by inputs(): the output port feeding the queried node


# -- reification --------------------------------------------------------------------


def emit_instructions(d: Dag) -> list[Instruction]:
    """Operators in topological order, then edges ordered by their source."""
    order = topological_order(d)
    position = {n: i for i, n in enumerate(order)}
    touched = {e.src.node for e in d.edges} | {e.dst.node for e in d.edges}
    names: dict[int, str] = {}
    out: list[Instruction] = []
    for i, nid in enumerate(order):
        spec = d.nodes[nid]
        out.append(AddOperator(spec))
        if nid in touched:
            names[nid] = spec.label if isinstance(spec, SocketSpec) else f"{spec.alias or spec.kind}_{i}"
            out.append(NameIt(names[nid]))
    for e in sorted(d.edges, key=lambda e: (position[e.src.node], e.src.index)):
        out.append(AddEdge(names[e.src.node], e.src.index, names[e.dst.node], e.dst.index))
    return out


def _resolve(dag: Dag, name, env: Env | None) -> int:
    if isinstance(name, ReifiedOperator):
        name = name.ref
    if isinstance(name, str):
        if env is None or name not in env.aliases:
            raise CompileError(f"unbound alias {name!r}")
        name = env.aliases[name]
    if name not in dag.nodes:
        raise CompileError(f"no node {name!r} in the DAG")
    return name


def _apply(instr: Instruction, dag: Dag, env: Env) -> tuple[Dag, Env]:
    if isinstance(instr, AddOperator):
        ref = fresh_id()
        return Dag({**dag.nodes, ref: instr.spec}, dag.edges), replace(env, last=ref)
    if isinstance(instr, NameIt):
        if env.last is None or env.last not in dag.nodes:
            raise CompileError(f"name_it {instr.alias!r} without a preceding operator")
        # a later binding shadows an earlier one
        return dag, env.bind(instr.alias, env.last)
    if isinstance(instr, AddEdge):
        src = _resolve(dag, instr.src, env)
        dst = _resolve(dag, instr.dst, env)
        return connect(dag, src, instr.src_port, dst, instr.dst_port), env
    raise CompileError(f"not an instruction: {instr!r}")


def apply_instruction(item: MetaItem) -> MetaItem:
    dag, env = item.dag, item.env
    for instr in item.instructions():
        dag, env = _apply(instr, dag, env)
    return MetaItem((), dag, env)


def replay(instrs: Iterable[Instruction]) -> Dag:
    """Apply instructions directly, without any meta program."""
    dag, env = Dag(), Env()
    for instr in instrs:
        dag, env = _apply(instr, dag, env)
    return dag


def run_compile(instrs: Iterable[Instruction], meta: Dag) -> Dag:
    """Stream every instruction through ``meta`` and build the resulting DAG.

    Each emitted item is applied in order. An item that still carries the
    DAG it was handed is applied to the running DAG, so a stage may emit
    several items for one instruction.
    """
    stream = InlineStream(meta)
    dag, env = Dag(), Env()
    for instr in instrs:
        item = MetaItem(instr, dag, env)
        for out in stream.push(item):
            if not isinstance(out, MetaItem):
                raise CompileError(f"meta DAG emitted {out!r}, expected a MetaItem")
            base_dag, base_env = (dag, env) if out.dag is item.dag else (out.dag, out.env)
            if out.dag is item.dag and out.env is not item.env:
                base_env = out.env
            for i in out.instructions():
                base_dag, base_env = _apply(i, base_dag, base_env)
            dag, env = base_dag, base_env
    problems = validate(dag)
    if problems:
        raise CompileError(
            "meta program produced an invalid DAG: " + "; ".join(map(str, problems)), problems
        )
    return dag


def compile_dag(d: Dag, meta: Dag | None = None) -> Dag:
    """Compile ``d``; without a meta program the DAG is returned untouched."""
    if meta is None:
        return d
    return run_compile(emit_instructions(d), meta)


# -- primitives ------------------------------------------------------------------------


def _reify(dag: Dag, ref: int, port=None) -> ReifiedOperator:
    spec = dag.nodes[ref]
    return ReifiedOperator(ref, spec.kind, spec.argument, spec, port)


def fetch(dag: Dag, name, env: Env | None = None) -> ReifiedOperator:
    """The operator bound to an alias (needs ``env``) or a raw node reference."""
    return _reify(dag, _resolve(dag, name, env))


def inputs(dag: Dag, op) -> list[ReifiedOperator]:
    ref = _resolve(dag, op, None)
    return [_reify(dag, e.src.node, e.src.index) for e in dag.in_edges(ref)]


def add(dag: Dag, op: ReifiedOperator) -> Dag:
    if op.ref in dag.nodes:
        raise CompileError(f"node {op.ref} already present")
    return Dag({**dag.nodes, op.ref: op.spec}, dag.edges)


def delete(dag: Dag, op) -> Dag:
    """Remove a node together with every edge touching it."""
    ref = _resolve(dag, op, None)
    nodes = {n: s for n, s in dag.nodes.items() if n != ref}
    edges = frozenset(e for e in dag.edges if e.src.node != ref and e.dst.node != ref)
    return Dag(nodes, edges)


def connect(dag: Dag, src, src_port: int, dst, dst_port: int) -> Dag:
    s = _resolve(dag, src, None)
    d = _resolve(dag, dst, None)
    if not 0 <= src_port < dag.nodes[s].out_arity:
        raise CompileError(f"node {s} has no output port {src_port}")
    if not 0 <= dst_port < dag.nodes[d].in_arity:
        raise CompileError(f"node {d} has no input port {dst_port}")
    edge = Edge.of(s, src_port, d, dst_port)
    for e in dag.edges:
        if e.src == edge.src or e.dst == edge.dst:
            raise CompileError(f"port already connected by {e}")
    return Dag(dag.nodes, dag.edges | {edge})


def disconnect(dag: Dag, src, src_port: int, dst, dst_port: int) -> Dag:
    edge = Edge.of(_resolve(dag, src, None), src_port, _resolve(dag, dst, None), dst_port)
    if edge not in dag.edges:
        raise CompileError(f"no edge {edge}")
    return Dag(dag.nodes, dag.edges - {edge})


def swap(dag: Dag, a, b) -> Dag:
    """Exchange two operators while keeping every connection in place."""
    ra, rb = _resolve(dag, a, None), _resolve(dag, b, None)
    sa, sb = dag.nodes[ra], dag.nodes[rb]
    if (sa.in_arity, sa.out_arity) != (sb.in_arity, sb.out_arity):
        raise CompileError(f"cannot swap {sa.kind} and {sb.kind}: port counts differ")
    nodes = dict(dag.nodes)
    nodes[ra], nodes[rb] = sb, sa
    return Dag(nodes, dag.edges)


FUSABLE = frozenset({"map", "filter", "fused"})


def _steps(op: ReifiedOperator) -> tuple:
    return op.argument if op.name == "fused" else ((op.name, op.argument),)


def _compose(f, g):
    def fused(v):
        return g(f(v))

    return fused


def _both(p, q):
    def fused(v):
        return p(v) and q(v)

    return fused


def fuse(a: ReifiedOperator, b: ReifiedOperator) -> ReifiedOperator:
    """A fresh, not yet inserted operator doing ``a`` then ``b``."""
    if a.name not in FUSABLE or b.name not in FUSABLE:
        raise CompileError(f"cannot fuse {a.name} with {b.name}")
    alias = f"fused({a.spec.alias or a.name},{b.spec.alias or b.name})"
    if a.name == b.name == "map":
        spec = OperatorSpec("map", _compose(a.argument, b.argument), alias)
    elif a.name == b.name == "filter":
        spec = OperatorSpec("filter", _both(a.argument, b.argument), alias)
    else:
        spec = OperatorSpec("fused", _steps(a) + _steps(b), alias)
    ref = fresh_id()
    return ReifiedOperator(ref, spec.kind, spec.argument, spec)


# -- building meta DAGs -------------------------------------------------------------------


def proceed() -> Dag:
    """Open stage that applies each item's instructions to its DAG."""
    return map_(apply_instruction, alias="proceed")


def branching_meta(*branches: Dag) -> Dag:
    """``src ~> dup(k) ~> (b1 ||| ... ||| bk) ~> merge(k) ~> proceed ~> snk``."""
    k = len(branches)
    return (
        source_socket("src")
        >> dup(k)
        >> parallel(branches)
        >> merge(k)
        >> proceed()
        >> sink_socket("snk")
    )


def proceed_meta() -> Dag:
    return source_socket("src") >> proceed() >> sink_socket("snk")


def _is(kind):
    def test(item):
        return isinstance(item.instr, kind)

    test.__name__ = f"is_{kind.__name__}"
    return test


def fusion_meta(pairs: Iterable[tuple[str, str]] | None = None) -> Dag:
    """Fuse consecutive single-input operators (map/filter by default)."""
    allowed = None if pairs is None else frozenset(pairs)

    def fusable(a, b):
        if allowed is None:
            return a.name in FUSABLE and b.name in FUSABLE
        return (a.name, b.name) in allowed

    def rewrite(item: MetaItem) -> MetaItem:
        e = item.instr
        dag, env = item.dag, item.env
        a = fetch(dag, e.src, env)
        b = fetch(dag, e.dst, env)
        if not fusable(a, b):
            return item
        upstream = inputs(dag, a)
        if len(upstream) != 1:
            return item
        x = upstream[0]
        c = fuse(a, b)
        dag = add(delete(delete(dag, a), b), c)
        # later edges naming a or b now mean c
        env = env.redirect((a.ref, b.ref), c.ref)
        return MetaItem(AddEdge(x.ref, x.port, c.ref, 0), dag, env)

    return branching_meta(
        filter_(_is(AddEdge)) >> map_(rewrite, alias="fuse_edge"),
        filter_(_is(AddOperator)),
        filter_(_is(NameIt)),
    )


def parallel_meta(n: int, only_tagged: bool = False) -> Dag:
    """Replace map operators by ``balance(n) ~> n x map ~> merge(n)``.

    With ``only_tagged`` only maps carrying the ``"parallel"`` tag are
    rewritten. Output order is not preserved.
    """
    if n <= 0:
        raise ValueError("parallelism must be positive")

    def selected(op: ReifiedOperator) -> bool:
        if op.name != "map":
            return False
        return not only_tagged or "parallel" in op.spec.tags

    def rewrite(item: MetaItem) -> MetaItem:
        e = item.instr
        dag, env = item.dag, item.env
        m = fetch(dag, e.dst, env)
        if not selected(m):
            return item
        bal = OperatorSpec("balance", n, f"balance({m.spec.alias or 'map'})")
        mer = OperatorSpec("merge", n, f"merge({m.spec.alias or 'map'})")
        b_ref, g_ref = fresh_id(), fresh_id()
        dag = delete(dag, m)
        dag = add(dag, ReifiedOperator(b_ref, "balance", n, bal))
        dag = add(dag, ReifiedOperator(g_ref, "merge", n, mer))
        for k in range(n):
            copy = ReifiedOperator(fresh_id(), "map", m.argument, m.spec)
            dag = add(dag, copy)
            dag = connect(dag, b_ref, k, copy.ref, 0)
            dag = connect(dag, copy.ref, 0, g_ref, k)
        # the map's outgoing edges come later and must leave from the merge
        env = env.redirect((m.ref,), g_ref)
        return MetaItem(AddEdge(e.src, e.src_port, b_ref, 0), dag, env)

    return branching_meta(
        filter_(_is(AddEdge)) >> map_(rewrite, alias="parallelize"),
        filter_(_is(AddOperator)),
        filter_(_is(NameIt)),
    )


class Box(NamedTuple):
    payload: Any
    stamps: tuple = ()


def unbox(v):
    if isinstance(v, Box):
        return unbox(v.payload)
    if isinstance(v, tuple) and type(v) is tuple:
        return tuple(unbox(x) for x in v)
    return v


def _stamper(ref: int, clock: Callable[[], int]):
    def stamp(v):
        mark = ((ref, clock()),)
        if isinstance(v, Box):
            return Box(v.payload, v.stamps + mark)
        if type(v) is tuple and v and all(isinstance(x, Box) for x in v):
            stamps = tuple(s for x in v for s in x.stamps)
            return Box(tuple(x.payload for x in v), stamps + mark)
        return Box(v, mark)

    stamp.__name__ = f"stamp_{ref}"
    return stamp


def _boxed_steps(steps):
    out = []
    for kind, fn in steps:
        out.append((kind, _unboxed_pred(fn) if kind == "filter" else fn))
    return tuple(out)


def _boxed_map(f):
    def boxed(b):
        return Box(f(b.payload), b.stamps)

    return boxed


def _unboxed_pred(p):
    def unboxed(b):
        return p(b.payload)

    return unboxed


def _boxed_scan(f):
    def boxed(acc, b):
        return Box(f(acc.payload, b.payload), b.stamps)

    return boxed


def wrap_for_boxes(spec: OperatorSpec) -> OperatorSpec:
    """Make an operator's function argument work on :class:`Box` values."""
    if spec.kind == "map":
        arg = _boxed_map(spec.argument)
    elif spec.kind == "filter":
        arg = _unboxed_pred(spec.argument)
    elif spec.kind == "scan":
        f, acc = spec.argument
        arg = (_boxed_scan(f), Box(acc, ()))
    elif spec.kind == "fused":
        steps = []
        for kind, fn in spec.argument:
            steps.append((kind, _boxed_map(fn) if kind == "map" else _unboxed_pred(fn)))
        arg = tuple(steps)
    else:
        return spec
    return OperatorSpec(spec.kind, arg, spec.alias, spec.tags)


def timestamp_meta(clock: Callable[[], int] = time.perf_counter_ns) -> Dag:
    """Box every value with the list of operators it passed and when.

    A stamping map is placed in front of each input port of every operator,
    and function arguments are wrapped to see through the box.
    """

    def wrap_operator(item: MetaItem) -> MetaItem:
        spec = item.instr.spec
        if isinstance(spec, SocketSpec):
            return item
        return MetaItem(AddOperator(wrap_for_boxes(spec)), item.dag, item.env)

    def stamp_edge(item: MetaItem) -> MetaItem:
        e = item.instr
        dag, env = item.dag, item.env
        target = fetch(dag, e.dst, env)
        if isinstance(target.spec, SocketSpec):
            return item
        s = fresh_id()
        spec = OperatorSpec("map", _stamper(target.ref, clock), f"stamp({target.spec.alias or target.name})")
        dag = add(dag, ReifiedOperator(s, "map", spec.argument, spec))
        return MetaItem((AddEdge(e.src, e.src_port, s, 0), AddEdge(s, 0, e.dst, e.dst_port)), dag, env)

    return branching_meta(
        filter_(_is(AddEdge)) >> map_(stamp_edge, alias="stamp_edge"),
        filter_(_is(AddOperator)) >> map_(wrap_operator, alias="wrap_operator"),
        filter_(_is(NameIt)),
    )


STRUCTURAL = {
    "none": lambda: None,
    "fusion": fusion_meta,
    "timestamp": timestamp_meta,
}


def structural_behavior(name: str) -> Dag | None:
    """Look up a structural behavior: ``none``, ``fusion``, ``timestamp`` or ``parallel:<n>``."""
    if name.startswith("parallel:"):
        parts = name.split(":")
        return parallel_meta(int(parts[1]), only_tagged=len(parts) > 2 and parts[2] == "tagged")
    try:
        return STRUCTURAL[name]()
    except KeyError:
        raise ValueError(f"unknown structural behavior {name!r}") from None
