"""DAG blueprints: operators, actor sockets, composition and validation.

A :class:`Dag` is an immutable value. The two composition functions
(``>>`` for vertical, ``|`` for horizontal) always rename every node with a
fresh identifier, so the same open DAG may appear several times inside a
larger one without its nodes being shared.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, NamedTuple, Union

__all__ = [
    "CompositionError",
    "Dag",
    "Edge",
    "OperatorSpec",
    "PortRef",
    "SocketSpec",
    "Violation",
    "balance",
    "close",
    "compose_horizontal",
    "compose_vertical",
    "dump",
    "dup",
    "filter_",
    "fresh_id",
    "map_",
    "merge",
    "scan",
    "single",
    "sink_socket",
    "source_socket",
    "topological_order",
    "validate",
    "zip_",
]

INPUT = "input"
OUTPUT = "output"
SOURCE_SOCKET = "source-socket"
SINK_SOCKET = "sink-socket"

_ids = itertools.count(1)


def fresh_id() -> int:
    return next(_ids)


class CompositionError(ValueError):
    """An operator, composition or closing request that cannot form a DAG."""


def arity_of(kind: str, argument: Any) -> tuple[int, int]:
    """Return ``(in_arity, out_arity)`` for an operator kind and its argument."""
    if kind in ("map", "filter", "scan", "fused"):
        return 1, 1
    if kind == "zip":
        return 2, 1
    if kind in ("dup", "balance", "merge"):
        if isinstance(argument, bool) or not isinstance(argument, int) or argument <= 0:
            raise CompositionError(f"{kind} needs a positive port count, got {argument!r}")
        return (1, argument) if kind != "merge" else (argument, 1)
    raise CompositionError(f"unknown operator kind {kind!r}")


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    argument: Any = None
    alias: str | None = None
    tags: frozenset = field(default=frozenset(), compare=False)
    in_arity: int = field(init=False)
    out_arity: int = field(init=False)

    def __post_init__(self):
        i, o = arity_of(self.kind, self.argument)
        object.__setattr__(self, "in_arity", i)
        object.__setattr__(self, "out_arity", o)

    def __eq__(self, other):
        # function arguments are opaque: equal only by identity
        if not isinstance(other, OperatorSpec):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.alias == other.alias
            and _same_argument(self.argument, other.argument)
        )

    def __hash__(self):
        return hash((self.kind, self.alias))


def _same_argument(a, b) -> bool:
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(a) == len(b) and all(_same_argument(x, y) for x, y in zip(a, b))
    if callable(a) or callable(b):
        return a is b
    return a == b


@dataclass(frozen=True)
class SocketSpec:
    label: str
    direction: str

    def __post_init__(self):
        if self.direction not in (SOURCE_SOCKET, SINK_SOCKET):
            raise CompositionError(f"bad socket direction {self.direction!r}")

    @property
    def kind(self) -> str:
        return self.direction

    @property
    def alias(self) -> str:
        return self.label

    @property
    def argument(self) -> str:
        return self.label

    @property
    def in_arity(self) -> int:
        return 1 if self.direction == SINK_SOCKET else 0

    @property
    def out_arity(self) -> int:
        return 1 if self.direction == SOURCE_SOCKET else 0


NodeSpec = Union[OperatorSpec, SocketSpec]


class PortRef(NamedTuple):
    node: int
    index: int
    direction: str


class Edge(NamedTuple):
    src: PortRef
    dst: PortRef

    @classmethod
    def of(cls, src: int, src_port: int, dst: int, dst_port: int) -> Edge:
        return cls(PortRef(src, src_port, OUTPUT), PortRef(dst, dst_port, INPUT))


class Violation(NamedTuple):
    constraint: int
    node: int | None
    port: PortRef | None
    message: str

    def __str__(self):
        return f"constraint {self.constraint}: {self.message}"


@dataclass(frozen=True)
class Dag:
    nodes: Mapping[int, NodeSpec] = field(default_factory=dict)
    edges: frozenset = frozenset()

    @cached_property
    def _connected(self) -> frozenset:
        ports = set()
        for e in self.edges:
            ports.add(e.src)
            ports.add(e.dst)
        return frozenset(ports)

    def _exposed(self, direction: str) -> tuple[PortRef, ...]:
        out = []
        for nid, spec in self.nodes.items():
            n = spec.in_arity if direction == INPUT else spec.out_arity
            for k in range(n):
                p = PortRef(nid, k, direction)
                if p not in self._connected:
                    out.append(p)
        return tuple(out)

    @cached_property
    def exposed_inputs(self) -> tuple[PortRef, ...]:
        return self._exposed(INPUT)

    @cached_property
    def exposed_outputs(self) -> tuple[PortRef, ...]:
        return self._exposed(OUTPUT)

    @property
    def is_open(self) -> bool:
        return any(
            isinstance(self.nodes[p.node], OperatorSpec)
            for p in self.exposed_inputs + self.exposed_outputs
        )

    @property
    def is_closed(self) -> bool:
        return not self.is_open

    def operator_ids(self) -> list[int]:
        return [n for n, s in self.nodes.items() if isinstance(s, OperatorSpec)]

    def sockets(self) -> dict[str, int]:
        return {s.label: n for n, s in self.nodes.items() if isinstance(s, SocketSpec)}

    def in_edges(self, node: int) -> list[Edge]:
        return sorted((e for e in self.edges if e.dst.node == node), key=lambda e: e.dst.index)

    def out_edges(self, node: int) -> list[Edge]:
        return sorted((e for e in self.edges if e.src.node == node), key=lambda e: e.src.index)

    # composition sugar: a >> b is a ~> b, a | b is a ||| b
    def __rshift__(self, other: Dag) -> Dag:
        return compose_vertical(self, other)

    def __or__(self, other: Dag) -> Dag:
        return compose_horizontal(self, other)

    def __repr__(self):
        return (
            f"Dag({len(self.nodes)} nodes, {len(self.edges)} edges, "
            f"{len(self.exposed_inputs)} in, {len(self.exposed_outputs)} out)"
        )


def single(spec: NodeSpec) -> Dag:
    return Dag({fresh_id(): spec}, frozenset())


def map_(f, alias=None, tags=()) -> Dag:
    return single(OperatorSpec("map", f, alias, frozenset(tags)))


def filter_(pred, alias=None) -> Dag:
    return single(OperatorSpec("filter", pred, alias))


def scan(f, acc, alias=None) -> Dag:
    return single(OperatorSpec("scan", (f, acc), alias))


def dup(n: int, alias=None) -> Dag:
    return single(OperatorSpec("dup", n, alias))


def balance(n: int, alias=None) -> Dag:
    return single(OperatorSpec("balance", n, alias))


def merge(n: int, alias=None) -> Dag:
    return single(OperatorSpec("merge", n, alias))


def zip_(alias=None) -> Dag:
    return single(OperatorSpec("zip", None, alias))


def source_socket(label: str) -> Dag:
    return single(SocketSpec(label, SOURCE_SOCKET))


def sink_socket(label: str) -> Dag:
    return single(SocketSpec(label, SINK_SOCKET))


def _renamed(d: Dag) -> tuple[dict[int, NodeSpec], set[Edge], dict[int, int]]:
    mapping = {old: fresh_id() for old in d.nodes}
    nodes = {mapping[old]: spec for old, spec in d.nodes.items()}
    edges = {
        Edge(e.src._replace(node=mapping[e.src.node]), e.dst._replace(node=mapping[e.dst.node]))
        for e in d.edges
    }
    return nodes, edges, mapping


def _remap(ports, mapping):
    return [p._replace(node=mapping[p.node]) for p in ports]


def compose_vertical(a: Dag, b: Dag) -> Dag:
    """``a ~> b``: pair a's k-th exposed output with b's k-th exposed input."""
    if len(a.exposed_outputs) != len(b.exposed_inputs):
        raise CompositionError(
            f"cannot connect {len(a.exposed_outputs)} output port(s) "
            f"to {len(b.exposed_inputs)} input port(s)"
        )
    an, ae, am = _renamed(a)
    bn, be, bm = _renamed(b)
    new = {
        Edge(o, i)
        for o, i in zip(_remap(a.exposed_outputs, am), _remap(b.exposed_inputs, bm))
    }
    return Dag({**an, **bn}, frozenset(ae | be | new))


def compose_prefix(a: Dag, b: Dag) -> Dag:
    """Like ``a ~> b`` but pairs only as many ports as both sides have.

    Leftover ports stay exposed, so :func:`validate` can report them.
    """
    an, ae, am = _renamed(a)
    bn, be, bm = _renamed(b)
    new = {
        Edge(o, i)
        for o, i in zip(_remap(a.exposed_outputs, am), _remap(b.exposed_inputs, bm))
    }
    return Dag({**an, **bn}, frozenset(ae | be | new))


def compose_horizontal(a: Dag, b: Dag) -> Dag:
    an, ae, _ = _renamed(a)
    bn, be, _ = _renamed(b)
    return Dag({**an, **bn}, frozenset(ae | be))


def parallel(dags: Iterable[Dag]) -> Dag:
    out = Dag()
    for d in dags:
        out = compose_horizontal(out, d)
    return out


def close(d: Dag, socket_labels: list[str]) -> Dag:
    """Attach a fresh actor socket to every exposed port of ``d``.

    Labels go to the exposed inputs first (canonical order), then to the
    exposed outputs.
    """
    n_in, n_out = len(d.exposed_inputs), len(d.exposed_outputs)
    if len(socket_labels) != n_in + n_out:
        raise CompositionError(
            f"{n_in + n_out} exposed port(s) but {len(socket_labels)} socket label(s)"
        )
    if len(set(socket_labels)) != len(socket_labels):
        raise CompositionError(f"duplicate socket labels in {socket_labels}")
    clashing = set(socket_labels) & set(d.sockets())
    if clashing:
        raise CompositionError(f"socket label(s) already in use: {sorted(clashing)}")
    if not socket_labels:
        return d
    sources = parallel(source_socket(lbl) for lbl in socket_labels[:n_in])
    sinks = parallel(sink_socket(lbl) for lbl in socket_labels[n_in:])
    return compose_vertical(compose_vertical(sources, d), sinks)


def topological_order(d: Dag) -> list[int]:
    """Kahn's algorithm; ties broken by insertion order. Raises on cycles."""
    indeg = {n: 0 for n in d.nodes}
    succ: dict[int, list[int]] = {n: [] for n in d.nodes}
    for e in d.edges:
        if e.src.node in succ and e.dst.node in indeg:
            succ[e.src.node].append(e.dst.node)
            indeg[e.dst.node] += 1
    position = {n: i for i, n in enumerate(d.nodes)}
    ready = [n for n in d.nodes if indeg[n] == 0]
    order = []
    while ready:
        ready.sort(key=position.__getitem__)
        n = ready.pop(0)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    if len(order) != len(d.nodes):
        raise CompositionError("graph contains a cycle")
    return order


def _cycle_nodes(d: Dag) -> list[int]:
    try:
        topological_order(d)
        return []
    except CompositionError:
        pass
    # nodes remaining after repeatedly peeling sources and sinks lie on or between cycles
    alive = set(d.nodes)
    edges = [(e.src.node, e.dst.node) for e in d.edges if e.src.node in alive and e.dst.node in alive]
    changed = True
    while changed:
        changed = False
        has_in = {b for a, b in edges}
        has_out = {a for a, b in edges}
        dead = {n for n in alive if n not in has_in or n not in has_out}
        if dead:
            alive -= dead
            edges = [(a, b) for a, b in edges if a in alive and b in alive]
            changed = True
    return sorted(alive, key=list(d.nodes).index)


def validate(d: Dag) -> list[Violation]:
    """Check the four deployability constraints; an empty list means ok."""
    violations: list[Violation] = []
    per_port: dict[PortRef, int] = {}
    per_node: dict[int, int] = {n: 0 for n in d.nodes}
    node_ports: dict[int, list[PortRef]] = {n: [] for n in d.nodes}

    for e in d.edges:
        for p in (e.src, e.dst):
            if p.node not in d.nodes:
                violations.append(Violation(2, p.node, p, f"edge refers to unknown node {p.node}"))
                continue
            if p not in per_port:
                node_ports[p.node].append(p)
            per_port[p] = per_port.get(p, 0) + 1
            per_node[p.node] += 1

    for nid, spec in d.nodes.items():
        name = f"{spec.kind}#{nid}" + (f" ({spec.alias})" if spec.alias else "")
        ports = [PortRef(nid, k, INPUT) for k in range(spec.in_arity)]
        ports += [PortRef(nid, k, OUTPUT) for k in range(spec.out_arity)]
        if isinstance(spec, OperatorSpec):
            for p in ports:
                if p not in per_port:
                    violations.append(Violation(1, nid, p, f"{p.direction} port {p.index} of {name} is not connected"))
            if per_node[nid] != len(ports):
                violations.append(
                    Violation(2, nid, None, f"{name} has {per_node[nid]} connection(s) for {len(ports)} port(s)")
                )
            for p in node_ports[nid]:
                if per_port[p] > 1:
                    violations.append(Violation(2, nid, p, f"{p.direction} port {p.index} of {name} has {per_port[p]} edges"))
        else:
            connected = sum(per_port.get(p, 0) for p in ports)
            if per_node[nid] != 1 or connected != 1:
                violations.append(
                    Violation(3, nid, ports[0], f"actor socket {spec.label!r} has {per_node[nid]} connection(s), needs exactly 1")
                )
        for p in node_ports[nid]:
            limit = spec.in_arity if p.direction == INPUT else spec.out_arity
            if p.index >= limit:
                violations.append(Violation(2, nid, p, f"{name} has no {p.direction} port {p.index}"))

    cyc = _cycle_nodes(d)
    if cyc:
        violations.append(Violation(4, cyc[0], None, f"cycle through nodes {cyc}"))
    return violations


def dump(d: Dag) -> str:
    """Text form with identifiers renumbered 0..n-1 in insertion order."""
    canon = {nid: i for i, nid in enumerate(d.nodes)}
    lines = []
    for nid, spec in d.nodes.items():
        alias = f" {spec.alias}" if spec.alias else ""
        lines.append(f"node {canon[nid]} {spec.kind}{alias}")
    edges = sorted(
        (canon[e.src.node], e.src.index, canon[e.dst.node], e.dst.index) for e in d.edges
    )
    lines.extend(f"edge {a}.{ap} -> {b}.{bp}" for a, ap, b, bp in edges)
    return "\n".join(lines) + "\n"
