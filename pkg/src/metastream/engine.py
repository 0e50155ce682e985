"""Synchronous, in-thread execution of a closed DAG.

Meta programs (both the compile-time and the run-time kind) are ordinary
closed DAGs with one source socket and one sink socket. :class:`InlineStream`
instantiates such a DAG once and lets the caller push values into the
source socket one at a time; everything reachable runs depth-first on the
caller's stack and whatever arrives at the sink socket is returned.
"""

from __future__ import annotations

from typing import Any, Callable

from .graph import Dag, OperatorSpec, SocketSpec, SOURCE_SOCKET, validate
from .operators import LOGIC
from .protocol import Completed, Emit, Fail


class StageError(RuntimeError):
    """A handler inside an inline stream failed."""

    def __init__(self, node: str, error: BaseException):
        super().__init__(f"{node}: {error!r}")
        self.node = node
        self.error = error


class InlineStream:
    def __init__(self, dag: Dag):
        problems = validate(dag)
        if problems:
            raise ValueError("meta DAG is not deployable: " + "; ".join(map(str, problems)))
        sockets = [(n, s) for n, s in dag.nodes.items() if isinstance(s, SocketSpec)]
        sources = [n for n, s in sockets if s.direction == SOURCE_SOCKET]
        sinks = [n for n, s in sockets if s.direction != SOURCE_SOCKET]
        if len(sources) != 1 or len(sinks) != 1:
            raise ValueError("a meta DAG needs exactly one source and one sink socket")
        self.dag = dag
        self._out: list[Any] = []
        receivers: dict[int, Callable[[Any, int], None]] = {}
        targets: dict[int, list] = {n: [None] * s.out_arity for n, s in dag.nodes.items()}
        for e in dag.edges:
            targets[e.src.node][e.src.index] = (e.dst.node, e.dst.index)
        self._targets = targets
        self._receivers = receivers
        for nid, spec in dag.nodes.items():
            if isinstance(spec, OperatorSpec):
                receivers[nid] = self._operator(nid, spec)
        receivers[sinks[0]] = lambda value, port: self._out.append(value)
        first = targets[sources[0]][0]
        self._entry = receivers[first[0]], first[1]
        spec = dag.nodes[first[0]]
        if spec.kind == "map" and targets[first[0]][0][0] == sinks[0]:
            # src ~> map ~> snk, the shape of every fused meta program
            self.push = self._single_map(f"{spec.alias or 'map'}#{first[0]}", spec.argument)

    def _operator(self, nid: int, spec: OperatorSpec):
        logic = LOGIC[spec.kind]
        arg = spec.argument
        cell = [logic.init(arg)]
        outs = self._targets[nid]
        receivers = self._receivers
        name = f"{spec.alias or spec.kind}#{nid}"
        if spec.kind == "map":
            return self._map(name, arg, outs[0])

        def receive(value, port):
            state, action = logic.on_next(arg, cell[0], value, port)
            cell[0] = state
            if type(action) is Emit:
                v = action.value
                for p in action.ports:
                    dst, dport = outs[p]
                    receivers[dst](v, dport)
            elif type(action) is Fail:
                raise StageError(name, action.error)
            elif type(action) is Completed:
                raise StageError(name, RuntimeError("inline stream completed"))

        return receive

    def _map(self, name: str, f, out):
        # same contract as the generic handler, minus the Response round trip
        dst, dport = out
        receivers = self._receivers

        def receive(value, port):
            try:
                v = f(value)
            except Exception as e:
                raise StageError(name, e) from e
            receivers[dst](v, dport)

        return receive

    @staticmethod
    def _single_map(name: str, f):
        def push(value) -> list:
            try:
                return [f(value)]
            except Exception as e:
                raise StageError(name, e) from e

        return push

    def push(self, value) -> list:
        """Feed one value; return everything the sink received for it."""
        self._out = out = []
        fn, port = self._entry
        fn(value, port)
        return out
