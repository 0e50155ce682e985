"""Base-level event handlers for the built-in operators, sources and sinks.

Every ``*_on_next`` handler is a pure function of its argument, the current
state, the incoming value and (for fan-in operators) the input port. It
returns a :class:`~metastream.protocol.Response` carrying the new state and
a single action.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

from .protocol import (
    ACCEPTED,
    COMPLETED,
    SKIP,
    Complete,
    Deliver,
    Emit,
    Err,
    Error,
    Fail,
    Next,
    Response,
    TickValue,
    Value,
)

PORT0 = (0,)
_new = tuple.__new__  # skips the NamedTuple argument handling on hot paths


def map_on_next(f, state, value, from_port=0) -> Response:
    try:
        return _new(Response, (state, _new(Emit, (f(value), PORT0))))
    except Exception as e:
        return Response(state, Fail(e))


def filter_on_next(pred, state, value, from_port=0) -> Response:
    try:
        keep = pred(value)
    except Exception as e:
        return Response(state, Fail(e))
    return _new(Response, (state, _new(Emit, (value, PORT0)) if keep else SKIP))


def scan_on_next(f, acc, value) -> Response:
    try:
        acc = f(acc, value)
    except Exception as e:
        return Response(acc, Fail(e))
    return Response(acc, Emit(acc, PORT0))


def dup_on_next(n, state, value, from_port=0) -> Response:
    return Response(state, Emit(value, tuple(range(n))))


def balance_on_next(n, cursor, value, from_port=0) -> Response:
    return Response((cursor + 1) % n, Emit(value, (cursor,)))


def merge_on_next(n, state, value, from_port) -> Response:
    return Response(state, Emit(value, PORT0))


class ZipState(NamedTuple):
    left: tuple = ()
    right: tuple = ()
    done: frozenset = frozenset()


def zip_on_next(buffers: ZipState, value, from_port) -> Response:
    left, right, done = buffers
    if from_port == 0:
        left = left + (value,)
    else:
        right = right + (value,)
    if left and right:
        pair = (left[0], right[0])
        return Response(ZipState(left[1:], right[1:], done), Emit(pair, PORT0))
    other = 1 - from_port
    pending = right if other else left
    if other in done and not pending:
        # the opposite side is exhausted, nothing can pair any more
        return Response(ZipState(left, right, done), COMPLETED)
    return Response(ZipState(left, right, done), SKIP)


def zip_on_complete(buffers: ZipState, from_port) -> Response:
    left, right, done = buffers
    done = done | {from_port}
    pending = left if from_port == 0 else right
    if not pending:
        return Response(ZipState(left, right, done), COMPLETED)
    return Response(ZipState(left, right, done), SKIP)


def merge_on_complete(n, completed: frozenset, from_port) -> Response:
    completed = completed | {from_port}
    return Response(completed, COMPLETED if len(completed) >= n else SKIP)


def fused_on_next(steps, state, value, from_port=0) -> Response:
    """Run a chain of ``("map", f)`` / ``("filter", p)`` steps as one stage."""
    try:
        for kind, fn in steps:
            if kind == "map":
                value = fn(value)
            elif not fn(value):
                return Response(state, SKIP)
    except Exception as e:
        return Response(state, Fail(e))
    return Response(state, Emit(value, PORT0))


class Logic(NamedTuple):
    init: Callable[[Any], Any]
    on_next: Callable[[Any, Any, Any, int], Response]
    on_complete: Callable[[Any, Any, int], Response]


def _none(arg):
    return None


def _single_complete(arg, state, port):
    return Response(state, COMPLETED)


LOGIC: dict[str, Logic] = {
    "map": Logic(_none, map_on_next, _single_complete),
    "filter": Logic(_none, filter_on_next, _single_complete),
    "scan": Logic(lambda a: a[1], lambda a, s, v, p: scan_on_next(a[0], s, v), _single_complete),
    "dup": Logic(_none, dup_on_next, _single_complete),
    "balance": Logic(lambda a: 0, balance_on_next, _single_complete),
    "merge": Logic(lambda a: frozenset(), merge_on_next, merge_on_complete),
    "zip": Logic(lambda a: ZipState(), lambda a, s, v, p: zip_on_next(s, v, p),
                 lambda a, s, p: zip_on_complete(s, p)),
    "fused": Logic(_none, fused_on_next, _single_complete),
}


# -- sources --------------------------------------------------------------------


class Source:
    """An endpoint that produces one value per tick."""

    def initial_state(self):
        raise NotImplementedError

    def on_tick(self, state) -> Response:
        raise NotImplementedError


def source_range_on_tick(state: tuple[int, int]) -> Response:
    nxt, last = state
    if nxt <= last:
        return Response((nxt + 1, last), TickValue(nxt))
    return Response(state, COMPLETED)


def source_list_on_tick(state: tuple) -> Response:
    values, i = state
    if i < len(values):
        return Response((values, i + 1), TickValue(values[i]))
    return Response(state, COMPLETED)


@dataclass(frozen=True)
class RangeSource(Source):
    """Integers from ``first`` to ``last``, both inclusive."""

    first: int
    last: int

    def initial_state(self):
        return (self.first, self.last)

    def on_tick(self, state):
        return source_range_on_tick(state)


@dataclass(frozen=True)
class ListSource(Source):
    values: tuple

    def initial_state(self):
        return (self.values, 0)

    def on_tick(self, state):
        return source_list_on_tick(state)


def range_source(first: int, last: int) -> RangeSource:
    return RangeSource(first, last)


def list_source(values) -> ListSource:
    return ListSource(tuple(values))


# -- sinks --------------------------------------------------------------------------

COLLECT_ALL = "collect_all"
FOR_EACH = "for_each"


@dataclass(frozen=True, eq=False)
class SinkSpec:
    """``collect_all`` gathers every value; ``for_each`` calls back per value.

    ``target`` (optional) receives the terminal outcome once; deployments
    also resolve their stream handle with it.
    """

    kind: str
    callback: Callable[[Any], None] | None = None
    target: Callable[[Any], None] | None = None

    def initial_state(self):
        return [] if self.kind == COLLECT_ALL else None


def collect_all(target=None) -> SinkSpec:
    return SinkSpec(COLLECT_ALL, None, target)


def for_each(callback, target=None) -> SinkSpec:
    return SinkSpec(FOR_EACH, callback, target)


def sink_step(spec: SinkSpec, state, event):
    """Advance a sink by one event; returns ``(state, outcome or None)``."""
    if isinstance(event, Next):
        if spec.kind == COLLECT_ALL:
            state.append(event.value)
        else:
            try:
                spec.callback(event.value)
            except Exception as e:
                return state, Error(e)
        return state, None
    if isinstance(event, Complete):
        return state, Value(state if spec.kind == COLLECT_ALL else None)
    if isinstance(event, Err):
        return state, Error(event.error)
    return state, None


def sink_response(spec: SinkSpec, state, event) -> Response:
    state, outcome = sink_step(spec, state, event)
    return Response(state, ACCEPTED if outcome is None else Deliver(outcome))


# -- named functions for textual pipelines ---------------------------------------

FUNCTIONS: dict[str, Callable] = {
    "identity": lambda x: x,
    "even": lambda x: x % 2 == 0,
    "odd": lambda x: x % 2 == 1,
    "gt0": lambda x: x > 0,
    "square": lambda x: x * x,
    "inc": lambda x: x + 1,
    "double": lambda x: x * 2,
    "sum": lambda a, b: a + b,
    "pair": lambda x: (x, x),
}

for _name, _fn in FUNCTIONS.items():
    _fn.__name__ = _fn.__qualname__ = _name
