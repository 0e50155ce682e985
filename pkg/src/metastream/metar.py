"""Run-time meta programs.

A behavior is three closed meta DAGs, one each for operators, sources and
sinks. Every meta DAG has a source socket ``src`` receiving one
:class:`~metastream.runtime.MetaEvent` per base-level message and a sink
socket ``snk`` that must receive exactly one
:class:`~metastream.runtime.Snapshot` in return.

The two building blocks are :func:`base_dag` (call the hosted event
handler) and :func:`effects_dag` (turn its response into messages). A
behavior rearranges them and adds stages of its own, for example to send
demand upstream instead of ticking the source.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .graph import Dag, dup, filter_, map_, merge, parallel, sink_socket, source_socket
from .metac import compile_dag, fusion_meta
from .protocol import (
    TICK,
    Demand,
    Emit,
    Init,
    Next,
    Skip,
    Tick,
    TickValue,
)
from .runtime import (
    OPERATOR,
    RUNNING,
    SINK,
    SOURCE,
    BaseResult,
    MetaEvent,
    Snapshot,
    call_base,
    default_effects,
    propagate_down,
    propagate_self,
    propagate_up,
    state,
)

__all__ = [
    "Behavior", "XorCipher", "base_dag", "effects_dag", "identity", "logging_behavior",
    "pull", "smart_pull", "encryption", "behavior_named", "BEHAVIORS", "propagate_down",
    "propagate_up", "propagate_self", "state",
]


@dataclass(frozen=True)
class Behavior:
    name: str
    operator_meta: Dag
    source_meta: Dag
    sink_meta: Dag

    def meta_for(self, role: str) -> Dag:
        if role == OPERATOR:
            return self.operator_meta
        if role == SOURCE:
            return self.source_meta
        if role == SINK:
            return self.sink_meta
        raise ValueError(f"unknown unit role {role!r}")


# -- building blocks -------------------------------------------------------------------


def _base(me: MetaEvent) -> BaseResult:
    return call_base(me[0], me[1])


def _effects(br: BaseResult) -> Snapshot:
    return default_effects(br[0], br[1])


def base_dag() -> Dag:
    """Open stage: MetaEvent in, (snapshot, response) out."""
    return map_(_base, alias="base")


def effects_dag() -> Dag:
    """Open stage: (snapshot, response) in, final snapshot out."""
    return map_(_effects, alias="effects")


def closed(stages: Dag) -> Dag:
    return source_socket("src") >> stages >> sink_socket("snk")


def routed(branches: list[tuple[Callable[[MetaEvent], bool], Dag]]) -> Dag:
    """Close over branches guarded by mutually exclusive predicates."""
    if len(branches) == 1:
        return closed(branches[0][1])
    k = len(branches)
    arms = parallel(filter_(pred) >> stages for pred, stages in branches)
    return source_socket("src") >> dup(k) >> arms >> merge(k) >> sink_socket("snk")


def event_is(*types) -> Callable[[MetaEvent], bool]:
    def test(me: MetaEvent) -> bool:
        return type(me.event) in types

    test.__name__ = "is_" + "_".join(t.__name__.lower() for t in types)
    return test


def event_is_not(*types) -> Callable[[MetaEvent], bool]:
    def test(me: MetaEvent) -> bool:
        return type(me.event) not in types

    test.__name__ = "not_" + "_".join(t.__name__.lower() for t in types)
    return test


def _uniform(name: str, meta: Dag) -> Behavior:
    return Behavior(name, meta, meta, meta)


# -- identity -------------------------------------------------------------------------------


def identity() -> Behavior:
    """``src ~> base ~> effects ~> snk`` everywhere, fused into a single stage."""
    meta = compile_dag(closed(base_dag() >> effects_dag()), fusion_meta())
    return _uniform("identity", meta)


# -- logging --------------------------------------------------------------------------------


def logging_behavior(log_sink: Callable[[tuple], Any]) -> Behavior:
    """Identity plus a tap handing ``(unit_ref, "next", value)`` to ``log_sink``."""

    def tap(me: MetaEvent) -> MetaEvent:
        if type(me.event) is Next:
            log_sink((me.snapshot.pid, "next", me.event.value))
        return me

    meta = closed(map_(tap, alias="tap") >> base_dag() >> effects_dag())
    return _uniform("logging", meta)


# -- pull -----------------------------------------------------------------------------------


def _demand_upstream(snapshot: Snapshot) -> Snapshot:
    propagate_up(Demand(), snapshot.us)
    return snapshot


def _forward_demand(me: MetaEvent) -> Snapshot:
    return _demand_upstream(me.snapshot)


def _demand_on_skip(br: BaseResult) -> BaseResult:
    # nothing went downstream, so the demand that caused this value is still open
    if type(br.response) is Skip:
        propagate_up(Demand(), br.snapshot.us)
    return br


def _start_without_tick(br: BaseResult) -> Snapshot:
    return br.snapshot._replace(phase=RUNNING)


def _tick_self(me: MetaEvent) -> Snapshot:
    propagate_self(TICK, me.snapshot.pid)
    return me.snapshot


def _produce_once(br: BaseResult) -> Snapshot:
    if type(br.response) is TickValue:
        propagate_down(Next(br.response.value), br.snapshot.ds)
        return br.snapshot
    return default_effects(br.snapshot, br.response)


def _pull_source() -> Dag:
    return routed([
        (event_is(Init), base_dag() >> map_(_start_without_tick, alias="no_tick")),
        (event_is(Demand), map_(_tick_self, alias="tick_on_demand")),
        (event_is(Tick), base_dag() >> map_(_produce_once, alias="produce_once")),
        (event_is_not(Init, Demand, Tick), base_dag() >> effects_dag()),
    ])


def _pull_sink() -> Dag:
    return routed([
        (event_is(Init, Next),
         base_dag() >> effects_dag() >> map_(_demand_upstream, alias="demand")),
        (event_is_not(Init, Next), base_dag() >> effects_dag()),
    ])


def pull() -> Behavior:
    """Values move only in answer to demand sent up from the sinks."""
    operator = routed([
        (event_is(Demand), map_(_forward_demand, alias="forward_demand")),
        (event_is(Next), base_dag() >> map_(_demand_on_skip, alias="demand_on_skip") >> effects_dag()),
        (event_is_not(Demand, Next), base_dag() >> effects_dag()),
    ])
    return Behavior("pull", operator, _pull_source(), _pull_sink())


def _outstanding(snapshot: Snapshot) -> frozenset:
    return snapshot.meta_state or frozenset()


def _demand_missing(snapshot: Snapshot) -> Snapshot:
    """Demand every upstream that has no demand outstanding, and remember it."""
    pending = _outstanding(snapshot)
    fresh = [u for u in snapshot.us if u not in pending]
    if not fresh:
        return snapshot
    propagate_up(Demand(), fresh)
    return snapshot._replace(meta_state=pending.union(fresh))


def _smart_forward(me: MetaEvent) -> Snapshot:
    return _demand_missing(me.snapshot)


def _answered(me: MetaEvent) -> MetaEvent:
    pending = _outstanding(me.snapshot)
    sender = me.event.sender
    if sender in pending:
        return me._replace(snapshot=me.snapshot._replace(meta_state=pending - {sender}))
    return me


def _smart_demand_on_skip(br: BaseResult) -> BaseResult:
    if type(br.response) is Skip:
        return br._replace(snapshot=_demand_missing(br.snapshot))
    return br


def _start_empty(me: MetaEvent) -> MetaEvent:
    return me._replace(snapshot=me.snapshot._replace(meta_state=frozenset()))


def smart_pull() -> Behavior:
    """Pull that never sends a second demand to an upstream before it answered."""
    operator = routed([
        (event_is(Init), map_(_start_empty, alias="no_demands") >> base_dag() >> effects_dag()),
        (event_is(Demand), map_(_smart_forward, alias="forward_missing")),
        (event_is(Next),
         map_(_answered, alias="answered") >> base_dag()
         >> map_(_smart_demand_on_skip, alias="demand_on_skip") >> effects_dag()),
        (event_is_not(Init, Demand, Next), base_dag() >> effects_dag()),
    ])
    return Behavior("smartpull", operator, _pull_source(), _pull_sink())


# -- encryption -----------------------------------------------------------------------------


@dataclass(frozen=True)
class XorCipher:
    """XOR every integer with ``key``; tuples are handled element-wise.

    Booleans and non-integers pass through unchanged, so they are fixed
    points of the cipher. XOR is its own inverse.
    """

    key: int = 0x5A

    def encrypt(self, value):
        if isinstance(value, bool):
            return value
        if isinstance(value, int):
            return value ^ self.key
        if isinstance(value, tuple):
            return tuple(self.encrypt(v) for v in value)
        return value

    decrypt = encrypt


@dataclass(frozen=True)
class IdentityCipher:
    def encrypt(self, value):
        return value

    def decrypt(self, value):
        return value


def encryption(cipher=None) -> Behavior:
    """Values travel encrypted; each unit decrypts on receipt and encrypts on emit."""
    cipher = cipher if cipher is not None else XorCipher()

    def decrypt_next(me: MetaEvent) -> MetaEvent:
        ev = me.event
        if type(ev) is Next:
            return me._replace(event=ev._replace(value=cipher.decrypt(ev.value)))
        return me

    def encrypt_emit(br: BaseResult) -> BaseResult:
        r = br.response
        if type(r) is Emit or type(r) is TickValue:
            return br._replace(response=r._replace(value=cipher.encrypt(r.value)))
        return br

    operator = closed(
        map_(decrypt_next, alias="unbox") >> base_dag() >> map_(encrypt_emit, alias="box") >> effects_dag()
    )
    source = closed(base_dag() >> map_(encrypt_emit, alias="box") >> effects_dag())
    sink = closed(map_(decrypt_next, alias="unbox") >> base_dag() >> effects_dag())
    return Behavior("encrypt", operator, source, sink)


# -- registry ---------------------------------------------------------------------------------

BEHAVIORS: dict[str, Callable[[], Behavior | None]] = {
    "none": lambda: None,
    "identity": identity,
    "pull": pull,
    "smartpull": smart_pull,
}


def behavior_named(name: str, log_sink: Callable[[tuple], Any] | None = None) -> Behavior | None:
    """Look up a behavior by its registry name.

    ``logging`` needs ``log_sink`` (defaults to printing); ``encrypt:<hex>``
    selects the XOR cipher with that key.
    """
    if name == "logging":
        return logging_behavior(log_sink if log_sink is not None else print)
    if name.startswith("encrypt"):
        _, _, key = name.partition(":")
        try:
            return encryption(XorCipher(int(key, 16) if key else 0x5A))
        except ValueError:
            raise ValueError(f"bad cipher key in {name!r}") from None
    try:
        return BEHAVIORS[name]()
    except KeyError:
        known = sorted([*BEHAVIORS, "logging", "encrypt:<hexkey>"])
        raise ValueError(f"unknown behavior {name!r}; known: {', '.join(known)}") from None
