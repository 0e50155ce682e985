"""Deployment of closed DAGs as communicating units.

Each operator node becomes a :class:`Unit`: a sequential message processor
with a private mailbox, exclusive ownership of its state and FIFO delivery
per connection. Two schedulers drive units:

* ``DeterministicScheduler`` runs the whole stream on the calling thread,
  draining mailboxes round-robin (optionally in a seeded random order).
* ``ThreadedScheduler`` runs units on a thread pool; a unit is never run by
  two workers at once.

Units either take the fast path (event handler plus default effects, no
reification at all) or, when a behavior is given, push every incoming event
through the unit's meta DAG:

1. the event arrives,
2. it is reified together with a :class:`Snapshot` into a :class:`MetaEvent`,
3. the meta event is pushed into the unit's meta DAG,
4. the meta DAG calls the base handler (:func:`call_base`),
5. and performs effects (:func:`default_effects`, ``propagate_*``),
6. the meta DAG's sink receives the final snapshot,
7. which is installed as the unit's new state.

Effects are buffered during steps 3-6 and only released once a snapshot was
installed, so a failing meta run emits nothing.
"""

from __future__ import annotations

import itertools
import logging
import random
import threading
from collections import deque
from concurrent.futures import Future
from typing import Any, Callable, Iterable, Mapping, NamedTuple

from . import counters
from .engine import InlineStream
from .graph import Dag, OperatorSpec, SocketSpec, SOURCE_SOCKET, validate
from .operators import LOGIC, SinkSpec, Source, sink_response
from .protocol import (
    INIT,
    INITIALIZED,
    SKIP,
    TICK,
    Accepted,
    Complete,
    Completed,
    Deliver,
    Demand,
    Emit,
    Err,
    Error,
    Fail,
    Init,
    Initialized,
    MetaFault,
    Next,
    Peer,
    Response,
    Skip,
    StreamError,
    Tick,
    TickValue,
)

log = logging.getLogger(__name__)

OPERATOR = "operator"
SOURCE = "source"
SINK = "sink"

INITIAL = "initial"
RUNNING = "running"
FINAL = "final"

DEFAULT_MAX_MESSAGES = 50_000_000


class DeploymentError(ValueError):
    """The DAG or its bindings cannot be deployed."""


class BudgetExceeded(RuntimeError):
    pass


class Snapshot(NamedTuple):
    """What a meta program sees of a unit."""

    pid: str
    us: tuple[Peer, ...]
    ds: tuple[Peer, ...]
    state: Any
    meta_state: Any = None
    phase: str = RUNNING


_tuple_new = tuple.__new__


class MetaEvent(NamedTuple):
    snapshot: Snapshot
    event: Any


class BaseResult(NamedTuple):
    snapshot: Snapshot
    response: Any


class TraceRecord(NamedTuple):
    seq: int
    src: str
    dst: str
    event: Any

    def __str__(self):
        return f"seq {self.seq} {self.src} -> {self.dst} {self.event!r}"


# -- units -----------------------------------------------------------------------


class Unit:
    __slots__ = (
        "ref", "role", "host", "logic", "arg", "us", "ds", "up_port", "down_port", "out_peers",
        "in_peers", "ds_units", "state", "meta_state", "phase", "mailbox", "scheduled",
        "meta", "deployment", "outbox", "send",
    )

    def __init__(self, ref: str, role: str, host):
        self.ref = ref
        self.role = role
        self.host = host
        self.logic = LOGIC[host.kind] if role == OPERATOR else None
        self.arg = host.argument if role == OPERATOR else None
        n_in = host.in_arity if role == OPERATOR else (1 if role == SINK else 0)
        n_out = host.out_arity if role == OPERATOR else (1 if role == SOURCE else 0)
        self.us: list[Peer | None] = [None] * n_in
        self.ds: list[Peer | None] = [None] * n_out
        self.up_port: dict[Peer, int] = {}
        self.down_port: dict[Peer, int] = {}
        self.out_peers = tuple(Peer(ref, k) for k in range(n_out))
        self.in_peers = tuple(Peer(ref, k) for k in range(n_in))
        self.ds_units: list[Unit] = []
        self.state = None
        self.meta_state = None
        self.phase = INITIAL
        self.mailbox: deque = deque()
        self.scheduled = False
        self.meta: InlineStream | None = None
        self.deployment: Deployment | None = None
        self.outbox: list = []
        self.send: Callable[[Unit, Any], None] | None = None

    def __repr__(self):
        return f"<Unit {self.ref} {self.phase}>"

    def handle(self, state, event) -> Response:
        """Run the base-level handler for ``event``; no effects."""
        t = type(event)
        role = self.role
        if role == OPERATOR:
            if t is Next:
                return self.logic.on_next(self.arg, state, event.value, self.up_port[event.sender])
            if t is Complete:
                return self.logic.on_complete(self.arg, state, self.up_port[event.sender])
            if t is Err:
                return Response(state, Fail(event.error))
            if t is Init:
                return Response(self.logic.init(self.arg), INITIALIZED)
            return Response(state, SKIP)
        if role == SOURCE:
            if t is Tick:
                return self.host.on_tick(state)
            if t is Init:
                return Response(self.host.initial_state(), INITIALIZED)
            return Response(state, SKIP)
        if t is Init:
            return Response(self.host.initial_state(), INITIALIZED)
        if t is Next or t is Complete or t is Err:
            return sink_response(self.host, state, event)
        return Response(state, SKIP)


def _sender_ref(unit: Unit, event) -> str:
    sender = getattr(event, "sender", None)
    if sender is not None:
        return sender.ref
    return "runtime" if type(event) is Init else unit.ref


# -- fast path -----------------------------------------------------------------------


def _fast_process(unit: Unit, event) -> None:
    if unit.phase is FINAL:
        return
    if type(event) is Next and unit.role is OPERATOR:
        state, action = unit.logic.on_next(unit.arg, unit.state, event.value, unit.up_port[event.sender])
    else:
        state, action = unit.handle(unit.state, event)
    unit.state = state
    send = unit.send
    t = type(action)
    if t is Emit:
        v = action.value
        for p in action.ports:
            send(unit.ds_units[p], _tuple_new(Next, (v, unit.out_peers[p])))
    elif t is TickValue:
        v = action.value
        for p, dst in enumerate(unit.ds_units):
            send(dst, Next(v, unit.out_peers[p]))
        send(unit, TICK)
    elif t is Initialized:
        unit.phase = RUNNING
        if unit.role == SOURCE:
            send(unit, TICK)
    elif t is Completed:
        unit.phase = FINAL
        for p, dst in enumerate(unit.ds_units):
            send(dst, Complete(unit.out_peers[p]))
    elif t is Fail:
        unit.phase = FINAL
        for p, dst in enumerate(unit.ds_units):
            send(dst, Err(action.error, unit.out_peers[p]))
    elif t is Deliver:
        unit.phase = FINAL
        unit.deployment.deliver(unit, action.outcome)


# -- meta path -----------------------------------------------------------------------

_local = threading.local()


def _current() -> Unit:
    """The unit whose meta DAG is running on this thread."""
    try:
        unit = _local.unit
    except AttributeError:
        unit = None
    if unit is None:
        raise RuntimeError("meta primitives can only be used while a unit runs its meta DAG")
    return unit


def _stamp(unit: Unit, peer: Peer, event, downstream: bool):
    t = type(event)
    if t is Next:
        if event.sender is None:
            return Next(event.value, _own_port(unit, peer, downstream))
    elif t is Demand or t is Complete:
        if event.sender is None:
            return t(_own_port(unit, peer, downstream))
    elif t is Err:
        if event.sender is None:
            return Err(event.error, _own_port(unit, peer, downstream))
    return event


def _own_port(unit: Unit, peer: Peer, downstream: bool) -> Peer:
    if downstream:
        return unit.out_peers[unit.down_port[peer]]
    return unit.in_peers[unit.up_port[peer]]


def propagate_down(event, ds: Iterable[Peer]) -> None:
    """Send ``event`` to every given downstream peer (buffered)."""
    unit = _current()
    units = unit.deployment.units
    for peer in ds:
        unit.outbox.append((units[peer.ref], _stamp(unit, peer, event, True)))


def propagate_up(event, us: Iterable[Peer]) -> None:
    """Send ``event`` to every given upstream peer (buffered)."""
    unit = _current()
    units = unit.deployment.units
    for peer in us:
        unit.outbox.append((units[peer.ref], _stamp(unit, peer, event, False)))


def propagate_self(event, pid: str | None = None) -> None:
    unit = _current()
    unit.outbox.append((unit, event))


def deliver(outcome) -> None:
    _current().outbox.append((None, outcome))


def state(meta_event: MetaEvent):
    """User state of the unit the meta event belongs to."""
    return meta_event.snapshot.state


def call_base(snapshot: Snapshot, event) -> BaseResult:
    """Invoke the hosted handler for ``event`` against ``snapshot.state``."""
    unit = getattr(_local, "unit", None) or _current()
    if type(event) is Next and unit.role is OPERATOR:
        new_state, action = unit.logic.on_next(unit.arg, snapshot[3], event.value, unit.up_port[event.sender])
    else:
        new_state, action = unit.handle(snapshot[3], event)
    pid, us, ds, _, meta_state, phase = snapshot
    return _tuple_new(BaseResult, (_tuple_new(Snapshot, (pid, us, ds, new_state, meta_state, phase)), action))


def default_effects(snapshot: Snapshot, response) -> Snapshot:
    """Turn a handler response into protocol messages; returns the new snapshot."""
    t = type(response)
    ds = snapshot.ds
    if t is Emit:
        # the common case, stamped here instead of via propagate_down
        unit = getattr(_local, "unit", None) or _current()
        v = response.value
        for p in response.ports:
            unit.outbox.append((unit.ds_units[p], _tuple_new(Next, (v, unit.out_peers[p]))))
    elif t is Skip or t is Accepted:
        pass
    elif t is TickValue:
        propagate_down(Next(response.value), ds)
        propagate_self(TICK, snapshot.pid)
    elif t is Initialized:
        if _current().role == SOURCE:
            propagate_self(TICK, snapshot.pid)
        return snapshot._replace(phase=RUNNING)
    elif t is Completed:
        propagate_down(Complete(), ds)
        return snapshot._replace(phase=FINAL)
    elif t is Fail:
        propagate_down(Err(response.error), ds)
        return snapshot._replace(phase=FINAL)
    elif t is Deliver:
        deliver(response.outcome)
        return snapshot._replace(phase=FINAL)
    else:
        raise TypeError(f"unknown handler response {response!r}")
    return snapshot


_COUNTS = counters._counts


def _meta_process(unit: Unit, event) -> None:
    if unit.phase is FINAL:
        return
    snap = _tuple_new(Snapshot, (unit.ref, unit.us, unit.ds, unit.state, unit.meta_state, unit.phase))
    _COUNTS["meta_events"] += 1
    unit.outbox = outbox = []
    _local.unit = unit
    try:
        out = unit.meta.push(_tuple_new(MetaEvent, (snap, event)))
    except Exception as e:
        _local.unit = None
        _meta_fault(unit, e)
        return
    _local.unit = None
    if len(out) != 1 or type(out[0]) is not Snapshot:
        _meta_fault(unit, f"meta DAG produced {len(out)} result(s)")
        return
    _, _, _, unit.state, unit.meta_state, unit.phase = out[0]
    dep = unit.deployment
    send = dep.scheduler.send
    for dst, ev in outbox:
        if dst is None:
            dep.deliver(unit, ev)
        else:
            send(dst, ev)


def _meta_fault(unit: Unit, reason) -> None:
    """Drop the run's effects, stop the unit and tell everyone downstream."""
    log.warning("meta fault in %s: %s", unit.ref, reason)
    fault = MetaFault(f"meta fault in {unit.ref}: {reason}")
    unit.phase = FINAL
    dep = unit.deployment
    for p, dst in enumerate(unit.ds_units):
        dep.scheduler.send(dst, Err(fault, unit.out_peers[p]))
    if unit.role == SINK:
        dep.deliver(unit, Error(fault))


# -- schedulers ------------------------------------------------------------------------


class DeterministicScheduler:
    """Single-threaded round-robin over units with pending messages."""

    def __init__(self, deployment: Deployment, seed: int | None = None):
        self.dep = deployment
        self.ready: deque = deque()
        self.rng = random.Random(seed) if seed is not None else None
        self._fresh: list = []

    def send(self, unit: Unit, event) -> None:
        unit.mailbox.append(event)
        if not unit.scheduled:
            unit.scheduled = True
            if self.rng is None:
                self.ready.append(unit)
            else:
                self._fresh.append(unit)

    def _admit_fresh(self):
        if self._fresh:
            self.rng.shuffle(self._fresh)
            self.ready.extend(self._fresh)
            self._fresh.clear()

    def start(self, units: Iterable[Unit]) -> None:
        for unit in units:
            self.send(unit, INIT)
        self.run()

    def run(self) -> None:
        dep = self.dep
        ready = self.ready
        budget = dep.max_messages
        tracer = dep.record
        process = dep.process
        count = 0
        if self.rng is not None:
            self._admit_fresh()
        while ready:
            unit = ready.popleft()
            box = unit.mailbox
            for _ in range(len(box)):
                event = box.popleft()
                count += 1
                if tracer is not None:
                    tracer(unit, event)
                process(unit, event)
            if count > budget:
                dep.delivered_count = count
                dep.abort(BudgetExceeded(f"message budget of {budget} exhausted"))
                return
            if box:
                ready.append(unit)
            else:
                unit.scheduled = False
            if self.rng is not None:
                self._admit_fresh()
        dep.delivered_count = count
        dep.quiescent()


class ThreadedScheduler:
    """Units run on worker threads; each unit is drained by one worker at a time."""

    BATCH = 64

    def __init__(self, deployment: Deployment, workers: int = 4):
        self.dep = deployment
        self.lock = threading.Lock()
        self.wakeup = threading.Condition(self.lock)
        self.ready: deque = deque()
        self.workers = workers
        self.inflight = 0
        self.count = 0
        self.stopped = False

    def send(self, unit: Unit, event) -> None:
        with self.lock:
            if self.stopped:
                return
            unit.mailbox.append(event)
            self.inflight += 1
            if not unit.scheduled:
                unit.scheduled = True
                self.ready.append(unit)
                self.wakeup.notify()

    def start(self, units: Iterable[Unit]) -> None:
        # every mailbox holds its Init before any unit runs
        units = list(units)
        with self.lock:
            for unit in units:
                unit.mailbox.append(INIT)
                unit.scheduled = True
                self.ready.append(unit)
            self.inflight += len(units)
        if not units:
            self._stop(None)
            return
        for i in range(self.workers):
            threading.Thread(target=self._work, name=f"unit-worker-{i}", daemon=True).start()

    def _work(self) -> None:
        dep = self.dep
        process = dep.process
        tracer = dep.record
        lock = self.lock
        while True:
            with lock:
                while not self.ready and not self.stopped:
                    self.wakeup.wait()
                if self.stopped:
                    return
                unit = self.ready.popleft()
                box = unit.mailbox
                n = min(len(box), self.BATCH)
                batch = [box.popleft() for _ in range(n)]
                self.count += n
                over = self.count > dep.max_messages
            if over:
                self._stop(BudgetExceeded(f"message budget of {dep.max_messages} exhausted"))
                return
            try:
                for event in batch:
                    if tracer is not None:
                        tracer(unit, event)
                    process(unit, event)
            except BaseException as e:  # a bug in the runtime itself
                log.exception("unit %s crashed", unit.ref)
                self._stop(e)
                return
            with lock:
                self.inflight -= n
                if box:
                    self.ready.append(unit)
                else:
                    unit.scheduled = False
                idle = self.inflight == 0
            if idle:
                self._stop(None)
                return

    def _stop(self, error) -> None:
        """Stop all workers; ``None`` means the stream simply went quiet."""
        with self.lock:
            if self.stopped:
                return
            self.stopped = True
            self.wakeup.notify_all()
        self.dep.delivered_count = self.count
        if error is None:
            self.dep.quiescent()
        else:
            self.dep.abort(error)


# -- deployments ----------------------------------------------------------------------------


class StreamHandle:
    """Awaitable view of a running stream.

    There is one terminal outcome per sink. :meth:`result` returns the value
    of the only sink (or of ``label``) and raises :class:`StreamError` when
    that sink received an error.
    """

    def __init__(self, deployment: Deployment):
        self._dep = deployment
        self.futures: dict[str, Future] = deployment.futures
        self.units = deployment.units

    def outcome(self, label: str | None = None, timeout: float | None = None):
        if label is None:
            if len(self.futures) != 1:
                raise ValueError(f"stream has sinks {sorted(self.futures)}; pass a label")
            (label,) = self.futures
        return self.futures[label].result(timeout)

    def result(self, label: str | None = None, timeout: float | None = None):
        outcome = self.outcome(label, timeout)
        if isinstance(outcome, Error):
            raise StreamError(outcome.error)
        return outcome.value

    def results(self, timeout: float | None = None) -> dict[str, Any]:
        return {label: f.result(timeout) for label, f in self.futures.items()}

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the stream is quiescent or aborted."""
        return self._dep.finished.wait(timeout)

    @property
    def trace(self) -> list[TraceRecord]:
        """Delivery records; waits until the stream is quiescent."""
        self._dep.finished.wait()
        return self._dep.trace

    @property
    def message_count(self) -> int:
        """Messages processed; waits until the stream is quiescent."""
        self._dep.finished.wait()
        return self._dep.delivered_count


class Deployment:
    def __init__(self, max_messages: int, trace: bool | Callable[[TraceRecord], None]):
        self.units: dict[str, Unit] = {}
        self.futures: dict[str, Future] = {}
        self.sink_labels: dict[str, str] = {}
        self.max_messages = max_messages
        self.finished = threading.Event()
        self.delivered_count = 0
        self.trace: list[TraceRecord] = []
        self.scheduler = None
        self.process = _fast_process
        self._seq = itertools.count(1)
        self._trace_lock = threading.Lock()
        if trace:
            self._trace_out = trace if callable(trace) else None
            self.record = self._record
        else:
            self.record = None

    def _record(self, unit: Unit, event):
        with self._trace_lock:
            rec = TraceRecord(next(self._seq), _sender_ref(unit, event), unit.ref, event)
            self.trace.append(rec)
            if self._trace_out is not None:
                self._trace_out(rec)

    def deliver(self, unit: Unit, outcome) -> None:
        label = self.sink_labels[unit.ref]
        fut = self.futures[label]
        if fut.done():
            log.warning("sink %s delivered twice; ignoring %r", label, outcome)
            return
        target = unit.host.target
        if target is not None:
            target(outcome)
        fut.set_result(outcome)

    def _fail_pending(self, error) -> None:
        for label, fut in self.futures.items():
            if not fut.done():
                fut.set_result(Error(error))

    def quiescent(self) -> None:
        self._fail_pending(RuntimeError("stream went quiet before its sinks completed"))
        self.finished.set()

    def abort(self, error) -> None:
        self._fail_pending(error)
        self.finished.set()


def _unit_names(d: Dag) -> dict[int, str]:
    names = {}
    for i, (nid, spec) in enumerate(d.nodes.items()):
        if isinstance(spec, SocketSpec):
            names[nid] = spec.label
        else:
            names[nid] = f"{spec.alias or spec.kind}#{i}"
    return names


def _normalize_bindings(bindings) -> dict[str, Any]:
    pairs = bindings.items() if isinstance(bindings, Mapping) else bindings
    out: dict[str, Any] = {}
    for label, endpoint in pairs:
        if label in out:
            raise DeploymentError(f"socket {label!r} bound twice")
        out[label] = endpoint
    return out


def deploy(
    d: Dag,
    bindings,
    behavior=None,
    *,
    deterministic: bool = False,
    seed: int | None = None,
    trace: bool | Callable[[TraceRecord], None] = False,
    max_messages: int = DEFAULT_MAX_MESSAGES,
    workers: int = 4,
) -> StreamHandle:
    """Deploy a closed DAG with sources and sinks bound to its sockets.

    ``bindings`` maps socket labels to :class:`~metastream.operators.Source`
    or :class:`~metastream.operators.SinkSpec` endpoints. Without a
    ``behavior`` the meta machinery is skipped entirely.
    """
    problems = validate(d)
    if problems:
        raise DeploymentError("DAG is not deployable: " + "; ".join(map(str, problems)))
    bound = _normalize_bindings(bindings)
    sockets = d.sockets()
    missing = sorted(set(sockets) - set(bound))
    extra = sorted(set(bound) - set(sockets))
    if missing or extra:
        raise DeploymentError(f"unbound sockets {missing}, unknown labels {extra}")

    dep = Deployment(max_messages, trace)
    names = _unit_names(d)
    by_node: dict[int, Unit] = {}
    for nid, spec in d.nodes.items():
        if isinstance(spec, OperatorSpec):
            unit = Unit(names[nid], OPERATOR, spec)
        else:
            endpoint = bound[spec.label]
            if spec.direction == SOURCE_SOCKET:
                if not isinstance(endpoint, Source):
                    raise DeploymentError(f"socket {spec.label!r} needs a source, got {endpoint!r}")
                unit = Unit(names[nid], SOURCE, endpoint)
            else:
                if not isinstance(endpoint, SinkSpec):
                    raise DeploymentError(f"socket {spec.label!r} needs a sink, got {endpoint!r}")
                unit = Unit(names[nid], SINK, endpoint)
                dep.futures[spec.label] = Future()
                dep.sink_labels[unit.ref] = spec.label
        unit.deployment = dep
        dep.units[unit.ref] = unit
        by_node[nid] = unit

    for e in d.edges:
        src, dst = by_node[e.src.node], by_node[e.dst.node]
        src.ds[e.src.index] = Peer(dst.ref, e.dst.index)
        dst.us[e.dst.index] = Peer(src.ref, e.src.index)
    for unit in dep.units.values():
        unit.us, unit.ds = tuple(unit.us), tuple(unit.ds)
        unit.up_port = {peer: k for k, peer in enumerate(unit.us)}
        unit.down_port = {peer: k for k, peer in enumerate(unit.ds)}
        unit.ds_units = [dep.units[p.ref] for p in unit.ds]

    if behavior is not None:
        dep.process = _meta_process
        for unit in dep.units.values():
            unit.meta = InlineStream(behavior.meta_for(unit.role))

    if deterministic:
        dep.scheduler = DeterministicScheduler(dep, seed)
    else:
        dep.scheduler = ThreadedScheduler(dep, workers)
    for unit in dep.units.values():
        unit.send = dep.scheduler.send
    handle = StreamHandle(dep)
    dep.scheduler.start(dep.units.values())
    return handle


def deploy_fast(d: Dag, bindings, **kwargs) -> StreamHandle:
    """Deploy with no meta machinery at all."""
    return deploy(d, bindings, None, **kwargs)
