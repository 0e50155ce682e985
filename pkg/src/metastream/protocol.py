"""Message vocabulary of the stream protocol.

Events travel between deployed units. Actions are what an event handler
answers with; the effects stage turns actions back into events.
"""

from __future__ import annotations

from typing import Any, NamedTuple


class Peer(NamedTuple):
    """The far end of a connection: a unit and the port on *that* unit."""

    ref: str
    port: int


# -- events -----------------------------------------------------------------


class Init(NamedTuple):
    def __repr__(self):
        return "Init"


class Next(NamedTuple):
    value: Any
    sender: Peer | None = None

    def __repr__(self):
        return f"Next({self.value!r})"


class Err(NamedTuple):
    error: Any
    sender: Peer | None = None

    def __repr__(self):
        return f"Err({self.error!r})"


class Complete(NamedTuple):
    sender: Peer | None = None

    def __repr__(self):
        return "Complete"


class Tick(NamedTuple):
    def __repr__(self):
        return "Tick"


class Demand(NamedTuple):
    sender: Peer | None = None

    def __repr__(self):
        return "Demand"


INIT = Init()
TICK = Tick()

Event = Init | Next | Err | Complete | Tick | Demand


# -- handler actions ----------------------------------------------------------


class Emit(NamedTuple):
    value: Any
    ports: tuple[int, ...] = (0,)


class Skip(NamedTuple):
    def __repr__(self):
        return "Skip"


class Completed(NamedTuple):
    def __repr__(self):
        return "Completed"


class Fail(NamedTuple):
    error: Any


class Initialized(NamedTuple):
    def __repr__(self):
        return "Initialized"


class TickValue(NamedTuple):
    value: Any


class Accepted(NamedTuple):
    def __repr__(self):
        return "Accepted"


class Deliver(NamedTuple):
    outcome: Any


SKIP = Skip()
COMPLETED = Completed()
INITIALIZED = Initialized()
ACCEPTED = Accepted()


class Response(NamedTuple):
    """What a handler returns: the new user state and one action."""

    state: Any
    action: Any


# -- terminal outcomes ------------------------------------------------------------


class Value(NamedTuple):
    value: Any


class Error(NamedTuple):
    error: Any


class StreamError(RuntimeError):
    """Raised when awaiting a stream whose sink received an error."""

    def __init__(self, error):
        super().__init__(error)
        self.error = error


class MetaFault(RuntimeError):
    """A run-time meta program did not hand back exactly one snapshot."""


def _typed_eq(self, other):
    return type(self) is type(other) and tuple.__eq__(self, other)


def _typed_ne(self, other):
    return not _typed_eq(self, other)


def _typed_hash(self):
    return hash((type(self).__name__, *self))


# plain tuples compare equal across types, e.g. Skip() == Init()
for _cls in (Init, Next, Err, Complete, Tick, Demand, Emit, Skip, Completed, Fail,
             Initialized, TickValue, Accepted, Deliver, Response, Value, Error):
    _cls.__eq__ = _typed_eq
    _cls.__ne__ = _typed_ne
    _cls.__hash__ = _typed_hash
