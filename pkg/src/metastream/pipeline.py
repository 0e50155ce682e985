"""Textual pipeline expressions.

Grammar::

    pipeline := item ('~>' item)+
    item     := call | '(' chain ('|||' chain)* ')'
    chain    := item ('~>' item)*
    call     := NAME [ '(' [arg (',' arg)*] ')' ]
    arg      := INT | STRING | NAME

The first item is the source (``range(a,b)``, ``list(v,...)`` or a group of
sources), the last one the sink (``collect``, ``foreach(print)`` or a group
of sinks), everything in between is a stage: ``map(fn)``, ``map(fn,
parallel)``, ``filter(fn)``, ``scan(fn, literal)``, ``dup(n)``,
``balance(n)``, ``merge(n)``, ``zip`` or a group of stage chains. Functions
must come from :data:`~metastream.operators.FUNCTIONS`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

from .graph import (
    Dag,
    balance,
    compose_prefix,
    dup,
    filter_,
    map_,
    merge,
    parallel,
    scan,
    sink_socket,
    source_socket,
    zip_,
)
from .operators import FUNCTIONS, collect_all, for_each, list_source, range_source


class ParseError(ValueError):
    def __init__(self, message: str, pos: int | None = None):
        super().__init__(message if pos is None else f"at column {pos + 1}: {message}")
        self.pos = pos


@dataclass(frozen=True)
class Ident:
    name: str


Arg = Union[int, str, Ident]


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple = ()
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Group:
    branches: tuple  # of tuples of items
    pos: int = field(default=0, compare=False)


Item = Union[Call, Group]


@dataclass(frozen=True)
class Pipeline:
    items: tuple

    @property
    def source(self) -> Item:
        return self.items[0]

    @property
    def stages(self) -> tuple:
        return self.items[1:-1]

    @property
    def sink(self) -> Item:
        return self.items[-1]


# -- tokens ----------------------------------------------------------------------------

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<arrow>~>)
      | (?P<bar>\|\|\|)
      | (?P<punct>[(),])
      | (?P<int>-?\d+)
      | (?P<str>'[^']*'|"[^"]*")
      | (?P<name>[A-Za-z_]\w*)
    )""",
    re.VERBOSE,
)


def tokenize(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = len(text) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of input"
            raise ParseError(f"expected {want!r}, got {got!r}", tok[2])
        self.i += 1
        return tok

    def at(self, kind: str, value: str | None = None) -> bool:
        tok = self.peek()
        return tok[0] == kind and (value is None or tok[1] == value)

    def pipeline(self) -> Pipeline:
        items = [self.item()]
        while self.at("arrow"):
            self.take("arrow")
            items.append(self.item())
        if not self.at("end"):
            tok = self.peek()
            raise ParseError(f"expected '~>' or end of input, got {tok[1]!r}", tok[2])
        if len(items) < 2:
            raise ParseError("a pipeline needs at least a source and a sink", items[0].pos)
        return Pipeline(tuple(items))

    def item(self) -> Item:
        if self.at("punct", "("):
            pos = self.take("punct", "(")[2]
            branches = [self.chain()]
            while self.at("bar"):
                self.take("bar")
                branches.append(self.chain())
            self.take("punct", ")")
            return Group(tuple(branches), pos)
        return self.call()

    def chain(self) -> tuple:
        items = [self.item()]
        while self.at("arrow"):
            self.take("arrow")
            items.append(self.item())
        return tuple(items)

    def call(self) -> Call:
        _, name, pos = self.take("name")
        args = []
        if self.at("punct", "("):
            self.take("punct", "(")
            if not self.at("punct", ")"):
                args.append(self.arg())
                while self.at("punct", ","):
                    self.take("punct", ",")
                    args.append(self.arg())
            self.take("punct", ")")
        return Call(name, tuple(args), pos)

    def arg(self) -> Arg:
        kind, value, pos = self.peek()
        self.i += 1
        if kind == "int":
            return int(value)
        if kind == "str":
            return value[1:-1]
        if kind == "name":
            return Ident(value)
        raise ParseError(f"expected an argument, got {value or 'end of input'!r}", pos)


def parse_pipeline(text: str) -> Pipeline:
    """Parse ``text``; raises :class:`ParseError` with the offending column."""
    return _Parser(text).pipeline()


# -- printing ----------------------------------------------------------------------------


def _print_arg(a: Arg) -> str:
    if isinstance(a, Ident):
        return a.name
    if isinstance(a, str):
        return repr(a) if "'" not in a else f'"{a}"'
    return str(a)


def _print_item(item: Item) -> str:
    if isinstance(item, Group):
        return "(" + " ||| ".join(" ~> ".join(map(_print_item, b)) for b in item.branches) + ")"
    if not item.args:
        return item.name
    return f"{item.name}(" + ", ".join(map(_print_arg, item.args)) + ")"


def print_pipeline(p: Pipeline) -> str:
    return " ~> ".join(map(_print_item, p.items))


# -- lowering --------------------------------------------------------------------------------


def _fn(call: Call, arg) -> callable:
    if not isinstance(arg, Ident):
        raise ParseError(f"{call.name} expects a function name, got {arg!r}", call.pos)
    try:
        return FUNCTIONS[arg.name]
    except KeyError:
        known = ", ".join(sorted(FUNCTIONS))
        raise ParseError(f"unknown function {arg.name!r} (known: {known})", call.pos) from None


def _count(call: Call) -> int:
    if len(call.args) != 1 or not isinstance(call.args[0], int) or call.args[0] < 1:
        raise ParseError(f"{call.name} expects one positive integer", call.pos)
    return call.args[0]


def _need(call: Call, n: int) -> None:
    if len(call.args) != n:
        raise ParseError(f"{call.name} takes {n} argument(s), got {len(call.args)}", call.pos)


def _stage(call: Call) -> Dag:
    name = call.name
    if name == "map":
        if len(call.args) not in (1, 2):
            raise ParseError("map takes a function and optionally 'parallel'", call.pos)
        tags = ()
        if len(call.args) == 2:
            if call.args[1] != Ident("parallel"):
                raise ParseError("the second argument of map can only be 'parallel'", call.pos)
            tags = ("parallel",)
        return map_(_fn(call, call.args[0]), tags=tags)
    if name == "filter":
        _need(call, 1)
        return filter_(_fn(call, call.args[0]))
    if name == "scan":
        _need(call, 2)
        if isinstance(call.args[1], Ident):
            raise ParseError("the seed of scan must be a literal", call.pos)
        return scan(_fn(call, call.args[0]), call.args[1])
    if name == "dup":
        return dup(_count(call))
    if name == "balance":
        return balance(_count(call))
    if name == "merge":
        return merge(_count(call))
    if name == "zip":
        _need(call, 0)
        return zip_()
    raise ParseError(f"unknown stage {name!r}", call.pos)


def _stages(item: Item) -> Dag:
    if isinstance(item, Call):
        return _stage(item)
    return parallel(_chain(branch) for branch in item.branches)


def _chain(items) -> Dag:
    d = _stages(items[0])
    for item in items[1:]:
        d = d >> _stages(item)
    return d


def _flat(item: Item, what: str) -> list[Call]:
    if isinstance(item, Call):
        return [item]
    calls = []
    for branch in item.branches:
        if len(branch) != 1:
            raise ParseError(f"a group of {what}s cannot contain chains", item.pos)
        calls.extend(_flat(branch[0], what))
    return calls


def _source(call: Call):
    if call.name == "range":
        _need(call, 2)
        if not all(isinstance(a, int) for a in call.args):
            raise ParseError("range takes two integers", call.pos)
        return range_source(*call.args)
    if call.name == "list":
        if any(isinstance(a, Ident) for a in call.args):
            raise ParseError("list takes literals only", call.pos)
        return list_source(call.args)
    raise ParseError(f"unknown source {call.name!r}", call.pos)


def _sink(call: Call, printer):
    if call.name == "collect":
        _need(call, 0)
        return collect_all()
    if call.name == "foreach":
        if call.args != (Ident("print"),):
            raise ParseError("foreach only supports print", call.pos)
        return for_each(printer)
    raise ParseError(f"unknown sink {call.name!r}", call.pos)


@dataclass
class Lowered:
    dag: Dag
    bindings: dict
    sink_labels: list[str]


def lower(p: Pipeline, printer=print) -> Lowered:
    """Build the closed DAG and its endpoint bindings for ``p``."""
    sources = _flat(p.source, "source")
    sinks = _flat(p.sink, "sink")
    bindings = {}
    src_labels = [f"src{i}" for i in range(len(sources))]
    sink_labels = ["out"] if len(sinks) == 1 else [f"out{i}" for i in range(len(sinks))]
    for label, call in zip(src_labels, sources):
        bindings[label] = _source(call)
    for label, call in zip(sink_labels, sinks):
        bindings[label] = _sink(call, printer)
    # lenient pairing: arity mismatches surface as validation errors
    d = parallel(source_socket(label) for label in src_labels)
    for item in p.stages:
        d = compose_prefix(d, _stages(item))
    d = compose_prefix(d, parallel(sink_socket(label) for label in sink_labels))
    return Lowered(d, bindings, sink_labels)
