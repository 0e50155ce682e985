from __future__ import annotations

from hypothesis import strategies as st

from metastream.graph import filter_, map_, scan
from metastream.operators import FUNCTIONS

MAP_FNS = ["identity", "square", "inc", "double", "pair"]
FILTER_FNS = ["even", "odd", "gt0"]
SCAN_FNS = ["sum"]


def oracle(stages, values):
    """Sequential reference: apply each stage to the whole list, in order.

    Written against plain Python semantics only, independent of the handlers.
    """
    out = list(values)
    for stage in stages:
        kind, name = stage[0], stage[1]
        if kind == "map":
            if name == "identity":
                out = list(out)
            elif name == "square":
                out = [v * v for v in out]
            elif name == "inc":
                out = [v + 1 for v in out]
            elif name == "double":
                out = [v * 2 for v in out]
            elif name == "pair":
                out = [(v, v) for v in out]
        elif kind == "filter":
            if name == "even":
                out = [v for v in out if v % 2 == 0]
            elif name == "odd":
                out = [v for v in out if v % 2 == 1]
            elif name == "gt0":
                out = [v for v in out if v > 0]
        elif kind == "scan":
            acc, acc_out = stage[2], []
            for v in out:
                acc = acc + v
                acc_out.append(acc)
            out = acc_out
    return out


def build(stages):
    """Open DAG for a stage list; ``None`` for the empty list."""
    d = None
    for stage in stages:
        kind, name = stage[0], stage[1]
        if kind == "map":
            part = map_(FUNCTIONS[name])
        elif kind == "filter":
            part = filter_(FUNCTIONS[name])
        else:
            part = scan(FUNCTIONS[name], stage[2])
        d = part if d is None else d >> part
    return d


def stage_text(stage) -> str:
    if stage[0] == "scan":
        return f"scan({stage[1]}, {stage[2]})"
    return f"{stage[0]}({stage[1]})"


# "pair" makes tuples, after which only identity maps keep types sane
_numeric_stage = st.one_of(
    st.tuples(st.just("map"), st.sampled_from(["identity", "square", "inc", "double"])),
    st.tuples(st.just("filter"), st.sampled_from(FILTER_FNS)),
    st.tuples(st.just("scan"), st.just("sum"), st.integers(-5, 5)),
)


@st.composite
def pipelines(draw, max_depth=8, allow_pair=True):
    stages = draw(st.lists(_numeric_stage, min_size=1, max_size=max_depth))
    if allow_pair and len(stages) < max_depth and draw(st.booleans()):
        stages.append(("map", "pair"))
    return [tuple(s) for s in stages]


def int_lists(max_size=1000):
    return st.lists(st.integers(-50, 50), max_size=max_size)


def _nx(d):
    import networkx as nx

    g = nx.MultiDiGraph()
    for nid, spec in d.nodes.items():
        g.add_node(nid, spec=spec)
    for e in d.edges:
        g.add_edge(e.src.node, e.dst.node, ports=(e.src.index, e.dst.index))
    return g


def isomorphic(a, b) -> bool:
    """Bijection on nodes preserving kind, argument identity and port-labelled edges."""
    import networkx as nx

    return nx.is_isomorphic(
        _nx(a),
        _nx(b),
        node_match=lambda x, y: x["spec"] == y["spec"],
        edge_match=lambda x, y: sorted(v["ports"] for v in x.values())
        == sorted(v["ports"] for v in y.values()),
    )


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
