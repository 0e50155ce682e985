from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build, isomorphic, oracle, pipelines
from metastream import counters
from metastream.graph import (
    Dag,
    OperatorSpec,
    close,
    dump,
    dup,
    filter_,
    map_,
    merge,
    sink_socket,
    source_socket,
    validate,
)
from metastream.metac import (
    AddEdge,
    AddOperator,
    CompileError,
    Env,
    MetaItem,
    NameIt,
    add,
    apply_instruction,
    branching_meta,
    compile_dag,
    connect,
    delete,
    disconnect,
    emit_instructions,
    fetch,
    fuse,
    fusion_meta,
    inputs,
    parallel_meta,
    proceed,
    proceed_meta,
    replay,
    run_compile,
    structural_behavior,
    swap,
    timestamp_meta,
    unbox,
)
from metastream.operators import FUNCTIONS, collect_all, list_source, range_source
from metastream.runtime import deploy

sq, inc, even = FUNCTIONS["square"], FUNCTIONS["inc"], FUNCTIONS["even"]


def run(d: Dag, values, **kw):
    src = next(l for l, n in d.sockets().items() if d.nodes[n].direction == "source-socket")
    out = next(l for l, n in d.sockets().items() if d.nodes[n].direction == "sink-socket")
    return deploy(d, {src: list_source(values), out: collect_all()}, deterministic=True, **kw).result()


def operators(d: Dag) -> list[OperatorSpec]:
    return [d.nodes[n] for n in d.operator_ids()]


# -- instructions ----------------------------------------------------------------------


def test_single_map_emits_one_operator():
    f = map_(sq)
    instrs = emit_instructions(f)
    assert len(instrs) == 1
    assert isinstance(instrs[0], AddOperator)
    assert instrs[0].kind == "map" and instrs[0].argument is sq


def test_map_map_emission_shape():
    kinds = [type(i) for i in emit_instructions(map_(sq) >> map_(inc))]
    assert kinds == [AddOperator, NameIt, AddOperator, NameIt, AddEdge]


def test_even_squares_replay_validates():
    d = close(filter_(even) >> map_(sq), ["input", "output"])
    again = replay(emit_instructions(d))
    assert validate(again) == []
    assert isomorphic(again, d)


def test_apply_add_operator_on_empty():
    item = apply_instruction(MetaItem(AddOperator(OperatorSpec("map", sq)), Dag()))
    assert len(item.dag.nodes) == 1
    assert item.env.last in item.dag.nodes


def test_apply_edge_between_names():
    instrs = [AddOperator(OperatorSpec("map", sq)), NameIt("x"),
              AddOperator(OperatorSpec("map", inc)), NameIt("y"), AddEdge("x", 0, "y", 0)]
    d = replay(instrs)
    assert len(d.edges) == 1
    (e,) = d.edges
    assert d.nodes[e.src.node].argument is sq


def test_apply_unbound_alias_fails():
    with pytest.raises(CompileError):
        replay([AddOperator(OperatorSpec("map", sq)), NameIt("x"), AddEdge("z", 0, "x", 0)])


def test_later_name_shadows():
    d = replay([AddOperator(OperatorSpec("map", sq)), NameIt("x"),
                AddOperator(OperatorSpec("map", inc)), NameIt("x")])
    env = Env()
    dag = Dag()
    for i in [AddOperator(OperatorSpec("map", sq)), NameIt("x"),
              AddOperator(OperatorSpec("map", inc)), NameIt("x")]:
        item = apply_instruction(MetaItem(i, dag, env))
        dag, env = item.dag, item.env
    assert fetch(dag, "x", env).argument is inc
    assert len(d.nodes) == 2


# -- primitives ------------------------------------------------------------------------------


def _pair():
    d = map_(sq, alias="a") >> map_(inc, alias="b")
    ids = {s.alias: n for n, s in d.nodes.items()}
    return d, ids["a"], ids["b"]


def test_fetch_by_alias_and_ref_agree():
    d, a, _ = _pair()
    env = Env({"a": a}, a)
    assert fetch(d, "a", env) == fetch(d, a)
    with pytest.raises(CompileError):
        fetch(d, "nope", env)


def test_inputs():
    d, a, b = _pair()
    assert [op.ref for op in inputs(d, b)] == [a]
    assert inputs(d, a) == []
    m = dup(2) >> merge(2)
    g = next(n for n, s in m.nodes.items() if s.kind == "merge")
    assert len(inputs(m, g)) == 2


def test_add_then_fetch_delete_then_fetch():
    d, a, b = _pair()
    c = fuse(fetch(d, a), fetch(d, b))
    d2 = add(d, c)
    assert fetch(d2, c.ref).name == "map"
    d3 = delete(d2, c)
    with pytest.raises(CompileError):
        fetch(d3, c.ref)


def test_delete_removes_incident_edges():
    d, a, b = _pair()
    assert delete(d, a).edges == frozenset()


def test_connect_and_disconnect():
    d, a, b = _pair()
    bare = disconnect(d, a, 0, b, 0)
    assert bare.edges == frozenset()
    with pytest.raises(CompileError):
        disconnect(bare, a, 0, b, 0)
    again = connect(bare, a, 0, b, 0)
    assert again.edges == d.edges
    with pytest.raises(CompileError):
        connect(again, a, 0, b, 0)  # both ports already taken


def test_swap_reverses_order():
    d, a, b = _pair()
    closed = close(swap(d, a, b), ["i", "o"])
    assert run(closed, [3]) == [16]  # inc then square
    assert swap(d, a, a) == d
    m = merge(2) | map_(sq)
    ids = list(m.nodes)
    with pytest.raises(CompileError):
        swap(m, ids[0], ids[1])


def test_fuse_maps_composes():
    d, a, b = _pair()
    c = fuse(fetch(d, a), fetch(d, b))
    assert c.name == "map"
    assert c.argument(3) == 10
    assert c.spec.alias == "fused(a,b)"


def test_fuse_identities():
    ident = FUNCTIONS["identity"]
    d = map_(ident) >> map_(ident)
    a, b = list(d.nodes)
    c = fuse(fetch(d, a), fetch(d, b))
    assert all(c.argument(v) == v for v in range(-3, 4))


def test_fuse_filters_and_mixed():
    d = filter_(even) >> filter_(FUNCTIONS["gt0"]) >> map_(sq)
    f1, f2, m = list(d.nodes)
    both = fuse(fetch(d, f1), fetch(d, f2))
    assert both.name == "filter"
    assert [both.argument(v) for v in (-2, 2, 3)] == [False, True, False]
    mixed = fuse(fetch(d, f2), fetch(d, m))
    assert mixed.name == "fused"


def test_fuse_merge_rejected():
    d = merge(1) >> map_(sq)
    g, m = list(d.nodes)
    with pytest.raises(CompileError):
        fuse(fetch(d, g), fetch(d, m))


# -- run_compile -----------------------------------------------------------------------------


def test_proceed_meta_is_identity():
    d = close(dup(2) >> (map_(sq) | filter_(even)) >> merge(2), ["i", "o"])
    assert isomorphic(compile_dag(d, proceed_meta()), d)


@settings(max_examples=40, deadline=None)
@given(pipelines(max_depth=6))
def test_round_trip_property(stages):
    d = close(build(stages), ["i", "o"])
    assert isomorphic(run_compile(emit_instructions(d), proceed_meta()), d)


def test_compile_rejection_names_violation():
    def unhook_last_edge(item):
        if isinstance(item.instr, AddEdge) and item.instr.dst == "o":
            return MetaItem((), item.dag, item.env)
        return item

    meta = source_socket("src") >> map_(unhook_last_edge) >> proceed() >> sink_socket("snk")
    d = close(map_(sq), ["i", "o"])
    with pytest.raises(CompileError) as info:
        run_compile(emit_instructions(d), meta)
    assert {v.constraint for v in info.value.violations} >= {1, 3}


def test_no_meta_bypasses_everything():
    d = close(map_(sq) >> map_(inc), ["i", "o"])
    with counters.counting() as c:
        assert compile_dag(d, None) is d
        assert c["meta_items"] == 0


def test_meta_items_are_counted():
    d = close(map_(sq), ["i", "o"])
    with counters.counting() as c:
        compile_dag(d, proceed_meta())
        assert c["meta_items"] > 0


# -- fusion ------------------------------------------------------------------------------------


def test_fusion_of_two_maps():
    d = close(map_(sq) >> map_(inc), ["i", "o"])
    fused = compile_dag(d, fusion_meta())
    assert len(fused.operator_ids()) == 1
    assert run(fused, [1, 2, 3, 4]) == [2, 5, 10, 17]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["square", "inc", "double", "identity"]), min_size=1, max_size=6),
       st.lists(st.integers(-20, 20), max_size=30))
def test_fusion_of_map_chains(names, values):
    d = close(build([("map", n) for n in names]), ["i", "o"])
    fused = compile_dag(d, fusion_meta())
    assert len(fused.operator_ids()) == 1
    assert run(fused, values) == run(d, values)


@settings(max_examples=40, deadline=None)
@given(pipelines(max_depth=6, allow_pair=False), st.lists(st.integers(-20, 20), max_size=30))
def test_fusion_soundness(stages, values):
    d = close(build(stages), ["i", "o"])
    fused = compile_dag(d, fusion_meta())
    assert len(fused.operator_ids()) <= len(d.operator_ids())
    assert run(fused, values) == oracle(stages, values)


def test_fusion_restricted_to_map_pairs_leaves_alternation():
    d = close(map_(sq) >> filter_(even) >> map_(inc), ["i", "o"])
    fused = compile_dag(d, fusion_meta(pairs={("map", "map")}))
    assert [s.kind for s in operators(fused)] == ["map", "filter", "map"]


def test_fusion_keeps_fan_out_intact():
    d = close(map_(sq) >> dup(2) >> (map_(inc) | map_(inc)) >> merge(2), ["i", "o"])
    fused = compile_dag(d, fusion_meta())
    assert validate(fused) == []
    assert Counter(run(fused, [1, 2])) == Counter(run(d, [1, 2]))


# -- parallelization ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 4])
def test_parallel_map_multiset(n):
    d = close(map_(sq), ["i", "o"])
    par = compile_dag(d, parallel_meta(n))
    assert len(par.operator_ids()) == len(d.operator_ids()) + n + 1
    out = deploy(par, {"i": range_source(1, 10), "o": collect_all()}).result()
    assert Counter(out) == Counter(v * v for v in range(1, 11))


def test_parallel_only_tagged():
    d = close(map_(sq, tags=("parallel",)) >> map_(inc), ["i", "o"])
    par = compile_dag(d, parallel_meta(3, only_tagged=True))
    kinds = Counter(s.kind for s in operators(par))
    assert kinds == Counter({"map": 4, "balance": 1, "merge": 1})


def test_parallel_every_map_of_a_chain():
    d = close(map_(sq) >> map_(inc), ["i", "o"])
    par = compile_dag(d, parallel_meta(2))
    assert len(par.operator_ids()) == 2 + 2 * 3
    out = run(par, list(range(10)))
    assert sorted(out) == sorted(v * v + 1 for v in range(10))


# -- timestamping -------------------------------------------------------------------------------


def test_timestamp_inserts_stamp_per_operator_input():
    d = close(map_(sq) >> filter_(even) >> map_(inc), ["i", "o"])
    ts = compile_dag(d, timestamp_meta())
    stamps = [s for s in operators(ts) if s.alias and s.alias.startswith("stamp(")]
    assert len(stamps) == 3


def test_timestamp_boxes_are_transparent():
    ticks = iter(range(10**6))
    d = close(map_(sq) >> filter_(even) >> map_(inc), ["i", "o"])
    ts = compile_dag(d, timestamp_meta(clock=lambda: next(ticks)))
    values = list(range(-5, 6))
    boxed = run(ts, values)
    assert [unbox(b) for b in boxed] == run(d, values)
    for b in boxed:
        assert len(b.stamps) == 3
        times = [t for _, t in b.stamps]
        assert times == sorted(times)


def test_timestamp_empty_stream():
    d = close(map_(sq), ["i", "o"])
    assert run(compile_dag(d, timestamp_meta()), []) == []


def test_timestamp_scan():
    d = close(map_(sq) >> build([("scan", "sum", 0)]), ["i", "o"])
    out = run(compile_dag(d, timestamp_meta()), [1, 2, 3])
    assert [unbox(b) for b in out] == [1, 5, 14]


# -- registry ------------------------------------------------------------------------------------


def test_structural_registry():
    assert structural_behavior("none") is None
    for name in ("fusion", "timestamp", "parallel:2", "parallel:3:tagged"):
        assert isinstance(structural_behavior(name), Dag)
    with pytest.raises(ValueError):
        structural_behavior("unroll")


def test_branching_meta_is_closed():
    meta = branching_meta(map_(lambda i: i), map_(lambda i: i))
    assert validate(meta) == []


def test_golden_fusion_dump():
    d = close(map_(sq) >> map_(inc) >> filter_(even), ["input", "output"])
    assert dump(compile_dag(d, fusion_meta())) == (
        "node 0 source-socket input\n"
        "node 1 sink-socket output\n"
        "node 2 fused fused(fused(map,map),filter)\n"
        "edge 0.0 -> 2.0\n"
        "edge 2.0 -> 1.0\n"
    )
