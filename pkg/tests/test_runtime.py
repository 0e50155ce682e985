from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build, int_lists, oracle, pipelines
from metastream import counters
from metastream.graph import (
    balance,
    close,
    dup,
    filter_,
    map_,
    merge,
    parallel,
    sink_socket,
    source_socket,
    zip_,
)
from metastream.metar import Behavior, base_dag, closed, effects_dag, identity
from metastream.operators import FUNCTIONS, collect_all, for_each, list_source, range_source
from metastream.protocol import Error, Init, MetaFault, Next, StreamError, Tick, Value
from metastream.runtime import (
    BudgetExceeded,
    DeploymentError,
    MetaEvent,
    Snapshot,
    TraceRecord,
    deploy,
    deploy_fast,
)

sq, inc, even = FUNCTIONS["square"], FUNCTIONS["inc"], FUNCTIONS["even"]


def linear(stages):
    return close(build(stages), ["src", "out"])


def bindings(values):
    return {"src": list_source(values), "out": collect_all()}


# -- push semantics -----------------------------------------------------------------------


def test_squares_of_1_to_50():
    d = close(map_(sq), ["src", "out"])
    out = deploy(d, {"src": range_source(1, 50), "out": collect_all()}).result()
    assert out == [v * v for v in range(1, 51)]


def test_empty_source_completes_with_empty_list():
    d = close(map_(sq), ["src", "out"])
    assert deploy(d, bindings([]), deterministic=True).result() == []


def test_socket_to_socket():
    d = source_socket("src") >> sink_socket("out")
    assert deploy(d, bindings([3, 1, 2])).result() == [3, 1, 2]


@settings(max_examples=60, deadline=None)
@given(pipelines(), int_lists(200), st.integers(0, 2**16))
def test_linear_pipeline_matches_oracle_deterministic(stages, values, seed):
    out = deploy(linear(stages), bindings(values), deterministic=True, seed=seed).result()
    assert out == oracle(stages, values)


@settings(max_examples=25, deadline=None)
@given(pipelines(), int_lists(200))
def test_linear_pipeline_matches_oracle_threaded(stages, values):
    out = deploy(linear(stages), bindings(values), workers=3).result(timeout=30)
    assert out == oracle(stages, values)


@settings(max_examples=25, deadline=None)
@given(int_lists(200), st.integers(1, 4))
def test_balance_merge_preserves_multiset(values, n):
    d = close(balance(n) >> parallel(map_(sq) for _ in range(n)) >> merge(n), ["src", "out"])
    out = deploy(d, bindings(values)).result(timeout=30)
    assert Counter(out) == Counter(v * v for v in values)


@settings(max_examples=25, deadline=None)
@given(int_lists(100), st.integers(0, 1000))
def test_dup_zip_pairs_in_order(values, seed):
    d = close(dup(2) >> (map_(sq) | map_(inc)) >> zip_(), ["src", "out"])
    out = deploy(d, bindings(values), deterministic=True, seed=seed).result()
    assert out == [(v * v, v + 1) for v in values]


def test_two_sources_two_sinks():
    d = close(map_(sq) | filter_(even), ["a", "b", "x", "y"])
    h = deploy(d, {"a": range_source(1, 3), "b": range_source(1, 6),
                   "x": collect_all(), "y": collect_all()})
    assert h.results(timeout=10) == {"x": Value([1, 4, 9]), "y": Value([2, 4, 6])}
    with pytest.raises(ValueError):
        h.result()
    assert h.result("y") == [2, 4, 6]


def test_for_each_sink_and_target():
    seen, outcomes = [], []
    d = close(map_(inc), ["src", "out"])
    h = deploy(d, {"src": list_source([1, 2]), "out": for_each(seen.append, outcomes.append)},
               deterministic=True)
    assert h.result() is None
    assert seen == [2, 3]
    assert outcomes == [Value(None)]


def test_bindings_as_pairs():
    d = close(map_(sq), ["src", "out"])
    assert deploy(d, [("src", list_source([2])), ("out", collect_all())]).result() == [4]


# -- errors ---------------------------------------------------------------------------------


def _boom(v):
    if v == 3:
        raise ValueError("three")
    return v


@pytest.mark.parametrize("deterministic", [True, False])
def test_operator_exception_reaches_sink(deterministic):
    d = close(map_(_boom) >> map_(sq), ["src", "out"])
    h = deploy(d, bindings([1, 2, 3, 4]), deterministic=deterministic)
    with pytest.raises(StreamError) as info:
        h.result(timeout=10)
    assert isinstance(info.value.error, ValueError)


def test_failing_callback_is_an_error_outcome():
    def bad(v):
        raise KeyError(v)

    d = close(map_(sq), ["src", "out"])
    h = deploy(d, {"src": list_source([1]), "out": for_each(bad)}, deterministic=True)
    assert isinstance(h.outcome(), Error)


def test_budget_exhaustion_deterministic():
    d = close(map_(sq), ["src", "out"])
    h = deploy(d, {"src": range_source(1, 10_000), "out": collect_all()},
               deterministic=True, max_messages=100)
    outcome = h.outcome()
    assert isinstance(outcome, Error) and isinstance(outcome.error, BudgetExceeded)


def test_budget_exhaustion_threaded():
    d = close(map_(sq), ["src", "out"])
    h = deploy(d, {"src": range_source(1, 10_000), "out": collect_all()}, max_messages=500)
    outcome = h.outcome(timeout=10)
    assert isinstance(outcome, Error) and isinstance(outcome.error, BudgetExceeded)


def test_invalid_dag_is_not_deployed():
    with pytest.raises(DeploymentError):
        deploy(source_socket("src") >> map_(sq), {"src": range_source(1, 2)})


def test_unbound_and_unknown_labels():
    d = close(map_(sq), ["src", "out"])
    with pytest.raises(DeploymentError, match="unbound"):
        deploy(d, {"src": range_source(1, 2)})
    with pytest.raises(DeploymentError):
        deploy(d, {"src": range_source(1, 2), "out": collect_all(), "zzz": collect_all()})
    with pytest.raises(DeploymentError):
        deploy(d, [("src", range_source(1, 2)), ("src", range_source(1, 2)), ("out", collect_all())])


def test_endpoint_kinds_are_checked():
    d = close(map_(sq), ["src", "out"])
    with pytest.raises(DeploymentError, match="needs a source"):
        deploy(d, {"src": collect_all(), "out": collect_all()})
    with pytest.raises(DeploymentError, match="needs a sink"):
        deploy(d, {"src": range_source(1, 2), "out": range_source(1, 2)})


# -- meta path ------------------------------------------------------------------------------


def _behavior(meta):
    return Behavior("test", meta, meta, meta)


def test_meta_program_dropping_a_snapshot_faults():
    def no_ticks(me: MetaEvent) -> bool:
        return type(me.event) is not Tick

    meta = closed(filter_(no_ticks) >> base_dag() >> effects_dag())
    h = deploy(close(map_(sq), ["src", "out"]), bindings([1, 2]), _behavior(meta),
               deterministic=True)
    outcome = h.outcome()
    assert isinstance(outcome, Error)
    assert isinstance(outcome.error, MetaFault)


def test_meta_program_doubling_snapshots_faults():
    meta = closed(base_dag() >> effects_dag() >> dup(2) >> merge(2))
    h = deploy(close(map_(sq), ["src", "out"]), bindings([1]), _behavior(meta))
    outcome = h.outcome(timeout=10)
    assert isinstance(outcome, Error) and isinstance(outcome.error, MetaFault)


def test_meta_program_raising_faults():
    def explode(me):
        raise RuntimeError("meta bug")

    meta = closed(map_(explode))
    h = deploy(close(map_(sq), ["src", "out"]), bindings([1]), _behavior(meta),
               deterministic=True)
    assert isinstance(h.outcome().error, MetaFault)


def test_silent_stream_fails_its_sinks():
    def no_effects_on_tick(me: MetaEvent) -> Snapshot:
        return me.snapshot

    from metastream.metar import event_is, event_is_not, routed

    meta = routed([
        (event_is(Tick), map_(no_effects_on_tick)),
        (event_is_not(Tick), base_dag() >> effects_dag()),
    ])
    for deterministic in (True, False):
        h = deploy(close(map_(sq), ["src", "out"]), bindings([1]), _behavior(meta),
                   deterministic=deterministic)
        outcome = h.outcome(timeout=10)
        assert isinstance(outcome, Error)
        assert "went quiet" in str(outcome.error)


def test_no_behavior_builds_no_meta_events():
    d = close(map_(sq) >> map_(inc), ["src", "out"])
    with counters.counting() as c:
        deploy_fast(d, bindings(range(100)), deterministic=True).result()
        assert c["meta_events"] == 0
        assert c["meta_items"] == 0


def test_identity_behavior_sees_every_message():
    d = close(map_(sq), ["src", "out"])
    with counters.counting() as c:
        h = deploy(d, bindings(range(10)), identity(), deterministic=True)
        assert h.result() == [v * v for v in range(10)]
        assert c["meta_events"] == h.message_count


@settings(max_examples=30, deadline=None)
@given(pipelines(max_depth=5), int_lists(50))
def test_identity_behavior_is_transparent(stages, values):
    out = deploy(linear(stages), bindings(values), identity(), deterministic=True).result()
    assert out == oracle(stages, values)


# -- tracing and scheduling ------------------------------------------------------------------


def test_trace_records():
    d = close(map_(sq), ["src", "out"])
    h = deploy(d, {"src": range_source(1, 2), "out": collect_all()}, deterministic=True, trace=True)
    h.result()
    trace = h.trace
    assert [r.seq for r in trace] == list(range(1, len(trace) + 1))
    assert len(trace) == h.message_count
    inits = [r for r in trace if type(r.event) is Init]
    assert len(inits) == 3 and all(r.src == "runtime" for r in inits)
    ticks = [r for r in trace if type(r.event) is Tick]
    assert all(r.src == r.dst == "src" for r in ticks)
    nexts = [r for r in trace if type(r.event) is Next and r.dst == "out"]
    assert [r.event.value for r in nexts] == [1, 4]
    assert str(nexts[0]) == f"seq {nexts[0].seq} map#1 -> out Next(1)"


def test_trace_callback_gets_each_record():
    got = []
    d = close(map_(sq), ["src", "out"])
    h = deploy(d, bindings([1, 2]), trace=got.append)
    h.result(timeout=10)
    h.wait(10)
    assert got == h.trace
    assert all(isinstance(r, TraceRecord) for r in got)


def test_untraced_stream_has_empty_trace():
    d = close(map_(sq), ["src", "out"])
    h = deploy(d, bindings([1]), deterministic=True)
    assert h.trace == [] and h.message_count > 0


def test_same_seed_same_trace():
    d = close(dup(2) >> (map_(sq) | map_(inc)) >> merge(2), ["src", "out"])

    def run(seed):
        h = deploy(d, bindings(range(20)), deterministic=True, seed=seed, trace=True)
        h.result()
        return [str(r) for r in h.trace]

    assert run(7) == run(7)
    assert any(run(s) != run(7) for s in range(8, 20))


def test_unit_names():
    d = close(map_(sq, alias="squares") >> filter_(even), ["src", "out"])
    h = deploy(d, bindings([]), deterministic=True)
    assert sorted(h.units) == ["filter#2", "out", "squares#1", "src"]
