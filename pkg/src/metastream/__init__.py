"""An extensible stream DSL.

Streams are DAGs of operators built with ``>>`` (sequential) and ``|``
(side by side), closed with actor sockets and deployed as communicating
units. Two meta levels can change how a stream is built and how it runs:

* compile-time meta programs rewrite the instruction stream that builds the
  DAG (:mod:`metastream.metac`);
* run-time behaviors intercept every protocol message a unit receives
  (:mod:`metastream.metar`).
"""

from .graph import (
    CompositionError,
    Dag,
    balance,
    close,
    dump,
    dup,
    filter_,
    map_,
    merge,
    scan,
    sink_socket,
    source_socket,
    validate,
    zip_,
)
from .metac import compile_dag, fusion_meta, parallel_meta, structural_behavior, timestamp_meta
from .metar import (
    Behavior,
    XorCipher,
    behavior_named,
    encryption,
    identity,
    logging_behavior,
    pull,
    smart_pull,
)
from .operators import FUNCTIONS, collect_all, for_each, list_source, range_source
from .pipeline import parse_pipeline, print_pipeline
from .protocol import StreamError
from .runtime import StreamHandle, deploy, deploy_fast

__all__ = [
    "Behavior", "CompositionError", "Dag", "FUNCTIONS", "StreamError", "StreamHandle",
    "XorCipher", "balance", "behavior_named", "close", "collect_all", "compile_dag", "deploy",
    "deploy_fast", "dump", "dup", "encryption", "filter_", "for_each", "fusion_meta", "identity",
    "list_source", "logging_behavior", "map_", "merge", "parallel_meta", "parse_pipeline",
    "print_pipeline", "pull", "range_source", "scan", "sink_socket", "smart_pull",
    "source_socket", "structural_behavior", "timestamp_meta", "validate", "zip_",
]
