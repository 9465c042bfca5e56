"""kvcmeta: KV-cache prefix-prefill metadata workload analysis and benchmarking.

The package splits into trace ingestion (`trace`), workload characterization
(`analysis`), the reference metadata store (`store`), the wire protocol and
TCP service (`protocol`, `service`), the trace-replay benchmark (`bench`),
synthetic workload generation (`synth`), report rendering (`report`), and
the command-line front end (`cli`).
"""

from .trace import Trace, TraceRequest, parse_trace, serialize_trace, load_trace, save_trace
from .store import CacheConfig, HybridMetaStore, IndexStats, encode_key, decode_key, hash_key
from .service import Backend, RemoteBackend, StoreServer, TransportError, connect, serve
from .bench import OpStream, LatencyLog, compile_ops, replay, percentile, interval_stats, normalize
from .synth import SynthConfig, generate, fit_report

__version__ = "0.1.0"

__all__ = [
    "Trace",
    "TraceRequest",
    "parse_trace",
    "serialize_trace",
    "load_trace",
    "save_trace",
    "CacheConfig",
    "HybridMetaStore",
    "IndexStats",
    "encode_key",
    "decode_key",
    "hash_key",
    "Backend",
    "RemoteBackend",
    "StoreServer",
    "TransportError",
    "connect",
    "serve",
    "OpStream",
    "LatencyLog",
    "compile_ops",
    "replay",
    "percentile",
    "interval_stats",
    "normalize",
    "SynthConfig",
    "generate",
    "fit_report",
    "__version__",
]
