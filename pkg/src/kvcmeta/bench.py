"""Trace-to-operation compilation, replay, and tail-latency aggregation.

Compilation turns each request's block-id list into metadata operations:
every maximal consecutive run of length >= 2 becomes one range scan over the
half-open key interval covering the run, and every remaining singleton
becomes a point get. Two population modes are supported:

* ``preload``        - every distinct id is installed before timing begins;
                       the replay itself is pure reads.
* ``insert_on_miss`` - an id never seen before (in an earlier request or
                       earlier in the same request) compiles to an insert in
                       place of its read, splitting runs around the insert
                       boundaries; later appearances compile to reads.

Inserted/preloaded values are the block id itself, making reads verifiable.
A ``chunk_split`` factor k rewrites each id b into the k consecutive ids
b*k .. b*k+k-1 before segmentation, modelling finer-grained chunking: runs
stretch by k and the metadata op volume grows accordingly.

Replay measures latency around the backend call only; scheduling lag of the
faithful (timestamp-driven) schedule is tracked separately, never folded
into latencies. Percentiles are nearest-rank (sort ascending, take the
element at 1-based index ceil(q*n)).
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

from .analysis import segment_runs
from .store import encode_key, hash_key
from .trace import Trace

POINT_GET = "point_get"
RANGE_SCAN = "range_scan"
INSERT = "insert"

MODES = ("preload", "insert_on_miss")
KEY_SCHEMES = ("ordered", "hashed")
SCHEDULES = ("faithful", "closed_loop")

OUTCOME_OK = "ok"
OUTCOME_MISS = "miss"


class ReplayAborted(RuntimeError):
    """Replay stopped early: the error-rate budget was exhausted.

    Carries the partial log assembled so far.
    """

    def __init__(self, message: str, log: "LatencyLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True, slots=True)
class MetadataOp:
    """One compiled benchmark operation.

    ``span`` is the number of block positions the op covers: run length for
    scans, 1 otherwise. For scans, max_results is set to span at replay time.
    """

    kind: str
    issue_ms: int
    request_ordinal: int
    key: bytes | None = None          # point_get / insert
    value: int | None = None          # insert
    start: bytes | None = None        # range_scan
    end_exclusive: bytes | None = None
    span: int = 1


@dataclass
class OpStream:
    """Compiled operation stream plus the untimed preload set."""

    ops: list[MetadataOp]
    preload: list[tuple[bytes, int]]
    mode: str
    namespace: bytes
    chunk_split: int
    key_scheme: str

    @property
    def covered_positions(self) -> int:
        return sum(op.span for op in self.ops)


@dataclass(frozen=True, slots=True)
class LatencyRecord:
    op_kind: str
    issue_ms: int
    latency_ns: int
    outcome: str  # "ok" | "miss" | "error:<ExceptionName>"


@dataclass
class LatencyLog:
    """Per-op latency records plus replay-level scheduling-lag summary."""

    records: list[LatencyRecord] = field(default_factory=list)
    max_sched_lag_ns: int = 0
    total_sched_lag_ns: int = 0
    errors: int = 0

    @property
    def mean_sched_lag_ns(self) -> float:
        return self.total_sched_lag_ns / len(self.records) if self.records else 0.0


def _key_fn(key_scheme: str, namespace: bytes | str):
    if key_scheme == "ordered":
        return lambda bid: encode_key(namespace, bid)
    return lambda bid: hash_key(namespace, bid)


def compile_ops(
    trace: Trace,
    mode: str = "preload",
    namespace: bytes | str = b"",
    chunk_split: int = 1,
    key_scheme: str = "ordered",
) -> OpStream:
    """Compile a trace into a deterministic metadata op stream.

    Under the ``hashed`` key scheme keys carry no order, so range scans are
    impossible and every position compiles to a point get (or insert).
    """
    if chunk_split < 1:
        raise ValueError("chunk_split must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if key_scheme not in KEY_SCHEMES:
        raise ValueError(f"unknown key_scheme {key_scheme!r}")

    make_key = _key_fn(key_scheme, namespace)
    scans_enabled = key_scheme == "ordered"
    ops: list[MetadataOp] = []
    preload: list[tuple[bytes, int]] = []
    preloaded: set[int] = set()
    seen: set[int] = set()
    k = chunk_split

    for ordinal, req in enumerate(trace.requests):
        ids = (
            [b * k + j for b in req.block_ids for j in range(k)]
            if k > 1
            else list(req.block_ids)
        )
        t = req.arrival_ms
        if mode == "preload":
            for bid in ids:
                if bid not in preloaded:
                    preloaded.add(bid)
                    preload.append((make_key(bid), bid))
            for run in segment_runs(ids):
                ops.extend(_read_ops(run.start_id, run.length, t, ordinal, make_key, scans_enabled))
        else:
            for run in segment_runs(ids):
                ops.extend(
                    _insert_on_miss_ops(run.start_id, run.length, t, ordinal, seen, make_key, scans_enabled)
                )
    return OpStream(ops, preload, mode, _ns_bytes(namespace), chunk_split, key_scheme)


def _ns_bytes(namespace: bytes | str) -> bytes:
    return namespace.encode("utf-8") if isinstance(namespace, str) else namespace


def _read_ops(start_id: int, length: int, t: int, ordinal: int, make_key, scans_enabled: bool):
    if length >= 2 and scans_enabled:
        yield MetadataOp(
            RANGE_SCAN,
            t,
            ordinal,
            start=make_key(start_id),
            end_exclusive=make_key(start_id + length),
            span=length,
        )
    else:
        for bid in range(start_id, start_id + length):
            yield MetadataOp(POINT_GET, t, ordinal, key=make_key(bid))


def _insert_on_miss_ops(
    start_id: int, length: int, t: int, ordinal: int, seen: set[int], make_key, scans_enabled: bool
):
    # Walk the run left to right, splitting around never-seen ids, which
    # compile to inserts; contiguous already-seen stretches become reads.
    pending_start: int | None = None
    pending_len = 0
    for bid in range(start_id, start_id + length):
        if bid in seen:
            if pending_start is None:
                pending_start = bid
                pending_len = 0
            pending_len += 1
        else:
            if pending_start is not None:
                yield from _read_ops(pending_start, pending_len, t, ordinal, make_key, scans_enabled)
                pending_start = None
            seen.add(bid)
            yield MetadataOp(INSERT, t, ordinal, key=make_key(bid), value=bid)
    if pending_start is not None:
        yield from _read_ops(pending_start, pending_len, t, ordinal, make_key, scans_enabled)


def _execute(op: MetadataOp, backend) -> str:
    if op.kind == POINT_GET:
        return OUTCOME_OK if backend.get(op.key) is not None else OUTCOME_MISS
    if op.kind == RANGE_SCAN:
        rows = backend.scan(op.start, op.end_exclusive, max_results=op.span)
        return OUTCOME_OK if len(rows) == op.span else OUTCOME_MISS
    backend.put(op.key, op.value)
    return OUTCOME_OK


def replay(
    opstream: OpStream,
    backend,
    schedule: str = "closed_loop",
    time_scale: float = 1.0,
    workers: int = 1,
    abort_error_rate: float = 0.01,
    clock=time.perf_counter_ns,
) -> LatencyLog:
    """Replay a compiled op stream against a backend.

    The preload set is installed before timing starts. Schedule ``faithful``
    dispatches each op no earlier than issue_ms * time_scale after replay
    start (late dispatch is recorded as scheduling lag); ``closed_loop``
    ignores issue times and keeps exactly ``workers`` ops in flight. Per-op
    failures are recorded as error outcomes; once errors exceed
    abort_error_rate * total ops, the replay aborts with ReplayAborted.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    if schedule == "faithful" and time_scale <= 0:
        raise ValueError("time_scale must be positive")

    for key, value in opstream.preload:
        backend.put(key, value)

    ops = opstream.ops
    total = len(ops)
    error_budget = max(1, math.ceil(abort_error_rate * total)) if total else 0
    state = _ReplayState(error_budget)
    buffers: list[list[LatencyRecord]] = [[] for _ in range(workers)]
    lag_stats = [[0, 0] for _ in range(workers)]  # [max_lag, total_lag]

    start_ns = time.perf_counter_ns()

    def run_worker(wid: int) -> None:
        buf = buffers[wid]
        lag = lag_stats[wid]
        while True:
            op = state.next_op(ops)
            if op is None:
                return
            if schedule == "faithful":
                target_ns = start_ns + int(op.issue_ms * time_scale * 1e6)
                now = time.perf_counter_ns()
                if now < target_ns:
                    time.sleep((target_ns - now) / 1e9)
                else:
                    late = now - target_ns
                    if late > lag[0]:
                        lag[0] = late
                    lag[1] += late
            t0 = clock()
            try:
                outcome = _execute(op, backend)
            except Exception as exc:
                t1 = clock()
                buf.append(
                    LatencyRecord(op.kind, op.issue_ms, max(1, t1 - t0), f"error:{type(exc).__name__}")
                )
                if state.record_error():
                    return
                continue
            t1 = clock()
            buf.append(LatencyRecord(op.kind, op.issue_ms, max(1, t1 - t0), outcome))

    if workers == 1:
        run_worker(0)
    else:
        threads = [threading.Thread(target=run_worker, args=(w,)) for w in range(workers)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()

    log = LatencyLog()
    for buf in buffers:
        log.records.extend(buf)
    if workers > 1:
        log.records.sort(key=lambda r: r.issue_ms)
    log.errors = sum(1 for r in log.records if r.outcome.startswith("error"))
    log.max_sched_lag_ns = max(ls[0] for ls in lag_stats)
    log.total_sched_lag_ns = sum(ls[1] for ls in lag_stats)

    if state.aborted:
        raise ReplayAborted(
            f"error budget exhausted: {log.errors} errors over {len(log.records)} completed ops "
            f"(threshold {abort_error_rate:.2%} of {total})",
            log,
        )
    return log


class _ReplayState:
    """Shared cursor + error budget for replay workers."""

    def __init__(self, error_budget: int):
        self._lock = threading.Lock()
        self._next = 0
        self._errors = 0
        self._budget = error_budget
        self.aborted = False

    def next_op(self, ops):
        with self._lock:
            if self.aborted or self._next >= len(ops):
                return None
            op = ops[self._next]
            self._next += 1
            return op

    def record_error(self) -> bool:
        with self._lock:
            self._errors += 1
            if self._errors > self._budget:
                self.aborted = True
            return self.aborted


def percentile(samples, q: float):
    """Nearest-rank percentile: element at 1-based index ceil(q*n) of the
    ascending sort. q must lie in (0, 1]."""
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    ordered = sorted(samples)
    if not ordered:
        raise ValueError("percentile of empty sample set")
    n = len(ordered)
    # The 1e-9 guard keeps float noise (e.g. 0.99*100 -> 99.00000000000001)
    # from bumping the rank past the exact nearest-rank index.
    rank = max(1, math.ceil(q * n - 1e-9))
    return ordered[min(rank, n) - 1]


@dataclass(frozen=True)
class IntervalRow:
    interval_index: int
    op_kind: str
    count: int
    p50_ns: int
    p99_ns: int


@dataclass
class IntervalStats:
    """Per-interval, per-op-kind percentile rows (errors tallied apart)."""

    interval_s: int
    warmup_s: int
    rows: list[IntervalRow] = field(default_factory=list)
    error_counts: dict[tuple[int, str], int] = field(default_factory=dict)

    def cells(self) -> dict[tuple[int, str], IntervalRow]:
        return {(r.interval_index, r.op_kind): r for r in self.rows}


def interval_stats(log: LatencyLog, interval_s: int = 60, warmup_s: int = 600) -> IntervalStats:
    """Bucket post-warm-up records into half-open issue-time intervals and
    aggregate count/p50/p99 per (interval, op kind). Error records are
    excluded from percentiles and counted separately. Empty intervals are
    simply absent."""
    if interval_s <= 0:
        raise ValueError("interval_s must be positive")
    if warmup_s < 0:
        raise ValueError("warmup_s must be >= 0")
    span_ms = interval_s * 1000
    cutoff_ms = warmup_s * 1000
    samples: dict[tuple[int, str], list[int]] = {}
    stats = IntervalStats(interval_s, warmup_s)
    for rec in log.records:
        if rec.issue_ms < cutoff_ms:
            continue
        cell = (rec.issue_ms // span_ms, rec.op_kind)
        if rec.outcome.startswith("error"):
            stats.error_counts[cell] = stats.error_counts.get(cell, 0) + 1
            continue
        samples.setdefault(cell, []).append(rec.latency_ns)
    for (idx, kind) in sorted(samples):
        lat = samples[(idx, kind)]
        stats.rows.append(
            IntervalRow(idx, kind, len(lat), percentile(lat, 0.50), percentile(lat, 0.99))
        )
    return stats


@dataclass(frozen=True)
class NormalizedRow:
    interval_index: int
    op_kind: str
    ratio: float | None  # None when the baseline p99 is 0 (undefined cell)


@dataclass
class NormalizedReport:
    """Baseline-normalized p99 ratios per shared (interval, op kind) cell."""

    rows: list[NormalizedRow]
    mean_ratio_per_kind: dict[str, float]
    undefined_cells: list[tuple[int, str]]


def normalize(stats: IntervalStats, baseline: IntervalStats) -> NormalizedReport:
    """p99 ratios of stats against baseline over their shared cells, plus the
    across-interval mean ratio per op kind. Raises if no cell is shared."""
    ours = stats.cells()
    base = baseline.cells()
    shared = sorted(set(ours) & set(base))
    if not shared:
        raise ValueError("no shared (interval, op_kind) cells to normalize")
    rows: list[NormalizedRow] = []
    undefined: list[tuple[int, str]] = []
    sums: dict[str, list[float]] = {}
    for idx, kind in shared:
        b = base[(idx, kind)].p99_ns
        if b == 0:
            rows.append(NormalizedRow(idx, kind, None))
            undefined.append((idx, kind))
            continue
        ratio = ours[(idx, kind)].p99_ns / b
        rows.append(NormalizedRow(idx, kind, ratio))
        sums.setdefault(kind, []).append(ratio)
    means = {kind: sum(v) / len(v) for kind, v in sums.items()}
    return NormalizedReport(rows, means, undefined)
