"""CSV artifacts, SVG charts, and run manifests.

CSV is the authoritative output format; headers are fixed and byte-exact.
Charts are written as self-contained SVG with no plotting dependency: the
layout is stable for a given input but not guaranteed bit-identical across
tool versions. Every command records a RunManifest next to its outputs with
enough context (arguments, config snapshot, input digest) to re-run the
exact experiment.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict
from datetime import datetime, timezone

from .analysis import HitRateCdf, ReuseTimeline, RunsTestReport
from .bench import IntervalStats, LatencyLog, NormalizedRow

TOOL_VERSION = "0.1.0"

HIT_RATE_CDF_HEADER = "hit_rate,cum_fraction"
SEQ_FRACTION_HEADER = "request_index,arrival_ms,fraction"
RUNS_TEST_HEADER = "key_or_request,p_value,n1,n2,runs"
REUSE_TIMELINE_HEADER = "bucket_s,block_id"
LATENCY_LOG_HEADER = "op_kind,issue_ms,latency_ns,outcome"
INTERVAL_STATS_HEADER = "interval_index,op_kind,count,p50_ns,p99_ns"
NORMALIZED_HEADER = "interval_index,op_kind,ratio"


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_rows(path: str, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_hit_rate_cdf(path: str, cdf: HitRateCdf) -> None:
    _write_rows(path, HIT_RATE_CDF_HEADER, cdf.points)


def write_seq_fraction(path: str, rows) -> None:
    """rows: (request_index, arrival_ms, fraction) per non-empty request."""
    _write_rows(path, SEQ_FRACTION_HEADER, rows)


def write_runs_test(path: str, report: RunsTestReport) -> None:
    rows = [
        (key, stat.p_value, stat.n1, stat.n2, stat.runs)
        for key, stat in sorted(report.stats.items())
    ]
    _write_rows(path, RUNS_TEST_HEADER, rows)


def write_reuse_timeline(path: str, timeline: ReuseTimeline) -> None:
    _write_rows(path, REUSE_TIMELINE_HEADER, timeline.points)


def write_latency_log(path: str, log: LatencyLog) -> None:
    _write_rows(
        path,
        LATENCY_LOG_HEADER,
        ((r.op_kind, r.issue_ms, r.latency_ns, r.outcome) for r in log.records),
    )


def write_interval_stats(path: str, stats: IntervalStats) -> None:
    _write_rows(
        path,
        INTERVAL_STATS_HEADER,
        ((r.interval_index, r.op_kind, r.count, r.p50_ns, r.p99_ns) for r in stats.rows),
    )


def write_normalized(path: str, rows: list[NormalizedRow]) -> None:
    _write_rows(
        path,
        NORMALIZED_HEADER,
        (
            (r.interval_index, r.op_kind, float("nan") if r.ratio is None else r.ratio)
            for r in rows
        ),
    )


def read_interval_stats(path: str) -> IntervalStats:
    """Load an interval_stats.csv produced by write_interval_stats."""
    from .bench import IntervalRow  # local import to keep module load light

    stats = IntervalStats(interval_s=0, warmup_s=0)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != INTERVAL_STATS_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{line_no}: expected 5 columns")
            stats.rows.append(
                IntervalRow(int(parts[0]), parts[1], int(parts[2]), int(parts[3]), int(parts[4]))
            )
    return stats


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to re-run the experiment that produced an output dir."""

    command_line: list[str]
    config: dict
    trace_label: str
    trace_sha256: str | None
    backend: str | None
    started_at: str
    finished_at: str
    version: str = TOOL_VERSION
    aborted: bool = False

    def write(self, out_dir: str, name: str = "manifest.json") -> str:
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")
        return path


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


# --- SVG rendering -----------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 64, 16, 36, 48


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _fmt_tick(v: float) -> str:
    if abs(v - round(v)) < 1e-9:
        return str(int(round(v)))
    return f"{v:.3g}"


def svg_line_chart(
    series: list[tuple[str, list[tuple[float, float]]]],
    title: str,
    x_label: str,
    y_label: str,
    x_domain: tuple[float, float] | None = None,
    step: bool = False,
) -> str:
    """A fixed-layout multi-series line chart. Series points must be sorted
    by x. ``step`` renders right-continuous steps (for CDFs)."""
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] for _, pts in series for p in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = x_domain if x_domain else (min(xs), max(xs))
    y_lo, y_hi = min(min(ys), 0.0), max(ys)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    y_hi *= 1.05

    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return _MT + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
    ]
    for tv in _ticks(x_lo, x_hi):
        x = px(tv)
        out.append(
            f'<line x1="{x:.1f}" y1="{_MT}" x2="{x:.1f}" y2="{_MT + plot_h}" stroke="#ddd"/>'
        )
        out.append(
            f'<text x="{x:.1f}" y="{_MT + plot_h + 16}" text-anchor="middle">{_fmt_tick(tv)}</text>'
        )
    for tv in _ticks(y_lo, y_hi):
        y = py(tv)
        out.append(
            f'<line x1="{_ML}" y1="{y:.1f}" x2="{_ML + plot_w}" y2="{y:.1f}" stroke="#ddd"/>'
        )
        out.append(
            f'<text x="{_ML - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt_tick(tv)}</text>'
        )
    out.append(
        f'<rect x="{_ML}" y="{_MT}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>'
    )
    out.append(
        f'<text x="{_ML + plot_w / 2:.1f}" y="{_H - 10}" text-anchor="middle">{_esc(x_label)}</text>'
    )
    out.append(
        f'<text x="16" y="{_MT + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_MT + plot_h / 2:.1f})">{_esc(y_label)}</text>'
    )

    for idx, (label, pts) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        coords: list[str] = []
        prev_y: float | None = None
        for x, y in pts:
            if step and prev_y is not None:
                coords.append(f"{px(x):.1f},{py(prev_y):.1f}")
            coords.append(f"{px(x):.1f},{py(y):.1f}")
            prev_y = y
        if coords:
            out.append(
                f'<polyline points="{" ".join(coords)}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        ly = _MT + 14 + 14 * idx
        out.append(
            f'<line x1="{_ML + plot_w - 120}" y1="{ly - 4}" x2="{_ML + plot_w - 100}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        out.append(f'<text x="{_ML + plot_w - 94}" y="{ly}">{_esc(label)}</text>')

    out.append("</svg>\n")
    return "\n".join(out)


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def svg_cdf_chart(points, title: str = "Block hit rate CDF") -> str:
    """Step CDF over the hit-rate domain [0, 1]."""
    pts = [(0.0, 0.0)] + [(float(h), float(c)) for h, c in points]
    return svg_line_chart(
        [("cdf", pts)],
        title,
        "hit rate",
        "cumulative fraction",
        x_domain=(0.0, 1.0),
        step=True,
    )
