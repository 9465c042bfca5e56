from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from conftest import make_fixture_trace
from kvcmeta import report
from kvcmeta.cli import main, make_backend, parse_cache_config
from kvcmeta.service import RemoteBackend
from kvcmeta.store import CacheConfig, HybridMetaStore
from kvcmeta.trace import save_trace

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")
CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.fixture
def trace_file(tmp_path):
    path = str(tmp_path / "fixture6.jsonl")
    save_trace(make_fixture_trace(), path)
    return path


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


class TestParseHelpers:
    def test_cache_config_full(self):
        cfg = parse_cache_config("policy=lru_pin,capacity=128,pin=8,halflife=300")
        assert cfg == CacheConfig(128, "lru_pin", 8, 300.0)

    def test_cache_config_empty_disables(self):
        assert parse_cache_config("") == CacheConfig()

    def test_cache_config_bad_item(self):
        with pytest.raises(ValueError, match="bad cache config"):
            parse_cache_config("nope=1")

    def test_make_backend_inproc(self):
        backend, desc = make_backend("inproc:capacity=4")
        assert isinstance(backend, HybridMetaStore)
        assert desc.startswith("inproc")

    def test_make_backend_unknown(self):
        with pytest.raises(ValueError, match="unknown backend"):
            make_backend("quantum:1")


class TestAnalyze:
    def test_analyze_outputs(self, trace_file, tmp_path):
        out = str(tmp_path / "analysis")
        assert main(["analyze", trace_file, "--out", out]) == 0

        for name in ("hit_rate_cdf.csv", "seq_fraction.csv", "reuse_timeline.csv"):
            assert _read(os.path.join(out, name)) == _read(os.path.join(GOLDEN, name))
        assert _read(os.path.join(out, "runs_test.csv")) == "key_or_request,p_value,n1,n2,runs\n"

        summary = json.loads(_read(os.path.join(out, "summary.json")))
        assert summary["requests"] == 6
        assert summary["nonempty_requests"] == 5
        assert summary["avg_sequential_fraction"] == pytest.approx(0.8)
        assert summary["hit_rate"]["mean"] == pytest.approx(13 / 30)
        assert summary["hit_rate"]["p50"] == pytest.approx(1 / 6)
        assert summary["hit_rate"]["fraction_above_half"] == pytest.approx(0.4)
        assert summary["runs_test"]["per_key_gaps"] == {
            "fraction_random": None,
            "tested": 0,
            "skipped": 3,
        }
        assert "per_request_median" in summary["runs_test"]

        manifest = json.loads(_read(os.path.join(out, "manifest.json")))
        assert manifest["trace_sha256"] == report.sha256_file(trace_file)
        assert manifest["trace_label"] == "fixture6.jsonl"
        assert manifest["aborted"] is False

    def test_analyze_missing_trace(self, tmp_path, capsys):
        rc = main(["analyze", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_analyze_parse_error_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("this is not json\n")
        rc = main(["analyze", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "line 1" in capsys.readouterr().err


class TestBench:
    def test_bench_preload_zero_misses(self, trace_file, tmp_path, capsys):
        out = str(tmp_path / "bench")
        rc = main(
            ["bench", trace_file, "--out", out, "--backend", "inproc",
             "--mode", "preload", "--warmup", "0", "--interval", "30"]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        assert "misses=0" in printed
        assert "p99 point_get" in printed and "p99 range_scan" in printed

        log_lines = _read(os.path.join(out, "latency_log.csv")).splitlines()
        assert log_lines[0] == "op_kind,issue_ms,latency_ns,outcome"
        assert len(log_lines) == 1 + 10  # fixture compiles to 10 ops
        assert all(line.endswith(",ok") for line in log_lines[1:])

        stats_lines = _read(os.path.join(out, "interval_stats.csv")).splitlines()
        assert stats_lines[0] == "interval_index,op_kind,count,p50_ns,p99_ns"
        assert len(stats_lines) > 1

    def test_bench_with_cache_config_and_chunk_split(self, trace_file, tmp_path):
        out = str(tmp_path / "bench2")
        rc = main(
            ["bench", trace_file, "--out", out, "--warmup", "0",
             "--backend", "inproc:policy=lru_pin,capacity=64,pin=16",
             "--mode", "insert_on_miss", "--chunk-split", "2"]
        )
        assert rc == 0
        manifest = json.loads(_read(os.path.join(out, "manifest.json")))
        assert manifest["config"]["chunk_split"] == 2
        assert manifest["backend"].startswith("inproc:")

    def test_bench_remote_loopback_matches_inproc(self, trace_file, tmp_path):
        from kvcmeta.service import serve

        store = HybridMetaStore()
        handle = serve(("127.0.0.1", 0), store)
        try:
            host, port = handle.address
            out_r = str(tmp_path / "remote")
            rc = main(
                ["bench", trace_file, "--out", out_r, "--warmup", "0",
                 "--backend", f"remote:{host}:{port}", "--mode", "preload"]
            )
            assert rc == 0
        finally:
            handle.stop()
        out_l = str(tmp_path / "local")
        assert main(["bench", trace_file, "--out", out_l, "--warmup", "0"]) == 0

        def outcomes(path):
            return [
                (ln.split(",")[0], ln.split(",")[3])
                for ln in _read(os.path.join(path, "latency_log.csv")).splitlines()[1:]
            ]

        assert outcomes(out_r) == outcomes(out_l)


class TestSynthCmd:
    def test_synth_deterministic_outputs(self, tmp_path):
        cfg = os.path.join(CONFIGS, "cookbook_toolagent.json")
        out1, out2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        assert main(["synth", "--config", cfg, "--out", out1]) == 0
        assert main(["synth", "--config", cfg, "--out", out2]) == 0
        assert report.sha256_file(out1) == report.sha256_file(out2)
        fit = json.loads(_read(out1 + ".fit.json"))
        assert abs(fit["deviations"]["seq_fraction"]) <= 0.05
        assert os.path.exists(out1 + ".manifest.json")

    def test_synth_empty_config_fails(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        with open(os.path.join(CONFIGS, "cookbook_toolagent.json")) as fh:
            raw = json.load(fh)
        raw["num_requests"] = 0
        cfg_path.write_text(json.dumps(raw))
        rc = main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "t.jsonl")])
        assert rc == 1
        assert "empty trace" in capsys.readouterr().err

    def test_synth_invalid_config_fails_with_field_message(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"num_requests": 5}))
        rc = main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "t.jsonl")])
        assert rc == 1
        assert "invalid synth config" in capsys.readouterr().err


def _write_stats_csv(path, cells):
    lines = ["interval_index,op_kind,count,p50_ns,p99_ns"]
    for (idx, kind), p99 in sorted(cells.items()):
        lines.append(f"{idx},{kind},10,{p99},{p99}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class TestReportCmd:
    def test_two_inputs_golden_ratios(self, tmp_path):
        base = str(tmp_path / "base.csv")
        cand = str(tmp_path / "cand.csv")
        _write_stats_csv(base, {(10, "point_get"): 100, (11, "point_get"): 200})
        _write_stats_csv(cand, {(10, "point_get"): 50, (11, "point_get"): 100})
        out = str(tmp_path / "rep")
        rc = main(["report", f"redis={base}", f"ours={cand}",
                   "--baseline", "redis", "--out-dir", out])
        assert rc == 0
        assert _read(os.path.join(out, "normalized.csv")) == (
            "interval_index,op_kind,ratio\n10,point_get,0.5\n11,point_get,0.5\n"
        )
        svg = _read(os.path.join(out, "p99_norm_point_get.svg"))
        assert svg.startswith("<svg") and "redis" in svg and "ours" in svg

    def test_single_input_self_baseline_flat_ones(self, tmp_path):
        only = str(tmp_path / "only.csv")
        _write_stats_csv(only, {(10, "range_scan"): 70, (12, "range_scan"): 90})
        out = str(tmp_path / "rep")
        assert main(["report", f"solo={only}", "--out-dir", out]) == 0
        body = _read(os.path.join(out, "normalized.csv")).splitlines()[1:]
        assert all(line.endswith(",1.0") for line in body)

    def test_mismatched_grids_error_lists_cells(self, tmp_path, capsys):
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        _write_stats_csv(a, {(10, "point_get"): 100})
        _write_stats_csv(b, {(11, "point_get"): 100})
        rc = main(["report", f"a={a}", f"b={b}", "--out-dir", str(tmp_path / "rep")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "mismatched interval grids" in err and "missing" in err

    def test_unknown_baseline_label(self, tmp_path, capsys):
        a = str(tmp_path / "a.csv")
        _write_stats_csv(a, {(10, "point_get"): 100})
        rc = main(["report", f"a={a}", "--baseline", "zz", "--out-dir", str(tmp_path / "r")])
        assert rc == 1
        assert "baseline" in capsys.readouterr().err

    def test_cdf_chart_from_csv(self, tmp_path, trace_file):
        out_a = str(tmp_path / "an")
        assert main(["analyze", trace_file, "--out", out_a]) == 0
        only = str(tmp_path / "s.csv")
        _write_stats_csv(only, {(10, "point_get"): 5})
        out = str(tmp_path / "rep")
        rc = main(["report", f"x={only}", "--out-dir", out,
                   "--cdf", os.path.join(out_a, "hit_rate_cdf.csv")])
        assert rc == 0
        svg = _read(os.path.join(out, "hit_rate_cdf.svg"))
        assert svg.startswith("<svg")


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestServeCmd:
    def test_serve_subprocess_graceful_drain(self, trace_file, tmp_path):
        port = _free_port()
        proc = subprocess.Popen(
            [sys.executable, "-m", "kvcmeta.cli", "serve",
             "--listen", f"127.0.0.1:{port}", "--stats-interval", "0.5"],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        try:
            deadline = time.time() + 10
            backend = None
            while time.time() < deadline:
                try:
                    backend = RemoteBackend("127.0.0.1", port, timeout=2.0)
                    backend.stats()
                    break
                except Exception:
                    backend = None
                    time.sleep(0.1)
            assert backend is not None, "server did not come up"
            backend.close()

            out = str(tmp_path / "remote-bench")
            rc = main(
                ["bench", trace_file, "--out", out, "--warmup", "0",
                 "--backend", f"remote:127.0.0.1:{port}", "--mode", "preload"]
            )
            assert rc == 0
            lines = _read(os.path.join(out, "latency_log.csv")).splitlines()[1:]
            assert all(line.endswith(",ok") for line in lines)

            proc.send_signal(signal.SIGTERM)
            assert proc.wait(timeout=15) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()


class TestSvgRendering:
    def test_line_chart_is_deterministic(self):
        series = [("a", [(0.0, 1.0), (1.0, 2.0)]), ("b", [(0.0, 2.0), (1.0, 1.0)])]
        one = report.svg_line_chart(series, "t", "x", "y")
        two = report.svg_line_chart(series, "t", "x", "y")
        assert one == two
        assert one.startswith("<svg") and one.rstrip().endswith("</svg>")

    def test_cdf_chart_x_domain_is_unit_interval(self):
        # hit rate 1.0 must land on the plot's right edge (fixed layout: x=624)
        svg = report.svg_cdf_chart([(0.5, 0.4), (1.0, 1.0)])
        assert "624.0," in svg
        # and the axis ticks span 0..1
        assert ">0<" in svg and ">1<" in svg

    def test_escaping(self):
        svg = report.svg_line_chart([("a<b", [(0.0, 1.0)])], "t&t", "x", "y")
        assert "a&lt;b" in svg and "t&amp;t" in svg


class TestBenchFailurePaths:
    def test_backend_unavailable_at_start_aborts(self, trace_file, tmp_path, capsys):
        rc = main(
            ["bench", trace_file, "--out", str(tmp_path / "x"),
             "--backend", "remote:127.0.0.1:1", "--timeout", "0.3"]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_abort_threshold_marks_partial_outputs(self, trace_file, tmp_path, monkeypatch, capsys):
        from kvcmeta import bench as bench_mod

        def fake_replay(*args, **kwargs):
            log = bench_mod.LatencyLog(
                records=[bench_mod.LatencyRecord("point_get", 0, 5, "error:TransportError")]
            )
            log.errors = 1
            raise bench_mod.ReplayAborted("error budget exhausted: injected", log)

        monkeypatch.setattr(bench_mod, "replay", fake_replay)
        out = str(tmp_path / "aborted")
        rc = main(["bench", trace_file, "--out", out, "--warmup", "0"])
        assert rc == 1
        assert "replay aborted" in capsys.readouterr().err
        assert os.path.exists(os.path.join(out, "ABORTED"))
        assert os.path.exists(os.path.join(out, "latency_log.csv"))
        manifest = json.loads(_read(os.path.join(out, "manifest.json")))
        assert manifest["aborted"] is True


def test_external_backend_without_redis_raises_helpfully():
    try:
        import redis  # noqa: F401
    except ImportError:
        with pytest.raises(RuntimeError, match="redis"):
            from kvcmeta.external import ExternalBackend
            ExternalBackend("127.0.0.1:6379")
    else:
        pytest.skip("redis installed; missing-dependency path not reachable")
