from __future__ import annotations

import pytest

from kvcmeta.trace import Trace, TraceRequest


def make_fixture_trace() -> Trace:
    """The hand-built 6-request fixture trace used across the suite.

    Requests (arrival ms, block ids):
      0: t=0      [1,2,3,7]
      1: t=1000   [1,2,3,7]        repeat of request 0
      2: t=2000   [5,6,7,42,9,10]  mixed runs, one id (7) already seen
      3: t=3000   [1,2,9]          fully reused
      4: t=61000  []               empty request
      5: t=62000  [100,101]        fresh pair in the second 60s bucket
    """
    rows = [
        (0, 2048, 128, (1, 2, 3, 7)),
        (1000, 2048, 64, (1, 2, 3, 7)),
        (2000, 3072, 96, (5, 6, 7, 42, 9, 10)),
        (3000, 1536, 32, (1, 2, 9)),
        (61000, 0, 16, ()),
        (62000, 1024, 8, (100, 101)),
    ]
    return Trace(
        tuple(TraceRequest(t, i, o, ids) for t, i, o, ids in rows),
        label="fixture6",
    )


@pytest.fixture
def fixture_trace() -> Trace:
    return make_fixture_trace()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("skipped", "SKIPPED")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = str(getattr(rep, "nodeid", ""))
            if "test_acceptance" not in nodeid:
                continue
            if status != "skipped" and getattr(rep, "when", "call") != "call":
                continue
            lines[nodeid.split("::")[-1]] = label
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(f"ACCEPTANCE {name}: {lines[name]}")
