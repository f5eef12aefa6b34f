"""Acceptance gate: one test per criterion, one PASS/FAIL line per criterion.

Run directly (``python tests/test_acceptance.py``) or through pytest, which
prints the summary lines at the end of the session.
"""
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
import acceptance_criteria as ac  # noqa: E402

TITLES = {
    1: "axiom suite on analytic presets",
    2: "transport identity and shift operator norm",
    3: "moment semigroup vs Monte Carlo",
    4: "matrix semigroup law",
    5: "extended-Feller consistency triangle",
    6: "Radon-Nikodym equivalence",
    7: "supermartingale check",
    8: "P4 counterexample",
    9: "forward equations",
    10: "Stone-Weierstrass surrogate",
    11: "Yosida property",
    12: "reproducibility across thread counts",
}

RESULTS: dict = {}


def _line(k, ok, detail, elapsed):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d} ({TITLES[k]}): {detail} [{elapsed:.1f}s]"


@pytest.mark.parametrize("k", sorted(TITLES))
def test_criterion(k):
    start = time.perf_counter()
    ok, detail = ac.run_criterion(k)
    line = _line(k, ok, detail, time.perf_counter() - start)
    RESULTS[k] = line
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for k in sorted(TITLES):
        start = time.perf_counter()
        ok, detail = ac.run_criterion(k)
        failed += not ok
        print(_line(k, ok, detail, time.perf_counter() - start), flush=True)
    sys.exit(1 if failed else 0)
