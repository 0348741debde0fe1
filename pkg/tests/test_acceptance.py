"""Acceptance gate: every check on every reference configuration.

Each test covers one criterion across the five reference cases and prints a
single pass/fail line.  A criterion passes when it passes on every case
where it applies.  Tolerances live in ``pipeline.TOL`` and are fixed.
"""

import pytest

from conftest import REFERENCE_CASES, reference_config
from dualstop import pipeline

CRITERIA = range(1, 12)


@pytest.fixture(scope="module")
def results():
    out = {}
    for case in REFERENCE_CASES:
        _, checks = pipeline.run_checks(reference_config(case))
        out[case] = {c.id: c for c in checks}
    return out


def _status(checks):
    applicable = {case: c for case, c in checks.items() if c.applicable}
    if not applicable:
        return None, applicable
    return all(c.passed for c in applicable.values()), applicable


@pytest.mark.parametrize("criterion", CRITERIA)
def test_criterion(criterion, results, capsys):
    checks = {case: results[case][criterion] for case in REFERENCE_CASES}
    ok, applicable = _status(checks)
    name = next(iter(checks.values())).name
    per_case = " ".join(
        f"{case}:{'n/a' if not c.applicable else ('pass' if c.passed else 'FAIL')}"
        for case, c in checks.items())
    tag = "n/a " if ok is None else ("PASS" if ok else "FAIL")
    with capsys.disabled():
        print(f"\n[{tag}] criterion {criterion:2d} {name:<24s} {per_case}")
    assert applicable, f"criterion {criterion} applies to no reference case"
    failed = {case: c.measured for case, c in applicable.items() if not c.passed}
    assert not failed, f"criterion {criterion} ({name}) failed on {sorted(failed)}"
