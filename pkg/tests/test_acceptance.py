"""Acceptance criteria, each at its stated tolerance.

Every criterion prints one PASS/FAIL line, visible even under output capture.
"""
import pytest

from graphot.validation import CRITERIA, run_criterion


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_acceptance_criterion(number, capsys):
    res = run_criterion(number)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
