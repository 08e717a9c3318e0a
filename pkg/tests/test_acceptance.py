"""One test per acceptance criterion; each prints a PASS/FAIL line."""

import pytest

from acceptance import CRITERIA, evaluate


@pytest.mark.parametrize("name", [n for n, _, _ in CRITERIA])
def test_criterion(name, capsys):
    outcome = evaluate(name)
    with capsys.disabled():
        print("\n" + outcome.line())
    assert outcome.passed, outcome.detail
