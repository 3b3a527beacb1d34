"""Acceptance criteria 1-11 with the fast profile; one PASS/FAIL line per criterion."""

import pytest

from grazing import acceptance


@pytest.mark.parametrize("number", range(1, acceptance.N_CRITERIA + 1))
def test_criterion(number, capsys):
    res = acceptance.run_criterion(number, "fast", seed=0)
    with capsys.disabled():
        print("\n" + res.summary())
        for rec in res.failures():
            print(f"    {rec.name}: value={rec.value:.6g} bound={rec.bound:.6g}")
    assert res.passed
