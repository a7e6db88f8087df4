import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from btwalk.law import (INFINITE, LawError, ReproductionLaw, check_law, dpsi, psi, psi_exact,
                        solve_kappa, validate_law)


def test_env_a_psi_exact_at_one_and_three(law_a):
    assert psi_exact(law_a, 1) == Fraction(1)
    assert psi_exact(law_a, 3) == Fraction(1)


def test_env_c_psi_at_two(law_c):
    assert psi(law_c, 2.0) == pytest.approx(0.52, abs=1e-15)


def test_kappa_env_a(law_a):
    assert solve_kappa(law_a).value == pytest.approx(3.0, abs=1e-9)


def test_kappa_env_b_root(law_b):
    k = solve_kappa(law_b).value
    assert abs(psi(law_b, k) - 1) < 1e-12
    # bracket: psi(1.5) < 1 < psi(1.51)
    assert psi(law_b, 1.5) < 1 < psi(law_b, 1.51)
    assert 1.5 < k < 1.51


def test_kappa_env_c_infinite(law_c):
    r = solve_kappa(law_c)
    assert r.value == INFINITE and not r.finite


@pytest.mark.parametrize("name", ["law_a", "law_b", "law_c"])
def test_reference_laws_meet_conditions(name, request):
    law = request.getfixturevalue(name)
    assert abs(law.probs.sum() - 1) < 1e-12
    assert psi(law, 0.0) > 1
    assert abs(psi(law, 1.0) - 1) < 1e-9
    assert dpsi(law, 1.0) < 0
    rows, _ = validate_law(law)
    assert all(r.ok for r in rows if r.fatal)


def test_nonlattice_warning_single_atom():
    law = ReproductionLaw.simple((1, [0.5, 0.5]))
    rows, _ = validate_law(law)
    nl = [r for r in rows if "lattice" in r.name][0]
    assert not nl.ok and not nl.fatal


def test_psi_one_violation_named():
    law = ReproductionLaw.simple((1, [0.45, 0.45]))
    with pytest.raises(LawError, match="psi\\(1\\)"):
        check_law(law)


@given(st.floats(0, 6), st.floats(0, 6))
def test_psi_convex(a, b):
    from btwalk.law import load_reference
    for nm in "ABC":
        law = load_reference(nm)
        assert psi(law, (a + b) / 2) <= (psi(law, a) + psi(law, b)) / 2 + 1e-12
