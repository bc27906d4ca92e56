import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from einn import models, oracle
from einn.models import ModelSpec
from einn.oracle import (DomainError, NotAnEquilibriumError, RootBracket, UnsupportedModelError,
                         classify_stability, closed_form_inverse, equilibria_at, sweep, threshold_oracle)

# Extrema of the closed-form inverses, frozen from an independent computation:
# real roots of the stationarity cubics (Scheffer 2u^3 - 0.5u + 0.05 = 0,
# May 2u^3 - u^2 + 0.01 = 0) found by bracketed bisection, substituted back.
SCHEFFER_MAX = (0.10457442422, 2.6043651706511524)
SCHEFFER_MIN = (0.43944253312498643, 1.7872302001819116)
MAY_MIN = (0.11378052016139042, 0.17872302001819115)
MAY_MAX = (0.4781283795978352, 0.2604365170651153)
ABETA_MAX_U, ABETA_MAX_A2 = 1.8311, 2.984426


@pytest.fixture(scope="module")
def specs():
    return {e.spec.id: e.spec for e in models.zoo()}


def test_root_bracket_invariants():
    RootBracket(0.0, 1.0, -1.0, 2.0)
    with pytest.raises(oracle.OracleError):
        RootBracket(1.0, 1.0, -1.0, 1.0)
    with pytest.raises(oracle.OracleError):
        RootBracket(0.0, 1.0, 1.0, 2.0)


def test_scheffer_equilibrium_counts(specs):
    assert len(equilibria_at(specs["scheffer"], 2.2)) == 3
    assert len(equilibria_at(specs["scheffer"], 1.0)) == 1
    assert len(equilibria_at(specs["scheffer"], 3.0)) == 1


def test_linear_toy_equilibrium(specs):
    (state,) = equilibria_at(specs["linear_toy"], 0.7, (0.0, 1.0))
    assert state[0] == pytest.approx(0.7, abs=1e-12)


def test_roots_have_small_reduced_residual(specs):
    for mid, lams in [("scheffer", [0.5, 1.8, 2.2, 2.6, 3.4]), ("may", [0.1, 0.2, 0.25, 0.5]),
                      ("abeta_ca", [0.5, 2.0, 2.9, 3.5])]:
        spec = specs[mid]
        red = oracle.reduce_model(spec)
        for lam in lams:
            for state in equilibria_at(spec, lam, reduction=red):
                assert abs(oracle.reduced_residual(spec, state[0], lam, red)) <= 1e-10


@pytest.mark.parametrize("mid,lam_range", [("scheffer", (0.0, 3.5)), ("may", (0.0, 0.6)), ("abeta_ca", (0.5, 3.5))])
@settings(max_examples=100, deadline=None)
@given(frac=st.floats(0.0, 1.0))
def test_equilibria_consistent_with_closed_form(specs, mid, lam_range, frac):
    lam = lam_range[0] + frac * (lam_range[1] - lam_range[0])
    for state in equilibria_at(specs[mid], lam):
        if state[0] <= 0.0:
            continue
        assert abs(closed_form_inverse(mid, state[0]) - lam) <= 1e-8
        if mid == "abeta_ca":
            assert abs(closed_form_inverse(mid, state[0], "v") - state[1]) <= 1e-12


def test_abeta_ca_equilibria_do_not_depend_on_eps(specs):
    spec = specs["abeta_ca"]
    slow = spec.with_parameters(eps=1.0)
    fast = spec.with_parameters(eps=0.1)
    for a2 in [0.5, 2.129, 2.95, 3.5]:
        a = equilibria_at(slow, a2)
        b = equilibria_at(fast, a2)
        assert len(a) == len(b)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_unsupported_model():
    spec = ModelSpec("ring", ("x", "y", "z"), ("y*y - x + lam", "z*z - y*y", "x - z*z*y"), {}, "lam", "x", (0.0, 1.0))
    with pytest.raises(UnsupportedModelError):
        oracle.reduce_model(spec)
    with pytest.raises(UnsupportedModelError):
        equilibria_at(spec, 0.1)
    with pytest.raises(UnsupportedModelError):
        sweep(spec, [0.1])


def test_three_state_chain_reduces():
    spec = ModelSpec("chain", ("x", "y", "z"), ("lam - x + y*z", "x - y", "2*y - z"), {}, "lam", "x", (0.0, 1.0))
    red = oracle.reduce_model(spec)
    assert set(red.order) == {"y", "z"}
    # reduces to 2x^2 - x + lam = 0
    states = equilibria_at(spec, 0.1, (0.0, 0.5))
    expected = sorted((1 + s * np.sqrt(1 - 8 * 0.1)) / 4 for s in (-1, 1))
    np.testing.assert_allclose([s[0] for s in states], expected, atol=1e-12)
    for state in states:
        assert max(abs(r) for r in spec.residuals(dict(zip("xyz", state)), 0.1)) <= 1e-10


def test_closed_form_values():
    assert closed_form_inverse("scheffer", 0.25) == 2.0
    assert closed_form_inverse("may", 0.4792) == pytest.approx(0.26044, abs=1e-4)
    assert closed_form_inverse("abeta_ca", 1.0) == pytest.approx(2.1291, abs=1e-4)
    assert closed_form_inverse("abeta_ca", 1.0, "v") == pytest.approx(0.222, abs=1e-15)
    assert closed_form_inverse("linear_toy", 0.3) == 0.3


def test_closed_form_domain_error():
    with pytest.raises(DomainError):
        closed_form_inverse("scheffer", 0.0)
    with pytest.raises(DomainError):
        closed_form_inverse("may", 0.0)


def test_derived_inverse_matches_closed_form(specs):
    for mid in ("scheffer", "may", "abeta_ca"):
        for u in (0.8, 1.2):
            assert closed_form_inverse(specs[mid], u) == pytest.approx(closed_form_inverse(mid, u), rel=1e-12)


def test_threshold_oracle_scheffer():
    (tmax, tmin) = threshold_oracle("scheffer", (0.01, 1.5))
    assert tmax.kind == "local_max" and tmin.kind == "local_min"
    assert tmax.u_star == pytest.approx(SCHEFFER_MAX[0], abs=1e-9)
    assert tmax.lam == pytest.approx(SCHEFFER_MAX[1], abs=1e-12)
    assert tmin.u_star == pytest.approx(SCHEFFER_MIN[0], abs=1e-9)
    assert tmin.lam == pytest.approx(SCHEFFER_MIN[1], abs=1e-12)


def test_threshold_oracle_may_and_abeta_ca():
    (tmin, tmax) = threshold_oracle("may", (0.01, 1.0))
    assert (tmin.kind, tmax.kind) == ("local_min", "local_max")
    assert tmin.u_star == pytest.approx(MAY_MIN[0], abs=1e-9) and tmin.lam == pytest.approx(MAY_MIN[1], abs=1e-12)
    assert tmax.u_star == pytest.approx(MAY_MAX[0], abs=1e-9) and tmax.lam == pytest.approx(MAY_MAX[1], abs=1e-12)
    for t in (tmin, tmax):
        assert abs(2 * t.u_star**3 - t.u_star**2 + 0.01) <= 1e-9
    (peak,) = threshold_oracle("abeta_ca")
    assert peak.kind == "local_max"
    assert peak.u_star == pytest.approx(ABETA_MAX_U, abs=1e-4)
    assert peak.lam == pytest.approx(ABETA_MAX_A2, abs=1e-6)


def test_threshold_oracle_linear_toy_is_empty():
    assert threshold_oracle("linear_toy") == []


def test_threshold_report_schema():
    doc = json.loads(oracle.threshold_report("scheffer", (0.01, 1.5)).to_json())
    assert doc["source"] == "oracle" and doc["model_id"] == "scheffer"
    assert [t["kind"] for t in doc["thresholds"]] == ["local_max", "local_min"]
    assert all(t["derivative_residual"] <= 1e-6 for t in doc["thresholds"])


def test_stability_linear_toy(specs):
    tag = classify_stability(specs["linear_toy"], [0.7], 0.7)
    assert tag.kind == "stable" and tag.leading_indicator == -1.0


def test_stability_scheffer_branches(specs):
    spec = specs["scheffer"]
    kinds = [classify_stability(spec, s, 2.2).kind for s in equilibria_at(spec, 2.2)]
    assert kinds == ["stable", "unstable", "stable"]


def test_stability_abeta_ca(specs):
    spec = specs["abeta_ca"]
    state = (1.0, oracle.closed_form_inverse("abeta_ca", 1.0, "v"))
    a2 = oracle.closed_form_inverse("abeta_ca", 1.0)
    tag = classify_stability(spec, state, a2)
    k1, k2, b2 = 0.35, 5.0, 1.0
    v = state[1]
    df1 = 2 * v / (v * v + 1.0) ** 2
    det = k1 * k2 - a2 * b2 * df1
    assert -k1 - k2 < 0
    assert tag.kind == ("stable" if det > 0 else "unstable")
    # Routh column of s^2 + (k1 + k2) s + det
    assert tag.leading_indicator == pytest.approx(min(k1 + k2, det), rel=1e-12)


def test_stability_rejects_non_equilibrium(specs):
    with pytest.raises(NotAnEquilibriumError):
        classify_stability(specs["linear_toy"], [0.7], 0.6)


def test_characteristic_polynomial_and_routh():
    a = np.array([[-1.0, 2.0, 0.0], [0.0, -3.0, 1.0], [0.5, 0.0, -2.0]])
    np.testing.assert_allclose(oracle.characteristic_polynomial(a), np.poly(a), rtol=1e-12, atol=1e-12)
    assert oracle._hurwitz(a) == bool(np.all(np.linalg.eigvals(a).real < 0))
    assert not oracle._hurwitz(-a)
    assert not oracle._hurwitz(np.diag([-1.0, -2.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 5))
def test_routh_hurwitz_agrees_with_eigenvalues(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n)) - rng.uniform(0, 2) * np.eye(n)
    re = np.linalg.eigvals(a).real
    if np.min(np.abs(re)) < 1e-6:
        return
    assert oracle._hurwitz(a) == bool(np.all(re < 0))


def test_three_state_stability_uses_routh_hurwitz():
    spec = ModelSpec("lin3", ("x", "y", "z"), ("lam - x", "x - 2*y", "y - 3*z"), {}, "lam", "x", (0.0, 1.0))
    tag = classify_stability(spec, (0.5, 0.25, 0.25 / 3), 0.5)
    assert tag.kind == "stable" and tag.leading_indicator > 0
    unstable = ModelSpec("lin3u", ("x", "y", "z"), ("lam - x", "x - 2*y", "y + 3*z"), {}, "lam", "x", (0.0, 1.0))
    assert classify_stability(unstable, (0.5, 0.25, -0.25 / 3), 0.5).kind == "unstable"


def test_marginal_tag():
    spec = ModelSpec("flat", ("u",), ("lam - u^3",), {}, "lam", "u", (-1.0, 1.0))
    assert classify_stability(spec, [0.0], 0.0).kind == "marginal"


def test_sweep_scheffer_structure(specs):
    grid = np.linspace(0.0, 3.5, 701)
    d = sweep(specs["scheffer"], grid)
    counts = d.counts()
    assert d.count_pattern() == [1, 3, 1]
    first3 = grid[counts.index(3)]
    last3 = grid[len(counts) - 1 - counts[::-1].index(3)]
    step = grid[1] - grid[0]
    assert first3 - step <= 1.7869 <= first3 + step
    assert last3 - step <= 2.6049 <= last3 + step
    assert [p.lam for p in d.points] == sorted(p.lam for p in d.points)


def test_sweep_may_structure(specs):
    d = sweep(specs["may"], np.linspace(0.0, 0.6, 601))
    assert d.count_pattern() == [1, 3, 1]


def test_sweep_empty_grid(specs):
    d = sweep(specs["scheffer"], [])
    assert d.points == [] and d.counts() == []
    assert d.to_csv() == "lambda,u,stability\n"


def test_sweep_parallel_matches_serial(specs):
    grid = np.linspace(1.5, 3.0, 31)
    a = sweep(specs["scheffer"], grid, subdivisions=500)
    b = sweep(specs["scheffer"], grid, subdivisions=500, jobs=2)
    assert a.to_csv() == b.to_csv()


def test_sweep_csv_round_trip(specs):
    d = sweep(specs["abeta_ca"], np.linspace(2.9, 3.0, 5))
    names, rows = oracle.read_sweep_csv(d.to_csv())
    assert names == ("u", "v")
    assert [r[2] for r in rows] == [p.stability.kind for p in d.points]


def _flip_check(spec, grid, thresholds):
    d = sweep(spec, grid)
    pts = sorted(d.points, key=lambda p: p.state[0])
    u = [p.state[0] for p in pts]
    kinds = [p.stability.kind for p in pts]
    flips = [(u[i], u[i + 1]) for i in range(len(pts) - 1) if kinds[i] != kinds[i + 1]]
    assert len(flips) == len(thresholds)
    for (a, b), t in zip(flips, sorted(thresholds, key=lambda t: t.u_star)):
        assert a <= t.u_star <= b or min(abs(a - t.u_star), abs(b - t.u_star)) <= (b - a)


def test_stability_flips_at_scheffer_thresholds(specs):
    _flip_check(specs["scheffer"], np.linspace(0.0, 3.5, 701), threshold_oracle("scheffer", (0.01, 1.5)))


def test_stability_flips_at_may_thresholds(specs):
    _flip_check(specs["may"], np.linspace(0.0, 0.6, 601), threshold_oracle("may", (0.01, 1.0)))
