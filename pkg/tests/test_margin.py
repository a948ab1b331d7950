import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from stochmargin.margin import (ALGEBRAIC_DIVERGENCE, JACOBIAN_SIGN_CHANGE, VOLTAGE_FLOOR,
                                CollapseEvent, EigSample, EigenSolverError, StepOutcome,
                                critical_eigenvalue, detect_collapse, make_event,
                                margin_from_event, sign_change_index)
from stochmargin.network import PQ, SLACK, AlgebraicState, Injections, algebraic_jacobian, build_admittance
from stochmargin.io import load_case

OK = StepOutcome(0.0, 0.0, True)


def test_critical_eigenvalue_examples():
    assert critical_eigenvalue(np.eye(3)) == 1.0
    assert critical_eigenvalue(np.diag([5.0, -0.2, 3.0])) == -0.2


def test_critical_eigenvalue_complex_pair_reports_real_part():
    # eigenvalues 0.3 +- 0.4j (modulus 0.5) and 2
    A = np.array([[0.3, -0.4, 0.0], [0.4, 0.3, 0.0], [0.0, 0.0, 2.0]])
    assert critical_eigenvalue(A) == pytest.approx(0.3)


def test_critical_eigenvalue_tie_breaks_on_real_part():
    assert critical_eigenvalue(np.diag([0.5, -0.5])) == -0.5
    assert critical_eigenvalue(np.diag([-0.5, 0.5])) == -0.5


def test_critical_eigenvalue_rejects_nonfinite():
    with pytest.raises(EigenSolverError):
        critical_eigenvalue(np.array([[np.nan]]))


def _feed(values, dt=1.0):
    """Run detect_collapse as the history grows; first event or None."""
    hist = []
    for k, v in enumerate(values):
        hist.append(EigSample(k * dt, 0.01 * k, v))
        ev = detect_collapse(hist, StepOutcome(k * dt, 0.01 * k), np.ones(3), P0=100.0)
        if ev is not None:
            return ev
    return None


def test_sign_change_sequence():
    ev = _feed([0.4, 0.1, -0.05])
    assert ev.cause == JACOBIAN_SIGN_CHANGE
    assert ev.t_collapse == 1.0  # earlier boundary of the 2nd -> 3rd interval
    assert sign_change_index([0.4, 0.1, -0.05]) == 1


def test_monotone_positive_no_event():
    assert _feed([0.9, 0.7, 0.5, 0.3, 0.2, 0.1]) is None


def test_divergence_and_floor():
    hist = [EigSample(0.0, 0.0, 1.0)]
    ev = detect_collapse(hist, StepOutcome(3.0, 0.2, converged=False), None, P0=100.0)
    assert ev.cause == ALGEBRAIC_DIVERGENCE and ev.margin_mw == pytest.approx(20.0)
    ev = detect_collapse(hist, StepOutcome(3.0, 0.2), np.array([1.0, 0.49]), P0=100.0)
    assert ev.cause == VOLTAGE_FLOOR


def test_earliest_criterion_wins():
    hist = [EigSample(2.0, 0.1, 0.2), EigSample(2.5, 0.12, -0.1)]
    ev = detect_collapse(hist, StepOutcome(2.45, 0.11, converged=False), None, P0=100.0)
    assert ev.cause == JACOBIAN_SIGN_CHANGE and ev.t_collapse == 2.0


def test_margin_examples():
    assert margin_from_event(make_event(0.0, 0.0, 0.0, 500.0, VOLTAGE_FLOOR), 500.0) == 0.0
    ev = make_event(200.0, 0.005 * 200.0, 0.0, 1000.0, JACOBIAN_SIGN_CHANGE)
    assert ev.margin_mw == pytest.approx(1000.0)
    assert margin_from_event(ev, 1000.0) == pytest.approx(1000.0)


def test_margin_measured_from_ramp_start_level():
    assert make_event(100.0, 0.8, 0.3, 200.0, VOLTAGE_FLOOR).margin_mw == pytest.approx(100.0)


def test_unknown_cause_rejected():
    with pytest.raises(ValueError):
        CollapseEvent(0.0, 0.0, 0.0, "meteor")


@settings(max_examples=200)
@given(st.lists(st.floats(-10, 10, allow_subnormal=False), min_size=2, max_size=30),
       st.floats(1e-3, 1e3))
def test_sign_change_invariant_to_positive_scaling(values, c):
    a, b = _feed(values), _feed([c * v for v in values])
    assert (a is None) == (b is None)
    if a is not None:
        assert (a.t_collapse, a.cause) == (b.t_collapse, b.cause)


def test_two_bus_eigenvalue_crosses_zero_at_nose():
    # walk the PV curve by receiving voltage: with Q = 0 on a lossless line
    # cos(theta) = V and P = V sin(theta) / x, maximal at V = 1/sqrt(2)
    case, _ = load_case("two_bus.json")
    Y = build_admittance(case)
    x = case.branches[0].x
    Vs = np.linspace(0.95, 0.45, 501)
    vals = []
    for V in Vs:
        th = -math.acos(V)
        p = V * math.sin(-th) / x
        inj = Injections.constant([0.0, -p], [0.0, 0.0], (SLACK, PQ))
        vals.append(critical_eigenvalue(algebraic_jacobian(Y, inj, AlgebraicState(np.array([1.0, V]),
                                                                                   np.array([0.0, th])))))
    k = sign_change_index(vals)
    assert k is not None
    step = Vs[0] - Vs[1]
    assert abs(Vs[k] - 1 / math.sqrt(2)) <= step + 1e-12
    assert sign_change_index(vals[k + 1:]) is None


def test_two_bus_deterministic_margin_matches_analytic(systems):
    s = systems["two_bus.json"]
    case = s.case
    ramp = s.scenario.devices.ramp
    nose_mw = case.base_mva / (2 * case.branches[0].x)  # E^2 / 2x with E = 1
    r = s.run(0)
    assert r.collapsed
    assert r.margin_mw == pytest.approx(nose_mw - ramp.P0, rel=0.01)
