from dataclasses import replace

import numpy as np
import pytest

from stochmargin import montecarlo
from stochmargin.devices import erl_power
from stochmargin.integrator import StepConfig, System
from stochmargin.io import load_scenario, scenario_from_case
from stochmargin.network import mismatch_vector


def _flat_scenario(name):
    return scenario_from_case(name).with_ramp(ramp_rate=0.0)


def _state_vector(st):
    return np.concatenate((st.x_p, st.x_q, st.y.V, st.y.theta, [l.tap for l in st.ltcs]))


@pytest.mark.parametrize("name", ["nine_bus.json", "ieee39_reduced.json"])
def test_equilibrium_preserved(name):
    s = System(_flat_scenario(name))
    st, bank, _ = s.initial_state(0)
    start = _state_vector(st)
    for _ in range(1000):
        st, ok = s.step(st, bank)
        assert ok
    assert np.abs(_state_vector(st) - start).max() < 1e-8


def test_autonomous_system_is_time_invariant():
    # with noise and ramp off, advancing from the same state at a later clock gives the same result
    s = System(_flat_scenario("nine_bus.json"))
    st, bank, _ = s.initial_state(0)
    later = replace(st, t=500.0, k=10_000)
    a, _ = s.step(st, bank)
    b, _ = s.step(later, bank)
    np.testing.assert_array_equal(_state_vector(a), _state_vector(b))


def test_ramp_level_exact_on_step_boundaries(systems):
    s = systems["nine_bus.json"]
    st, bank, _ = s.initial_state(0)
    for k in range(1, 2001):
        st, ok = s.step(st, bank)
        assert st.z == s.ramp.ramp_rate * (k * s.step_cfg.dt)


def test_deterministic_runs_identical(systems):
    s = systems["nine_bus.json"]
    a = s.run(0, record=True)
    b = s.run(0, record=True)
    assert a.margin_mw == b.margin_mw and a.t_collapse == b.t_collapse
    np.testing.assert_array_equal(a.trajectory["data"], b.trajectory["data"])


def test_seed_unused_without_noise(systems):
    s = systems["ieee39_reduced.json"]
    assert s.run(0).margin_mw == s.run(123456789).margin_mw


def test_mismatch_and_erl_consistency_along_noisy_trajectory():
    s = System(load_scenario("ieee39_load_noise.json"))
    st, bank, inputs = s.initial_state(11)
    base = s.base
    n_e = len(s.erls)
    for k in range(400):
        st, ok = s.step(st, bank)
        assert ok
        assert np.abs(mismatch_vector(st.Y, st.inj, st.y)).max() <= 1e-8
        if k % 50:
            continue
        eta_p, eta_q = s.step_inputs(st.eta)[:2]
        V = st.y.V
        for j, load in enumerate(s.erls):
            dev = replace(load, x_p=st.x_p[j], x_q=st.x_q[j], v0=s.v0[j])
            p, q = erl_power(dev, V[s.erl_idx[j]], eta_p[j] * base, eta_q[j] * base)
            # the ERL terms of the network's voltage-dependent load lists
            i = s.erl_idx[j]
            pn = st.inj.pcoef[j] + st.inj.pcoef[n_e + j] * V[i] ** st.inj.pexp[n_e + j]
            qn = st.inj.qcoef[j] + st.inj.qcoef[n_e + j] * V[i] ** st.inj.qexp[n_e + j]
            assert pn * base == pytest.approx(p, rel=1e-12)
            assert qn * base == pytest.approx(q, rel=1e-12)


def test_step_config_validation():
    with pytest.raises(ValueError):
        StepConfig(dt=0.0)


def test_quarter_step_retry_recorded_or_collapse(systems):
    # the two-bus case only fails at the nose: the retry cannot rescue it
    r = systems["two_bus.json"].run(0)
    assert r.cause == "algebraic-divergence"


def test_step_refinement_small_case():
    sc = scenario_from_case("nine_bus.json")
    a = System(sc).run(0).margin_mw
    b = System(sc.with_integration(dt=sc.integration.dt / 2)).run(0).margin_mw
    assert abs(a - b) < 0.005 * a


def test_ramp_start_level_shifts_margin():
    sc = scenario_from_case("nine_bus.json")
    P0, rate, dt = sc.ramp.P0, sc.ramp.ramp_rate, sc.integration.dt
    base = System(sc).run(0).margin_mw
    for z0 in (0.1, 0.2):
        m = System(sc.with_ramp(z0=z0)).run(0).margin_mw
        # equal up to a couple of steps of ramp
        assert m == pytest.approx(base - z0 * P0, abs=2 * rate * dt * P0)


def test_nine_bus_criteria_agree():
    # a reactive-limit switch shortly before the nose: divergence and the
    # extrapolated eigenvalue zero-crossing coincide, the floor never fires first
    s = System(scenario_from_case("nine_bus.json"))
    r = s.run(0, record=True)
    assert r.cause == "algebraic-divergence"
    st, bank, _ = s.initial_state(0)
    states = []
    while True:
        nxt, ok = s.step(st, bank)
        if not ok:
            break
        st = nxt
        states.append(st)
    t = np.array([q.t for q in states[-3:]])
    lam = np.array([s.monitor_value(q) for q in states[-3:]])
    assert np.all(lam > 0) and np.all(np.diff(lam) < 0)
    slope = np.polyfit(t, lam, 1)[0]
    t_zero = t[-1] - lam[-1] / slope
    assert abs(t_zero - r.t_collapse) < 2.0
    V = r.trajectory["data"][:, 2:2 + s.n]
    assert V.min() > 0.5


def test_voltage_floor_never_first_on_bundled_cases(systems):
    for s in systems.values():
        assert s.run(0).cause != "voltage-floor"


@pytest.mark.slow
def test_load_noise_lowers_nine_bus_margin():
    sc = load_scenario("nine_bus_load_noise.json")
    res = montecarlo.run_study(sc, 30, 0, 1)
    m = np.array([r.margin_mw for r in res.records if r.collapsed])
    det = res.stats.deterministic_margin_mw
    half_width = m.std(ddof=1)
    assert len(m) == 30
    assert np.all(m <= det + 3 * half_width)
    assert m.mean() < det
    # one-sided t statistic
    assert (det - m.mean()) / (half_width / np.sqrt(len(m))) > 3


def test_numpy_fallback_gives_same_margins(systems):
    import os
    import subprocess
    import sys
    code = ("from stochmargin import _accel, kernels\n"
            "from stochmargin.integrator import System\n"
            "from stochmargin.io import scenario_from_case\n"
            "assert not _accel.USE_NUMBA and kernels.newton is kernels.newton_numpy\n"
            "for n in ('two_bus.json', 'nine_bus.json'):\n"
            "    print(repr(System(scenario_from_case(n)).run(0).margin_mw))\n")
    env = dict(os.environ, STOCHMARGIN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    got = [float(v) for v in out.stdout.split()]
    want = [systems[n].run(0).margin_mw for n in ("two_bus.json", "nine_bus.json")]
    assert got == pytest.approx(want, abs=1e-6)
