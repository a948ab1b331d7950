"""Partitioned time integration of the stochastic DAE model.

Each step: advance the OU channels, map them to load and renewable
injections, advance the ramp level, integrate the recovery-load states with a
trapezoidal predictor-corrector (re-solving the network for the predictor),
re-solve the network and apply generator reactive limits, then advance the
tap changers. Noise is frozen across the predictor and corrector halves.

A failed network solve is retried once as four quarter steps before it is
reported as collapse; the collapse tests themselves live in :mod:`.margin`.
"""
from dataclasses import dataclass, field, replace
import math
from typing import Optional

import numpy as np

from . import margin as mg
from .devices import WIND, erl_rates, generator_q_update, ltc_step, renewable_power
from .network import (PQ, PV, SLACK, AlgebraicDivergence, AlgebraicState, Injections,
                      algebraic_jacobian, build_admittance, bus_power, retap, solve_algebraic)
from .stochastic import OuParams, ou_coefficients

RETRY_SPLIT = 4
_NOISE_BLOCK = 1024
RENEWABLE_CHANNEL_OFFSET = 1000


class SimulationFault(RuntimeError):
    """Non-finite state or another condition that is a bug, not a collapse."""


@dataclass(frozen=True)
class StepConfig:
    dt: float = 0.05
    scheme: str = "euler-maruyama"
    max_time: float = 2000.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")


@dataclass
class TrialResult:
    trial_id: int
    seed: int
    status: str  # "collapse", "no-collapse" or "fault"
    margin_mw: float = math.nan
    cause: str = ""
    t_collapse: float = math.nan
    z_star: float = math.nan
    floor_events: int = 0
    events: list = field(default_factory=list)
    eig_trace: tuple = ()
    message: str = ""
    trajectory: Optional[dict] = None

    @property
    def collapsed(self):
        return self.status == "collapse"


@dataclass
class SystemState:
    t: float
    k: int
    x_p: np.ndarray
    x_q: np.ndarray
    eta: np.ndarray
    y: AlgebraicState
    z: float
    gens: list
    ltcs: list
    Y: np.ndarray
    inj: Optional[Injections] = None
    events: list = field(default_factory=list)
    floor_events: int = 0


class _NoiseBank:
    """Per-channel Gaussian streams read in blocks; channel ``c`` of trial seed ``s``
    always sees the same sequence regardless of what other channels exist."""

    def __init__(self, seed, channel_ids):
        self.gens = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
                     for c in channel_ids]
        self.buf = np.empty((len(channel_ids), _NOISE_BLOCK))
        self.pos = _NOISE_BLOCK

    def draw(self):
        if self.pos == _NOISE_BLOCK:
            for i, g in enumerate(self.gens):
                self.buf[i] = g.standard_normal(_NOISE_BLOCK)
            self.pos = 0
        out = self.buf[:, self.pos]
        self.pos += 1
        return out


class System:
    """A scenario compiled into arrays; read-only and shared by all trials."""

    def __init__(self, scenario):
        self.scenario = scenario
        case, dev = scenario.case, scenario.devices
        cfg = scenario.integration
        self.case = case
        self.base = base = case.base_mva
        n = case.n_bus
        ix = case.index
        self.n = n
        self.cfg = cfg
        self.step_cfg = StepConfig(cfg.dt, cfg.scheme, cfg.max_time)

        self.p_fix0 = np.zeros(n)
        self.q_fix0 = np.zeros(n)
        for ld in dev.static_loads:
            self.p_fix0[ix[ld.bus]] -= ld.p / base
            self.q_fix0[ix[ld.bus]] -= ld.q / base
        self.gens0 = list(dev.generators)
        self.gen_idx = np.array([ix[g.bus] for g in self.gens0], dtype=np.int64)
        for g, i in zip(self.gens0, self.gen_idx):
            if g.kind != "slack":
                self.p_fix0[i] += g.P_gen / base
        self.bus_kind0 = tuple(b.type for b in case.buses)

        erls = dev.erls
        self.erls = erls
        self.erl_idx = np.array([ix[e.bus] for e in erls], dtype=np.int64)
        arr = lambda attr: np.array([getattr(e, attr) for e in erls], dtype=float)
        self.T_p, self.T_q = arr("T_p"), arr("T_q")
        self.p0, self.q0 = arr("p0") / base, arr("q0") / base
        self.a_s, self.a_t = arr("alpha_s_exp"), arr("alpha_t_exp")
        self.b_s, self.b_t = arr("beta_s_exp"), arr("beta_t_exp")

        ramp = dev.ramp
        if ramp is None:
            raise ValueError("scenario has no ramp load")
        self.ramp = ramp
        self.ramp_idx = ix[ramp.bus]
        self.P0_pu, self.Q0_pu = ramp.P0 / base, ramp.Q0 / base

        self.renewables = list(dev.renewables)
        self.ren_idx = np.array([ix[r.bus] for r in self.renewables], dtype=np.int64)
        self.ren_sched = np.array([r.scheduled_power() for r in self.renewables], dtype=float)
        self.ren_tan = np.array([math.tan(math.acos(r.power_factor)) for r in self.renewables])

        # noise channels
        ln = scenario.load_noise
        self.load_noise = ln
        channel_ids, ou = [], []
        self.erl_channel = np.full(len(erls), -1, dtype=np.int64)
        if ln.enabled and ln.sigma > 0:
            lp = ln.ou_params()
            for k, e in enumerate(erls):
                if ln.buses is None or e.bus in ln.buses:
                    self.erl_channel[k] = len(ou)
                    channel_ids.append(k)
                    ou.append(lp)
        self.ren_channel = np.full(len(self.renewables), -1, dtype=np.int64)
        self.ren_ou = [None] * len(self.renewables)
        rn = scenario.renewable_noise
        if rn.enabled:
            for j, r in enumerate(self.renewables):
                alpha = rn.wind_alpha if r.kind == WIND else rn.solar_alpha
                p = r.ou_params(alpha)
                self.ren_channel[j] = len(ou)
                self.ren_ou[j] = p
                channel_ids.append(RENEWABLE_CHANNEL_OFFSET + j)
                ou.append(p)
        self.channel_ids = channel_ids
        self.ou = ou
        self.ou_std = np.array([p.stationary_std for p in ou])
        coef = [ou_coefficients(p, cfg.dt, cfg.scheme) for p in ou]
        self.ou_decay = np.array([c[0] for c in coef])
        self.ou_scale = np.array([c[1] for c in coef])
        if ln.mode == "relative":
            self.eta_scale_p, self.eta_scale_q = self.p0 * base, self.q0 * base
        else:
            self.eta_scale_p = self.eta_scale_q = np.full(len(erls), base)

        self.ltc_branch = [case.branch_index(t.branch) for t in dev.ltcs]
        self.Y0 = build_admittance(case)
        self._initialise(dev.ltcs)

    # -- base operating point --------------------------------------------

    def _initialise(self, ltcs):
        """Solve the t=0 operating point with every noise at zero and set the
        nominal voltages of the loads and the LTC references from it."""
        n_e = len(self.erls)
        self.v0 = np.ones(n_e)
        self.ramp_v0 = 1.0
        guess = AlgebraicState(np.array([b.v_init for b in self.case.buses]),
                               np.array([b.theta_init for b in self.case.buses]))
        for g, i in zip(self.gens0, self.gen_idx):
            guess.V[i] = g.V_set
        ren_p = self.ren_sched.copy()
        inputs = (np.zeros(n_e), np.zeros(n_e), ren_p, ren_p * self.ren_tan)
        # loads are constant power at the nominal voltage by construction, so solve
        # with unit exponents switched off first
        saved = (self.a_t, self.b_t, self.ramp)
        self.a_t, self.b_t = np.zeros(n_e), np.zeros(n_e)
        self.ramp = replace(self.ramp, alpha_P=0.0, alpha_Q=0.0)
        self._static_terms()
        try:
            z0 = self.ramp.z0
            y, gens, inj = self.solve_with_limits(self.Y0, np.zeros(n_e), np.zeros(n_e), inputs,
                                                  z0, self.gens0, guess, events=[], t=0.0)
        finally:
            self.a_t, self.b_t, self.ramp = saved
        self.v0 = y.V[self.erl_idx].copy()
        self.ramp_v0 = float(y.V[self.ramp_idx])
        self._static_terms()
        self.base_y = y
        self.base_gens = gens
        self.ltcs0 = [replace(t, v_ref=float(y.V[self.case.index[t.bus_controlled]])) for t in ltcs]

    # -- injections ----------------------------------------------------------

    def step_inputs(self, eta):
        """Noise-dependent quantities frozen over one step: ERL noise offsets (p.u.),
        renewable P/Q (p.u.)."""
        n_e = len(self.erls)
        eta_p = np.zeros(n_e)
        eta_q = np.zeros(n_e)
        m = self.erl_channel >= 0
        if m.any():
            e = eta[self.erl_channel[m]]
            eta_p[m] = e * self.eta_scale_p[m] / self.base
            eta_q[m] = e * self.eta_scale_q[m] / self.base
        ren_p = self.ren_sched.copy()
        for j, r in enumerate(self.renewables):
            c = self.ren_channel[j]
            if c >= 0:
                val = r.process_value(eta[c], self.ren_ou[j])
                ren_p[j] = _renewable_p(r, val)
        return eta_p, eta_q, ren_p, ren_p * self.ren_tan

    def _static_terms(self):
        n_e = len(self.erls)
        r = self.ramp
        self._pbus = np.concatenate((self.erl_idx, self.erl_idx, [self.ramp_idx])).astype(np.int64)
        self._pexp = np.concatenate((np.zeros(n_e), self.a_t, [r.alpha_P]))
        self._qexp = np.concatenate((np.zeros(n_e), self.b_t, [r.alpha_Q]))
        self._p_norm = 1.0 / self.v0 ** self.a_t
        self._q_norm = 1.0 / self.v0 ** self.b_t
        self._ramp_p = self.P0_pu / self.ramp_v0 ** r.alpha_P
        self._ramp_q = self.Q0_pu / self.ramp_v0 ** r.alpha_Q
        self._inv_tp = 1.0 / (self.T_p * self.base)
        self._inv_tq = 1.0 / (self.T_q * self.base)

    def injections(self, x_p, x_q, inputs, z, gens):
        eta_p, eta_q, ren_p, ren_q = inputs
        base = self.base
        p_fix = self.p_fix0.copy()
        q_fix = self.q_fix0.copy()
        if len(ren_p):
            np.add.at(p_fix, self.ren_idx, ren_p / base)
            np.add.at(q_fix, self.ren_idx, ren_q / base)
        kind = self.bus_kind0
        if any(g.limited for g in gens):
            kind = list(kind)
            for g, i in zip(gens, self.gen_idx):
                if g.limited:
                    q_fix[i] += g.Q_fixed / base
                    kind[i] = PQ
            kind = tuple(kind)
        lp = np.maximum(self.p0 + eta_p, 0.0)
        lq = np.maximum(self.q0 + eta_q, 0.0)
        scale = 1.0 + z
        pcoef = np.concatenate((x_p * self._inv_tp, lp * self._p_norm, [self._ramp_p * scale]))
        qcoef = np.concatenate((x_q * self._inv_tq, lq * self._q_norm, [self._ramp_q * scale]))
        return Injections(p_fix, q_fix, self._pbus, pcoef, self._pexp, self._pbus, qcoef, self._qexp, kind)

    def erl_rates(self, x_p, x_q, V, inputs):
        """ERL state derivatives in MW/MVAr (states are MW*s, MVAr*s)."""
        eta_p, eta_q = inputs[0], inputs[1]
        base = self.base
        dx_p, dx_q, _, _, floored = erl_rates(
            x_p, x_q, self.T_p, self.T_q, self.p0 * base, self.q0 * base, self.a_s, self.a_t,
            self.b_s, self.b_t, self.v0, V[self.erl_idx], eta_p * base, eta_q * base)
        return dx_p, dx_q, floored

    def gen_q(self, Y, inj, y):
        """Reactive output each generator must supply at the solved point, MVAr."""
        _, Qc = bus_power(Y, y)
        _, ql = inj.load_power(y.V)
        return (Qc - inj.q_fix + ql)[self.gen_idx] * self.base

    def solve_with_limits(self, Y, x_p, x_q, inputs, z, gens, guess, events, t):
        inj = self.injections(x_p, x_q, inputs, z, gens)
        y = solve_algebraic(Y, inj, guess)
        reversible = self.cfg.q_limits_reversible
        for _ in range(2 * len(gens) + 1):
            q_req = self.gen_q(Y, inj, y)
            new = [generator_q_update(g, q, y.V[i], reversible)
                   for g, q, i in zip(gens, q_req, self.gen_idx)]
            changed = [k for k, (a, b) in enumerate(zip(gens, new)) if a.limited != b.limited]
            if not changed:
                return y, gens, inj
            for k in changed:
                g = new[k]
                what = f"at {g.Q_fixed:.1f} MVAr" if g.limited else "released"
                events.append((t, f"generator {g.bus} reactive limit {what}"))
            gens = new
            inj = self.injections(x_p, x_q, inputs, z, gens)
            y = solve_algebraic(Y, inj, y)
        raise AlgebraicDivergence("generator limit switching did not settle")

    # -- trial ---------------------------------------------------------------

    def initial_state(self, seed):
        bank = _NoiseBank(seed, self.channel_ids)
        eta = self.ou_std * bank.draw() if self.ou else np.zeros(0)
        n_e = len(self.erls)
        x_p, x_q = np.zeros(n_e), np.zeros(n_e)
        events = []
        inputs = self.step_inputs(eta)
        z = self.ramp.z(0.0)
        y, gens, inj = self.solve_with_limits(self.Y0, x_p, x_q, inputs, z, self.base_gens,
                                              self.base_y.copy(), events, 0.0)
        st = SystemState(0.0, 0, x_p, x_q, eta, y, z, gens, list(self.ltcs0), self.Y0, inj, events)
        return st, bank, inputs

    def advance(self, st, dt, t_new, z_new, inputs):
        """One partitioned step of size ``dt``; returns a new state or raises
        ``AlgebraicDivergence``."""
        events = []
        fp, fq, floored = self.erl_rates(st.x_p, st.x_q, st.y.V, inputs)
        xp_pred = st.x_p + dt * fp
        xq_pred = st.x_q + dt * fq
        inj = self.injections(xp_pred, xq_pred, inputs, z_new, st.gens)
        y_pred = solve_algebraic(st.Y, inj, st.y)
        fp2, fq2, _ = self.erl_rates(xp_pred, xq_pred, y_pred.V, inputs)
        x_p = st.x_p + 0.5 * dt * (fp + fp2)
        x_q = st.x_q + 0.5 * dt * (fq + fq2)
        y, gens, inj = self.solve_with_limits(st.Y, x_p, x_q, inputs, z_new, st.gens,
                                              y_pred, events, t_new)
        Y = st.Y
        ltcs = []
        moved = False
        for ltc, b in zip(st.ltcs, self.ltc_branch):
            new = ltc_step(ltc, float(y.V[self.case.index[ltc.bus_controlled]]), dt)
            if new.tap != ltc.tap:
                if not moved:
                    Y = Y.copy()
                    moved = True
                retap(Y, self.case, b, ltc.tap, new.tap)
            if new.actions > ltc.actions:
                events.append((t_new, f"LTC {ltc.branch} action {new.actions}"))
            ltcs.append(new)
        if moved:
            y, gens, inj = self.solve_with_limits(Y, x_p, x_q, inputs, z_new, gens, y, events, t_new)
        if not (np.all(np.isfinite(x_p)) and np.all(np.isfinite(x_q))):
            raise SimulationFault(f"non-finite load state at t={t_new}")
        return SystemState(t_new, st.k, x_p, x_q, st.eta, y, z_new, gens, ltcs, Y, inj,
                           st.events + events if events else st.events,
                           st.floor_events + int(np.count_nonzero(floored)))

    def step(self, st, bank):
        """Full step with OU update and the quarter-step retry.

        Returns ``(new_state, converged)``; on failure ``new_state`` is ``st``.
        """
        dt = self.step_cfg.dt
        if self.ou:
            eta = self.ou_decay * st.eta + self.ou_scale * bank.draw()
        else:
            eta = st.eta
        k_new = st.k + 1
        t_new = k_new * dt
        z_new = self.ramp.z(t_new)
        inputs = self.step_inputs(eta)
        base = replace(st, eta=eta)
        try:
            new = self.advance(base, dt, t_new, z_new, inputs)
        except AlgebraicDivergence:
            new = None
        if new is None:
            sub = base
            h = dt / RETRY_SPLIT
            try:
                for j in range(1, RETRY_SPLIT + 1):
                    tj = st.t + j * h if j < RETRY_SPLIT else t_new
                    sub = self.advance(sub, h, tj, self.ramp.z(tj), inputs)
                new = sub
                new.events = new.events + [(t_new, "step recovered with quarter steps")]
            except AlgebraicDivergence:
                return st, False
        new.k = k_new
        return new, True

    def monitor_value(self, st):
        if self.cfg.monitor == "reduced":
            return mg.critical_eigenvalue(self.reduced_jacobian(st))
        return mg.critical_eigenvalue(algebraic_jacobian(st.Y, st.inj, st.y))

    def reduced_jacobian(self, st, h=1e-4):
        """d(xdot)/dx of the recovery-load states with the network eliminated,
        by central differences (each column re-solves the network)."""
        m = len(self.erls)
        if m == 0:
            raise ValueError("reduced Jacobian needs at least one recovery load")
        inputs = self.step_inputs(st.eta)
        x = np.concatenate((st.x_p, st.x_q))
        A = np.empty((2 * m, 2 * m))

        def rates(xx):
            inj = self.injections(xx[:m], xx[m:], inputs, st.z, st.gens)
            y = solve_algebraic(st.Y, inj, st.y)
            fp, fq, _ = self.erl_rates(xx[:m], xx[m:], y.V, inputs)
            return np.concatenate((fp, fq))

        for j in range(2 * m):
            e = np.zeros(2 * m)
            e[j] = h
            A[:, j] = (rates(x + e) - rates(x - e)) / (2 * h)
        return A

    def run(self, seed, trial_id=0, record=False, detect=True):
        """Integrate one trial until collapse or ``max_time``."""
        cfg = self.cfg
        P0 = self.ramp.P0
        z0 = self.ramp.z0
        traj = _Recorder(self) if record else None
        try:
            st, bank, _ = self.initial_state(seed)
        except AlgebraicDivergence as exc:
            ev = mg.make_event(0.0, z0, z0, P0, mg.ALGEBRAIC_DIVERGENCE)
            return _result(trial_id, seed, ev, None, traj, f"no operating point at t=0: {exc}")
        if traj:
            traj.add(st)
        history = [mg.EigSample(0.0, st.z, self.monitor_value(st))] if detect else []
        window = [st]
        n_steps = int(round(cfg.max_time / cfg.dt))
        K = cfg.eig_every
        while st.k < n_steps:
            prev = st
            st, ok = self.step(st, bank)
            outcome = mg.StepOutcome(prev.t, prev.z, ok)
            if not detect:
                if not ok:
                    raise SimulationFault(f"network solve failed at t={prev.t}")
                if traj:
                    traj.add(st)
                continue
            if ok:
                if traj:
                    traj.add(st)
                window.append(st)
                if st.k % K == 0 or st.k == n_steps:
                    value = self.monitor_value(st)
                    if np.sign(value) * np.sign(history[-1].value) < 0:
                        history.extend(self._bisect(window, history[-1].value))
                    else:
                        history.append(mg.EigSample(st.t, st.z, value))
                    window = [st]
            ev = mg.detect_collapse(history, outcome, st.y.V if ok else None,
                                    P0=P0, z0=z0, v_floor=cfg.voltage_floor)
            if ev is not None:
                return _result(trial_id, seed, ev, st, traj)
        res = TrialResult(trial_id, seed, "no-collapse", events=list(st.events),
                          floor_events=st.floor_events,
                          eig_trace=tuple(s.value for s in history[-20:]))
        res.trajectory = traj.finish() if traj else None
        return res

    def _bisect(self, window, first_value):
        """Locate the first sign flip inside a monitoring window of stored states."""
        s0 = np.sign(first_value)
        lo, hi = 0, len(window) - 1
        vals = {}
        while hi - lo > 1:
            mid = (lo + hi) // 2
            vals[mid] = self.monitor_value(window[mid])
            if np.sign(vals[mid]) == s0:
                lo = mid
            else:
                hi = mid
        out = []
        if lo > 0:
            out.append(mg.EigSample(window[lo].t, window[lo].z, vals[lo]))
        v_hi = vals[hi] if hi in vals else self.monitor_value(window[hi])
        out.append(mg.EigSample(window[hi].t, window[hi].z, v_hi))
        return out


def _renewable_p(r, value):
    return renewable_power(r, value)[0]


class _Recorder:
    def __init__(self, system):
        self.system = system
        self.rows = []

    def add(self, st):
        self.rows.append(np.concatenate(([st.t, st.z], st.y.V, st.eta)))

    def finish(self):
        sys_ = self.system
        cols = (["t", "z"] + [f"V_{b.id}" for b in sys_.case.buses]
                + [f"eta_{c}" for c in sys_.channel_ids])
        data = np.array(self.rows) if self.rows else np.zeros((0, len(cols)))
        return {"columns": cols, "data": data}


def _result(trial_id, seed, event, st, traj, message=""):
    res = TrialResult(trial_id, seed, "collapse", margin_mw=event.margin_mw, cause=event.cause,
                      t_collapse=event.t_collapse, z_star=event.z_star,
                      floor_events=st.floor_events if st else 0,
                      events=list(st.events) if st else [], eig_trace=event.eig_trace,
                      message=message)
    res.trajectory = traj.finish() if traj else None
    return res


def compile_system(scenario):
    return System(scenario)


def run_trial(scenario, seed, trial_id=0, record=False, system=None):
    """Integrate one trial; ``system`` may be passed to reuse a compiled scenario."""
    system = system or System(scenario)
    return system.run(seed, trial_id=trial_id, record=record)
