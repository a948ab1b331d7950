"""Bus-attached devices.

Powers are in MW/MVAr and voltages in p.u. at this interface; the integrator
converts to system per-unit when it assembles the network injections.
"""
from dataclasses import dataclass, field, replace
import math
from typing import Optional

import numpy as np

from .stochastic import (BetaParams, OuParams, PvCurveParams, WeibullParams, WindCurveParams,
                         beta_transform, gaussian_expectation, pv_power, weibull_transform,
                         wind_power)

WIND, SOLAR = "wind", "solar"


@dataclass(frozen=True)
class StaticLoad:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class ErlLoad:
    bus: int
    p0: float
    q0: float
    T_p: float = 5.0
    T_q: float = 5.0
    alpha_s_exp: float = 0.0
    alpha_t_exp: float = 2.0
    beta_s_exp: float = 0.0
    beta_t_exp: float = 2.0
    v0: float = 1.0
    x_p: float = 0.0
    x_q: float = 0.0
    noise_channel: Optional[int] = None

    def __post_init__(self):
        if not (self.T_p > 0 and self.T_q > 0):
            raise ValueError(f"ERL at bus {self.bus}: time constants must be > 0")
        if not self.v0 > 0:
            raise ValueError(f"ERL at bus {self.bus}: v0 must be > 0")


@dataclass(frozen=True)
class RampLoad:
    bus: int
    P0: float
    Q0: float
    alpha_P: float = 0.0
    alpha_Q: float = 0.0
    ramp_rate: float = 0.005
    z0: float = 0.0
    v0: float = 1.0

    def __post_init__(self):
        if not self.ramp_rate >= 0:
            raise ValueError(f"ramp rate must be >= 0, got {self.ramp_rate}")
        if not self.z0 >= 0:
            raise ValueError(f"ramp start level z0 must be >= 0, got {self.z0}")

    def z(self, t):
        return self.z0 + self.ramp_rate * t


@dataclass(frozen=True)
class Generator:
    bus: int
    P_gen: float
    V_set: float = 1.0
    Q_min: float = -math.inf
    Q_max: float = math.inf
    kind: str = "pv-with-qlimit"
    limited: bool = False
    Q_fixed: float = 0.0

    def __post_init__(self):
        if not self.Q_min <= self.Q_max:
            raise ValueError(f"generator at bus {self.bus}: Q_min > Q_max")


@dataclass(frozen=True)
class Ltc:
    bus_controlled: int
    branch: str
    tap: float = 1.0
    tap_min: float = 0.9
    tap_max: float = 1.1
    deadband: float = 0.01
    initial_delay: float = 20.0
    subsequent_delay: float = 5.0
    rate: float = 0.01
    action_duration: float = 1.0
    v_ref: float = 1.0
    direction: int = -1  # sign of dV_controlled/dtap
    timer: float = 0.0
    actions: int = 0
    action_left: float = 0.0

    def __post_init__(self):
        if not self.tap_min <= self.tap <= self.tap_max:
            raise ValueError(f"LTC {self.branch}: tap {self.tap} outside [{self.tap_min}, {self.tap_max}]")
        if not (self.initial_delay > 0 and self.subsequent_delay > 0):
            raise ValueError(f"LTC {self.branch}: delays must be > 0")


@dataclass(frozen=True)
class RenewableInjection:
    bus: int
    kind: str
    process: object  # WeibullParams or BetaParams
    curve: object  # WindCurveParams or PvCurveParams
    power_factor: float = 1.0
    irradiance_max: float = 1000.0  # W/m^2 corresponding to a Beta sample of 1
    p_sched: Optional[float] = None  # MW when the process is not simulated

    def __post_init__(self):
        if self.kind == WIND:
            ok = isinstance(self.process, WeibullParams) and isinstance(self.curve, WindCurveParams)
        elif self.kind == SOLAR:
            ok = isinstance(self.process, BetaParams) and isinstance(self.curve, PvCurveParams)
        else:
            raise ValueError(f"renewable kind must be 'wind' or 'solar', got {self.kind!r}")
        if not ok:
            raise ValueError(f"renewable at bus {self.bus}: parameter blocks do not match kind {self.kind!r}")
        if not 0 < self.power_factor <= 1:
            raise ValueError(f"renewable at bus {self.bus}: power factor must be in (0, 1]")

    @property
    def alpha(self):
        return self.process.alpha_w if self.kind == WIND else self.process.alpha_s

    def ou_params(self, alpha=None):
        # unit intensity: the memoryless transform assumes a standardised channel
        return OuParams.standard(self.alpha if alpha is None else alpha, sigma=1.0)

    def process_value(self, eta, ou=None):
        """Wind speed (m/s) or irradiance (W/m^2) for an OU value."""
        ou = ou or self.ou_params()
        if self.kind == WIND:
            return weibull_transform(eta, self.process, ou)
        return beta_transform(eta, self.process, ou) * self.irradiance_max

    def expected_power(self):
        """Mean active output over the stationary marginal, MW."""
        ou = self.ou_params()
        std = ou.beta / math.sqrt(2 * ou.alpha)
        return gaussian_expectation(lambda zz: renewable_power(self, self.process_value(zz * std, ou))[0])

    def scheduled_power(self):
        return self.expected_power() if self.p_sched is None else self.p_sched


@dataclass
class DeviceSet:
    static_loads: list = field(default_factory=list)
    erls: list = field(default_factory=list)
    ramp: Optional[RampLoad] = None
    generators: list = field(default_factory=list)
    ltcs: list = field(default_factory=list)
    renewables: list = field(default_factory=list)


# -- exponential recovery load ---------------------------------------------

def _erl_levels(p0, q0, eta_p, eta_q):
    """Noisy nominal levels floored at zero, plus the floor flags."""
    lp = p0 + eta_p
    lq = q0 + eta_q
    return np.maximum(lp, 0.0), np.maximum(lq, 0.0), (lp < 0) | (lq < 0)


def erl_rates(x_p, x_q, T_p, T_q, p0, q0, a_s, a_t, b_s, b_t, v0, V, eta_p, eta_q):
    """Broadcastable core: returns ``(dx_p, dx_q, p, q, floored)``."""
    lp, lq, floored = _erl_levels(p0, q0, eta_p, eta_q)
    vr = V / v0
    p_s, p_t = lp * vr ** a_s, lp * vr ** a_t
    q_s, q_t = lq * vr ** b_s, lq * vr ** b_t
    dx_p = -x_p / T_p + p_s - p_t
    dx_q = -x_q / T_q + q_s - q_t
    return dx_p, dx_q, x_p / T_p + p_t, x_q / T_q + q_t, floored


def _erl_args(load, V, eta, eta_q):
    if not V > 0:
        raise ValueError(f"ERL at bus {load.bus}: voltage must be > 0, got {V}")
    eta_q = eta if eta_q is None else eta_q
    return (load.x_p, load.x_q, load.T_p, load.T_q, load.p0, load.q0, load.alpha_s_exp,
            load.alpha_t_exp, load.beta_s_exp, load.beta_t_exp, load.v0, V, eta, eta_q)


def erl_derivatives(load, V, eta=0.0, eta_q=None):
    dx_p, dx_q, *_ = erl_rates(*_erl_args(load, V, eta, eta_q))
    return float(dx_p), float(dx_q)


def erl_power(load, V, eta=0.0, eta_q=None):
    _, _, p, q, _ = erl_rates(*_erl_args(load, V, eta, eta_q))
    return float(p), float(q)


# -- ramp load --------------------------------------------------------------

def ramp_power(load, V, t):
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    scale = 1.0 + load.z(t)
    vr = V / load.v0
    return load.P0 * scale * vr ** load.alpha_P, load.Q0 * scale * vr ** load.alpha_Q


# -- tap changer ------------------------------------------------------------

def ltc_step(ltc, V_controlled, dt):
    """Advance the tap-changer logic by ``dt``.

    Outside the deadband a timer runs; when it reaches the initial delay
    (first action of an excursion) or the subsequent delay (later actions)
    a correction window of ``action_duration`` seconds opens, during which
    the tap slides at ``rate`` per second. Re-entering the band resets the
    timer and the action count.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    err = V_controlled - ltc.v_ref
    if abs(err) <= ltc.deadband:
        return replace(ltc, timer=0.0, actions=0, action_left=0.0)

    tap = ltc.tap
    action_left = ltc.action_left
    if action_left > 0:
        move = ltc.rate * min(dt, action_left)
        sign = ltc.direction if err < 0 else -ltc.direction
        tap = min(max(tap + sign * move, ltc.tap_min), ltc.tap_max)
        action_left = max(action_left - dt, 0.0)

    timer = ltc.timer + dt
    actions = ltc.actions
    delay = ltc.initial_delay if actions == 0 else ltc.subsequent_delay
    if timer >= delay - 1e-9:
        action_left = ltc.action_duration
        timer = 0.0
        actions += 1
    return replace(ltc, tap=tap, timer=timer, actions=actions, action_left=action_left)


# -- generator reactive limits ----------------------------------------------

def generator_q_update(gen, Q_required, V=None, reversible=False):
    """Apply the reactive limits; a limited generator injects exactly the limit.

    With ``reversible`` the generator returns to voltage control once the bus
    voltage crosses back over ``V_set`` (needs ``V``); the default mirrors an
    over-excitation limiter and never releases.
    """
    if gen.kind == "slack":
        return gen
    if gen.limited:
        if reversible and V is not None:
            at_max = gen.Q_fixed >= gen.Q_max
            if (at_max and V > gen.V_set) or (not at_max and V < gen.V_set):
                return replace(gen, limited=False, Q_fixed=0.0)
        return gen
    if Q_required > gen.Q_max:
        return replace(gen, limited=True, Q_fixed=gen.Q_max)
    if Q_required < gen.Q_min:
        return replace(gen, limited=True, Q_fixed=gen.Q_min)
    return gen


# -- renewables -------------------------------------------------------------

def renewable_power(inj, value):
    """Active and reactive output (MW, MVAr), generation positive.

    ``value`` is wind speed (m/s) or irradiance (W/m^2) depending on kind.
    """
    if np.any(np.asarray(value) < 0):
        raise ValueError(f"process value must be >= 0, got {value}")
    if inj.kind == WIND:
        P = wind_power(value, inj.curve)
    else:
        P = pv_power(value, inj.curve)
    tan_phi = math.tan(math.acos(inj.power_factor))
    return P, P * tan_phi
