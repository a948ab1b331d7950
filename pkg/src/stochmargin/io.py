"""Case and scenario files (JSON, ``format_version`` 1).

A *case* holds the network plus the devices attached to it. A *scenario*
points at a case and adds the noise, ramp, integration and study settings.
Bare fixture names (``two_bus.json``, ``nine_bus.json``,
``ieee39_reduced.json``, ``ieee39_load_noise.json`` ...) resolve to the
copies bundled with the package when no such file exists locally.
"""
from dataclasses import dataclass, field, replace
from importlib import resources
import json
import math
from pathlib import Path
from typing import Optional

from .devices import (SOLAR, WIND, DeviceSet, ErlLoad, Generator, Ltc, RampLoad,
                      RenewableInjection, StaticLoad)
from .network import PQ, PV, SLACK, Branch, Bus, CaseError, NetworkCase
from .stochastic import (EULER_MARUYAMA, SCHEMES, BetaParams, OuParams, PvCurveParams,
                         WeibullParams, WindCurveParams)

FORMAT_VERSION = 1
NOISE_MODES = ("absolute", "relative")
MONITORS = ("algebraic", "reduced")


class InputError(ValueError):
    """Invalid input file; the message names the file and the offending field."""

    def __init__(self, source, fieldname, problem):
        super().__init__(f"{source}: {fieldname}: {problem}")
        self.source = source
        self.field = fieldname
        self.problem = problem


def bundled_path(name):
    return resources.files("stochmargin") / "data" / name


def resolve(path):
    p = Path(path)
    if p.exists():
        return p
    bundled = bundled_path(p.name)
    if bundled.is_file():
        return Path(str(bundled))
    raise InputError(str(path), "path", "file not found")


def _read_json(path):
    p = resolve(path)
    try:
        with open(p) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(str(p), f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    if not isinstance(data, dict):
        raise InputError(str(p), "<root>", "expected a JSON object")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise InputError(str(p), "format_version", f"expected {FORMAT_VERSION}, got {version!r}")
    return p, data


class _Fields:
    """Typed accessors over one JSON object that raise :class:`InputError` with a field path."""

    def __init__(self, source, obj, where):
        if not isinstance(obj, dict):
            raise InputError(source, where, "expected an object")
        self.source, self.obj, self.where = source, obj, where

    def _name(self, key):
        return f"{self.where}.{key}" if self.where else key

    def fail(self, key, problem):
        raise InputError(self.source, self._name(key), problem)

    def has(self, key):
        return self.obj.get(key) is not None

    def num(self, key, default=None, *, gt=None, ge=None, le=None):
        if key not in self.obj or self.obj[key] is None:
            if default is None:
                self.fail(key, "required number is missing")
            return default
        v = self.obj[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            # allow +/- infinity spelled as strings for open reactive limits
            if v in ("inf", "-inf"):
                return float(v)
            self.fail(key, f"expected a finite number, got {v!r}")
        if gt is not None and not v > gt:
            self.fail(key, f"must be > {gt}, got {v}")
        if ge is not None and not v >= ge:
            self.fail(key, f"must be >= {ge}, got {v}")
        if le is not None and not v <= le:
            self.fail(key, f"must be <= {le}, got {v}")
        return float(v)

    def int(self, key, default=None):
        v = self.obj.get(key, default)
        if v is None or isinstance(v, bool) or not isinstance(v, int):
            self.fail(key, f"expected an integer, got {v!r}")
        return v

    def str(self, key, default=None, choices=None):
        v = self.obj.get(key, default)
        if not isinstance(v, str):
            self.fail(key, f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            self.fail(key, f"must be one of {list(choices)}, got {v!r}")
        return v

    def bool(self, key, default):
        v = self.obj.get(key, default)
        if not isinstance(v, bool):
            self.fail(key, f"expected true/false, got {v!r}")
        return v

    def list(self, key, required=False):
        if key not in self.obj:
            if required:
                self.fail(key, "required list is missing")
            return []
        v = self.obj[key]
        if not isinstance(v, list):
            self.fail(key, "expected a list")
        return [_Fields(self.source, item, f"{self._name(key)}[{i}]") for i, item in enumerate(v)]

    def sub(self, key, required=False):
        if self.obj.get(key) is None:
            if required:
                self.fail(key, "required object is missing")
            return _Fields(self.source, {}, self._name(key))
        return _Fields(self.source, self.obj[key], self._name(key))


# -- case -------------------------------------------------------------------

def _bus_ref(f, key, ids):
    b = f.int(key)
    if b not in ids:
        f.fail(key, f"unknown bus {b}")
    return b


def parse_case(data, source="<case>"):
    root = _Fields(source, data, "")
    base = root.num("base_mva", 100.0, gt=0)

    buses = []
    seen = set()
    for f in root.list("buses", required=True):
        bid = f.int("id")
        if bid in seen:
            f.fail("id", f"duplicate bus id {bid}")
        seen.add(bid)
        buses.append(Bus(
            id=bid, type=f.str("type", PQ, (SLACK, PV, PQ)), base_kv=f.num("base_kv", 1.0, gt=0),
            v_init=f.num("v_init", 1.0, gt=0), theta_init=math.radians(f.num("theta_init_deg", 0.0)),
            gs=f.num("gs_mw", 0.0), bs=f.num("bs_mvar", 0.0)))
    ids = {b.id for b in buses}

    branches = []
    for k, f in enumerate(root.list("branches", required=True)):
        bid = str(f.obj.get("id", f"{f.obj.get('from')}-{f.obj.get('to')}"))
        branches.append(Branch(
            id=bid, from_bus=_bus_ref(f, "from", ids), to_bus=_bus_ref(f, "to", ids),
            r=f.num("r", 0.0), x=f.num("x"), b=f.num("b", 0.0), tap=f.num("tap", 1.0, gt=0)))
    try:
        case = NetworkCase(tuple(buses), tuple(branches), base, str(data.get("name", ""))).validate()
    except CaseError as exc:
        raise InputError(source, "buses/branches", str(exc)) from None
    branch_ids = {b.id for b in branches}

    devices = DeviceSet()
    for f in root.list("loads"):
        devices.static_loads.append(StaticLoad(_bus_ref(f, "bus", ids), f.num("p_mw"), f.num("q_mvar", 0.0)))

    for f in root.list("erl_loads"):
        devices.erls.append(ErlLoad(
            bus=_bus_ref(f, "bus", ids), p0=f.num("p0_mw"), q0=f.num("q0_mvar", 0.0),
            T_p=f.num("T_p", 5.0, gt=0), T_q=f.num("T_q", 5.0, gt=0),
            alpha_s_exp=f.num("alpha_s", 0.0), alpha_t_exp=f.num("alpha_t", 2.0),
            beta_s_exp=f.num("beta_s", 0.0), beta_t_exp=f.num("beta_t", 2.0)))

    if root.has("ramp_load"):
        f = root.sub("ramp_load")
        devices.ramp = RampLoad(
            bus=_bus_ref(f, "bus", ids), P0=f.num("p0_mw", gt=0), Q0=f.num("q0_mvar", 0.0),
            alpha_P=f.num("alpha_P", 0.0), alpha_Q=f.num("alpha_Q", 0.0),
            ramp_rate=f.num("ramp_rate", 0.005, ge=0), z0=f.num("z0", 0.0, ge=0))

    gen_buses = set()
    kinds = {b.id: b.type for b in buses}
    for f in root.list("generators"):
        bus = _bus_ref(f, "bus", ids)
        if bus in gen_buses:
            f.fail("bus", f"more than one generator at bus {bus}")
        if kinds[bus] == PQ:
            f.fail("bus", f"generator at bus {bus} but the bus type is 'pq'")
        gen_buses.add(bus)
        q_min, q_max = f.num("q_min_mvar", -math.inf), f.num("q_max_mvar", math.inf)
        if q_min > q_max:
            f.fail("q_min_mvar", f"q_min_mvar {q_min} exceeds q_max_mvar {q_max}")
        devices.generators.append(Generator(
            bus=bus, P_gen=f.num("p_mw", 0.0), V_set=f.num("v_set", 1.0, gt=0),
            Q_min=q_min, Q_max=q_max, kind="slack" if kinds[bus] == SLACK else "pv-with-qlimit"))
    for b in buses:
        if b.type != PQ and b.id not in gen_buses:
            raise InputError(source, "generators", f"bus {b.id} is type {b.type!r} but has no generator")

    for f in root.list("ltcs"):
        br_id = str(f.obj.get("branch"))
        if br_id not in branch_ids:
            f.fail("branch", f"unknown branch {br_id!r}")
        br = case.branches[case.branch_index(br_id)]
        bus = _bus_ref(f, "bus", ids)
        if bus not in (br.from_bus, br.to_bus):
            f.fail("bus", f"bus {bus} is not an end of branch {br_id!r}")
        tap_min, tap_max = f.num("tap_min", 0.9, gt=0), f.num("tap_max", 1.1, gt=0)
        if not tap_min <= br.tap <= tap_max:
            f.fail("tap_min", f"branch tap {br.tap} outside [{tap_min}, {tap_max}]")
        devices.ltcs.append(Ltc(
            bus_controlled=bus, branch=br_id, tap=br.tap, tap_min=tap_min, tap_max=tap_max,
            deadband=f.num("deadband", 0.01, ge=0), initial_delay=f.num("initial_delay", 20.0, gt=0),
            subsequent_delay=f.num("subsequent_delay", 5.0, gt=0), rate=f.num("rate", 0.01, gt=0),
            action_duration=f.num("action_duration", 1.0, gt=0),
            # the tap sits on the from side: raising it lowers the to-side voltage
            direction=-1 if bus == br.to_bus else 1))

    for f in root.list("renewables"):
        kind = f.str("kind", None, (WIND, SOLAR))
        bus = _bus_ref(f, "bus", ids)
        if kind == WIND:
            w, c = f.sub("weibull", True), f.sub("power_curve")
            process = WeibullParams(w.num("lambda", gt=0), w.num("k", gt=0), w.num("alpha_w", gt=0))
            curve = WindCurveParams(c.num("w_ci", 3.0, ge=0), c.num("w_r", 12.0, gt=0),
                                    c.num("w_co", 25.0, gt=0), c.num("p_rated_mw", gt=0))
            if not curve.w_ci < curve.w_r <= curve.w_co:
                c.fail("w_r", "need w_ci < w_r <= w_co")
        else:
            b, c = f.sub("beta", True), f.sub("pv_curve")
            process = BetaParams(b.num("p", gt=0), b.num("q", gt=0), b.num("alpha_s", gt=0))
            r_c, r_std = c.num("r_c", 150.0, gt=0), c.num("r_std", 1000.0, gt=0)
            if not r_c < r_std:
                c.fail("r_c", f"must be below r_std ({r_std}), got {r_c}")
            curve = PvCurveParams(r_c, r_std, c.num("p_rated_mw", gt=0))
        p_sched = f.num("p_sched_mw", ge=0) if f.has("p_sched_mw") else None
        devices.renewables.append(RenewableInjection(
            bus=bus, kind=kind, process=process, curve=curve,
            power_factor=f.num("power_factor", 1.0, gt=0, le=1),
            irradiance_max=f.num("irradiance_max", 1000.0, gt=0), p_sched=p_sched))
    return case, devices


def load_case(path):
    p, data = _read_json(path)
    return parse_case(data, str(p))


def _num_out(v):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def case_to_dict(case, devices):
    """Inverse of :func:`parse_case`; dynamic state fields are not written."""
    out = {
        "format_version": FORMAT_VERSION, "name": case.name, "base_mva": case.base_mva,
        "buses": [{"id": b.id, "type": b.type, "base_kv": b.base_kv, "v_init": b.v_init,
                   "theta_init_deg": math.degrees(b.theta_init), "gs_mw": b.gs, "bs_mvar": b.bs}
                  for b in case.buses],
        "branches": [{"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
                      "b": br.b, "tap": br.tap} for br in case.branches],
        "loads": [{"bus": l.bus, "p_mw": l.p, "q_mvar": l.q} for l in devices.static_loads],
        "erl_loads": [{"bus": e.bus, "p0_mw": e.p0, "q0_mvar": e.q0, "T_p": e.T_p, "T_q": e.T_q,
                       "alpha_s": e.alpha_s_exp, "alpha_t": e.alpha_t_exp,
                       "beta_s": e.beta_s_exp, "beta_t": e.beta_t_exp} for e in devices.erls],
        "generators": [{"bus": g.bus, "p_mw": g.P_gen, "v_set": g.V_set,
                        "q_min_mvar": _num_out(g.Q_min), "q_max_mvar": _num_out(g.Q_max)}
                       for g in devices.generators],
        "ltcs": [{"branch": t.branch, "bus": t.bus_controlled, "tap_min": t.tap_min,
                  "tap_max": t.tap_max, "deadband": t.deadband, "initial_delay": t.initial_delay,
                  "subsequent_delay": t.subsequent_delay, "rate": t.rate,
                  "action_duration": t.action_duration} for t in devices.ltcs],
        "renewables": [],
    }
    if devices.ramp is not None:
        r = devices.ramp
        out["ramp_load"] = {"bus": r.bus, "p0_mw": r.P0, "q0_mvar": r.Q0, "alpha_P": r.alpha_P,
                            "alpha_Q": r.alpha_Q, "ramp_rate": r.ramp_rate, "z0": r.z0}
    for inj in devices.renewables:
        d = {"bus": inj.bus, "kind": inj.kind, "power_factor": inj.power_factor,
             "irradiance_max": inj.irradiance_max}
        if inj.kind == WIND:
            d["weibull"] = {"lambda": inj.process.lam, "k": inj.process.k, "alpha_w": inj.process.alpha_w}
            c = inj.curve
            d["power_curve"] = {"w_ci": c.w_ci, "w_r": c.w_r, "w_co": c.w_co, "p_rated_mw": c.P_r}
        else:
            d["beta"] = {"p": inj.process.p, "q": inj.process.q, "alpha_s": inj.process.alpha_s}
            c = inj.curve
            d["pv_curve"] = {"r_c": c.r_c, "r_std": c.r_std, "p_rated_mw": c.P_r}
        if inj.p_sched is not None:
            d["p_sched_mw"] = inj.p_sched
        out["renewables"].append(d)
    return out


def save_case(path, case, devices):
    with open(path, "w") as fh:
        json.dump(case_to_dict(case, devices), fh, indent=1)
        fh.write("\n")


# -- scenario ---------------------------------------------------------------

@dataclass(frozen=True)
class LoadNoise:
    enabled: bool = False
    sigma: float = 0.05
    alpha: float = 1.0
    beta: Optional[float] = None  # None -> sqrt(2 alpha)
    mode: str = "absolute"
    buses: Optional[tuple] = None  # None -> every ERL

    def ou_params(self):
        beta = math.sqrt(2 * self.alpha) if self.beta is None else self.beta
        return OuParams(self.alpha, beta, self.sigma if self.enabled else 0.0)


@dataclass(frozen=True)
class RenewableNoise:
    enabled: bool = False
    wind_alpha: Optional[float] = None  # None -> value in the case file
    solar_alpha: Optional[float] = None


@dataclass(frozen=True)
class IntegrationConfig:
    dt: float = 0.05
    scheme: str = EULER_MARUYAMA
    max_time: float = 2000.0
    eig_every: int = 5
    monitor: str = "algebraic"
    q_limits_reversible: bool = False
    voltage_floor: float = 0.5


@dataclass(frozen=True)
class StudyConfig:
    n_trials: int = 1000
    base_seed: int = 0
    bin_width_mw: float = 10.0
    parallelism: int = 1


@dataclass(frozen=True)
class Scenario:
    case_path: str
    case: NetworkCase
    devices: DeviceSet
    load_noise: LoadNoise = field(default_factory=LoadNoise)
    renewable_noise: RenewableNoise = field(default_factory=RenewableNoise)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    name: str = ""

    @property
    def ramp(self):
        return self.devices.ramp

    def deterministic(self):
        """Same scenario with every noise source switched off."""
        return replace(self, load_noise=replace(self.load_noise, enabled=False),
                       renewable_noise=replace(self.renewable_noise, enabled=False))

    def with_integration(self, **kw):
        return replace(self, integration=replace(self.integration, **kw))

    def with_study(self, **kw):
        return replace(self, study=replace(self.study, **kw))

    def with_ramp(self, **kw):
        return replace(self, devices=replace(self.devices, ramp=replace(self.devices.ramp, **kw)))


def parse_scenario(data, source="<scenario>", base_dir=None):
    root = _Fields(source, data, "")
    case_ref = root.str("case")
    case_file = Path(case_ref)
    if base_dir is not None and not case_file.is_absolute() and (Path(base_dir) / case_file).exists():
        case_file = Path(base_dir) / case_file
    case, devices = load_case(case_file)

    ln = root.sub("load_noise")
    buses = None
    if ln.has("buses"):
        raw = ln.obj["buses"]
        if not isinstance(raw, list):
            ln.fail("buses", "expected a list of bus ids")
        erl_buses = {e.bus for e in devices.erls}
        for b in raw:
            if b not in erl_buses:
                ln.fail("buses", f"bus {b} has no exponential recovery load")
        buses = tuple(raw)
    load_noise = LoadNoise(
        enabled=ln.bool("enabled", False), sigma=ln.num("sigma", 0.05, ge=0),
        alpha=ln.num("alpha", 1.0, gt=0), beta=ln.num("beta", ge=0) if ln.has("beta") else None,
        mode=ln.str("mode", "absolute", NOISE_MODES), buses=buses)

    rn = root.sub("renewable_noise")
    renewable_noise = RenewableNoise(
        enabled=rn.bool("enabled", False),
        wind_alpha=rn.num("wind_alpha", gt=0) if rn.has("wind_alpha") else None,
        solar_alpha=rn.num("solar_alpha", gt=0) if rn.has("solar_alpha") else None)
    if renewable_noise.enabled and not devices.renewables:
        rn.fail("enabled", "renewable noise requested but the case has no renewables")

    rp = root.sub("ramp")
    if devices.ramp is None:
        root.fail("ramp", "the case defines no ramp_load; exactly one is required")
    r = devices.ramp
    devices = replace(devices, ramp=replace(
        r, ramp_rate=rp.num("rate", r.ramp_rate, ge=0), alpha_P=rp.num("alpha_P", r.alpha_P),
        alpha_Q=rp.num("alpha_Q", r.alpha_Q), z0=rp.num("z0", r.z0, ge=0)))

    ig = root.sub("integration")
    integration = IntegrationConfig(
        dt=ig.num("dt", 0.05, gt=0), scheme=ig.str("scheme", EULER_MARUYAMA, SCHEMES),
        max_time=ig.num("max_time", 2000.0, gt=0), eig_every=ig.int("eig_every", 5),
        monitor=ig.str("monitor", "algebraic", MONITORS),
        q_limits_reversible=ig.bool("q_limits_reversible", False),
        voltage_floor=ig.num("voltage_floor", 0.5, ge=0))
    if integration.eig_every < 1:
        ig.fail("eig_every", "must be >= 1")

    st = root.sub("study")
    study = StudyConfig(
        n_trials=st.int("n_trials", 1000), base_seed=st.int("base_seed", 0),
        bin_width_mw=st.num("bin_width_mw", 10.0, gt=0), parallelism=st.int("parallelism", 1))
    if study.n_trials < 1:
        st.fail("n_trials", "must be >= 1")
    return Scenario(str(case_file), case, devices, load_noise, renewable_noise,
                    integration, study, str(data.get("name", "")))


def load_scenario(path):
    p, data = _read_json(path)
    return parse_scenario(data, str(p), p.parent)


def scenario_from_case(path):
    """Deterministic scenario with default settings around a bare case file."""
    case, devices = load_case(path)
    if devices.ramp is None:
        raise InputError(str(path), "ramp_load", "the case defines no ramp_load; exactly one is required")
    return Scenario(str(path), case, devices)
