"""Static network: admittance matrix, power-balance equations and Newton solver.

Everything here is per-unit on the case MVA base. The algebraic unknowns are
ordered ``[theta of non-slack buses, |V| of PQ buses]``; a generator that has
hit its reactive limit turns its bus into a PQ bus for the solver.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels

SLACK, PV, PQ = "slack", "pv", "pq"
BUS_TYPES = (SLACK, PV, PQ)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 20


class CaseError(ValueError):
    """Structurally invalid network case."""


class AlgebraicDivergence(RuntimeError):
    """Newton did not converge; near the nose this signals voltage collapse."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class JacobianSingular(AlgebraicDivergence):
    """The algebraic Jacobian could not be factorised."""


@dataclass(frozen=True)
class Bus:
    id: int
    type: str = PQ
    base_kv: float = 1.0
    v_init: float = 1.0
    theta_init: float = 0.0  # rad
    gs: float = 0.0  # shunt conductance, MW at V = 1
    bs: float = 0.0  # shunt susceptance, MVAr at V = 1


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple
    branches: tuple
    base_mva: float = 100.0
    name: str = ""
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {b.id: i for i, b in enumerate(self.buses)})

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def slack_index(self):
        return next(i for i, b in enumerate(self.buses) if b.type == SLACK)

    def branch_index(self, branch_id):
        for k, br in enumerate(self.branches):
            if br.id == branch_id:
                return k
        raise KeyError(f"unknown branch {branch_id!r}")

    def validate(self):
        seen = set()
        for b in self.buses:
            if b.id in seen:
                raise CaseError(f"duplicate bus id {b.id}")
            seen.add(b.id)
            if b.type not in BUS_TYPES:
                raise CaseError(f"bus {b.id}: type must be one of {BUS_TYPES}, got {b.type!r}")
        n_slack = sum(b.type == SLACK for b in self.buses)
        if n_slack != 1:
            raise CaseError(f"case needs exactly one slack bus, found {n_slack}")
        ids = set()
        for br in self.branches:
            if br.id in ids:
                raise CaseError(f"duplicate branch id {br.id!r}")
            ids.add(br.id)
            for end in (br.from_bus, br.to_bus):
                if end not in self.index:
                    raise CaseError(f"branch {br.id!r}: unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch {br.id!r}: from and to bus are both {br.from_bus}")
            if not br.tap > 0:
                raise CaseError(f"branch {br.id!r}: tap ratio must be > 0, got {br.tap}")
            if br.r == 0 and br.x == 0:
                raise CaseError(f"branch {br.id!r}: zero series impedance")
        n = self.n_bus
        rows = [self.index[br.from_bus] for br in self.branches]
        cols = [self.index[br.to_bus] for br in self.branches]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, labels = connected_components(graph, directed=False)
        if n_comp > 1:
            stray = sorted(b.id for b, lab in zip(self.buses, labels) if lab != labels[self.slack_index])
            raise CaseError(f"network is disconnected; buses not reachable from the slack: {stray}")
        return self


@dataclass
class AlgebraicState:
    V: np.ndarray
    theta: np.ndarray
    iterations: int = 0

    def copy(self):
        return AlgebraicState(self.V.copy(), self.theta.copy(), self.iterations)


def branch_block(branch, tap=None):
    """Pi-model 2x2 admittance block ``(Yff, Yft, Ytf, Ytt)``, off-nominal tap on the from side."""
    t = branch.tap if tap is None else tap
    ys = 1.0 / complex(branch.r, branch.x)
    ysh = 0.5j * branch.b
    return (ys + ysh) / (t * t), -ys / t, -ys / t, ys + ysh


def build_admittance(case):
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = case.index[br.from_bus], case.index[br.to_bus]
        yff, yft, ytf, ytt = branch_block(br)
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    for i, b in enumerate(case.buses):
        Y[i, i] += complex(b.gs, b.bs) / case.base_mva
    return Y


def retap(Y, case, branch_idx, old_tap, new_tap):
    """Update ``Y`` in place for a tap change on one branch."""
    br = case.branches[branch_idx]
    f, t = case.index[br.from_bus], case.index[br.to_bus]
    old = branch_block(br, old_tap)
    new = branch_block(br, new_tap)
    for (r, c), o, nw in zip(((f, f), (f, t), (t, f), (t, t)), old, new):
        Y[r, c] += nw - o


@dataclass
class Injections:
    """Per-unit specified injections for one algebraic solve.

    ``p_fix``/``q_fix`` are voltage-independent net injections (generation
    minus constant load). Voltage-dependent loads are term lists
    ``coef * V[bus] ** exp`` that are *consumed* at the bus.
    ``bus_kind`` holds the solver role of each bus (slack/pv/pq), which can
    differ from the case type once generators hit reactive limits.
    """
    p_fix: np.ndarray
    q_fix: np.ndarray
    pbus: np.ndarray
    pcoef: np.ndarray
    pexp: np.ndarray
    qbus: np.ndarray
    qcoef: np.ndarray
    qexp: np.ndarray
    bus_kind: tuple

    @classmethod
    def constant(cls, p_fix, q_fix, bus_kind):
        e_i, e_f = np.zeros(0, dtype=np.int64), np.zeros(0)
        return cls(np.asarray(p_fix, float), np.asarray(q_fix, float),
                   e_i, e_f, e_f, e_i, e_f, e_f, tuple(bus_kind))

    def index_sets(self):
        pvpq = np.array([i for i, k in enumerate(self.bus_kind) if k != SLACK], dtype=np.int64)
        pq = np.array([i for i, k in enumerate(self.bus_kind) if k == PQ], dtype=np.int64)
        return pvpq, pq

    def load_power(self, V):
        """Voltage-dependent consumed (P, Q) per bus, p.u."""
        n = len(V)
        p = np.bincount(self.pbus, weights=self.pcoef * V[self.pbus] ** self.pexp, minlength=n)
        q = np.bincount(self.qbus, weights=self.qcoef * V[self.qbus] ** self.qexp, minlength=n)
        return p, q


def _kernel_args(Y, inj, state, pvpq, pq):
    return (np.ascontiguousarray(Y.real), np.ascontiguousarray(Y.imag),
            state.V, state.theta, inj.p_fix, inj.q_fix,
            inj.pbus, inj.pcoef, inj.pexp, inj.qbus, inj.qcoef, inj.qexp, pvpq, pq)


def mismatch_vector(Y, inj, state):
    if isinstance(Y, NetworkCase):
        Y = build_admittance(Y)
    pvpq, pq = inj.index_sets()
    return kernels.mismatch(*_kernel_args(Y, inj, state, pvpq, pq))


def algebraic_jacobian(Y, inj, state):
    """Exact g_y, ordered like :func:`solve_algebraic` (theta block then |V| block)."""
    if isinstance(Y, NetworkCase):
        Y = build_admittance(Y)
    pvpq, pq = inj.index_sets()
    return kernels.jacobian(*_kernel_args(Y, inj, state, pvpq, pq))


def solve_algebraic(Y, inj, guess, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Plain Newton on the power mismatches, no damping or line search.

    Divergence is a meaningful outcome near the nose, so it is reported
    (``AlgebraicDivergence``/``JacobianSingular``) rather than worked around.
    ``Y`` may also be a :class:`NetworkCase`.
    """
    if isinstance(Y, NetworkCase):
        Y = build_admittance(Y)
    pvpq, pq = inj.index_sets()
    V = np.array(guess.V, dtype=float)
    th = np.array(guess.theta, dtype=float)
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(th))):
        raise ValueError("non-finite initial guess")
    try:
        status, it, err = kernels.newton(*_kernel_args(Y, inj, AlgebraicState(V, th), pvpq, pq),
                                         tol, max_iter)
    except np.linalg.LinAlgError as exc:
        raise JacobianSingular(f"singular algebraic Jacobian: {exc}") from None
    if status == kernels.CONVERGED:
        return AlgebraicState(V, th, it)
    if status == kernels.MAX_ITER:
        raise AlgebraicDivergence(
            f"Newton did not converge in {max_iter} iterations (max mismatch {err:.3e})", it, err)
    if status == kernels.NONFINITE:
        raise AlgebraicDivergence("mismatch became non-finite", it, err)
    raise AlgebraicDivergence("Newton iterate produced non-positive voltage", it, err)


def bus_power(Y, state):
    """Calculated network injections (P, Q) per bus, p.u."""
    return kernels.power_injections(np.ascontiguousarray(Y.real), np.ascontiguousarray(Y.imag),
                                    state.V, state.theta)
