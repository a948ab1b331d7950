"""Collapse detection and conversion of the collapse point to a MW margin."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

JACOBIAN_SIGN_CHANGE = "jacobian-sign-change"
ALGEBRAIC_DIVERGENCE = "algebraic-divergence"
VOLTAGE_FLOOR = "voltage-floor"
CAUSES = (JACOBIAN_SIGN_CHANGE, ALGEBRAIC_DIVERGENCE, VOLTAGE_FLOOR)

# priority when two criteria point at the same instant
_RANK = {c: i for i, c in enumerate(CAUSES)}


class EigenSolverError(np.linalg.LinAlgError):
    def __init__(self, matrix, reason):
        super().__init__(f"eigenvalue computation failed ({reason}); matrix:\n{np.array2string(matrix)}")
        self.matrix = matrix


@dataclass(frozen=True)
class EigSample:
    t: float
    z: float
    value: float


@dataclass(frozen=True)
class StepOutcome:
    t_start: float
    z_start: float
    converged: bool = True


@dataclass(frozen=True)
class CollapseEvent:
    t_collapse: float
    z_star: float
    margin_mw: float
    cause: str
    eig_trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.cause not in CAUSES:
            raise ValueError(f"unknown collapse cause {self.cause!r}")


def critical_eigenvalue(jac):
    """Real part of the eigenvalue of smallest modulus.

    Ties are broken on (|lambda|, Re lambda) so the answer is deterministic.
    """
    jac = np.asarray(jac, dtype=float)
    if jac.size == 0:
        raise EigenSolverError(jac, "empty matrix")
    if not np.all(np.isfinite(jac)):
        raise EigenSolverError(jac, "non-finite entries")
    try:
        lam = np.linalg.eigvals(jac)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(jac, str(exc)) from None
    order = np.lexsort((lam.real, np.abs(lam)))
    return float(lam[order[0]].real)


def sign_change_index(values):
    """Index ``k`` of the first pair ``(values[k], values[k+1])`` with opposite signs, else None."""
    v = np.sign(np.asarray(values, dtype=float))
    flips = np.flatnonzero(v[:-1] * v[1:] < 0)
    return int(flips[0]) if flips.size else None


def margin_from_event(event, P0):
    return event.z_star * P0


def make_event(t, z, z0, P0, cause, trace=()):
    z_star = z - z0
    return CollapseEvent(t_collapse=t, z_star=z_star, margin_mw=z_star * P0, cause=cause,
                         eig_trace=tuple(trace))


def detect_collapse(history, outcome, V, *, P0, z0=0.0, v_floor=0.5, trace_len=20):
    """First-to-fire collapse test over the latest step.

    ``history`` is the sequence of :class:`EigSample` (oldest first),
    ``outcome`` the :class:`StepOutcome` of the step just taken (``converged``
    False means Newton failed even after the reduced-step retry) and ``V`` the
    bus voltages after the step. Each criterion reports the earlier boundary
    of its triggering interval; the earliest wins, ties follow the order
    sign change, divergence, voltage floor.
    """
    candidates = []
    trace = [s.value for s in history[-trace_len:]]
    if len(history) >= 2:
        k = sign_change_index(trace[-2:])
        if k is not None:
            s = history[-2]
            candidates.append((s.t, s.z, JACOBIAN_SIGN_CHANGE))
    if not outcome.converged:
        candidates.append((outcome.t_start, outcome.z_start, ALGEBRAIC_DIVERGENCE))
    elif V is not None and np.min(V) < v_floor:
        candidates.append((outcome.t_start, outcome.z_start, VOLTAGE_FLOOR))
    if not candidates:
        return None
    t, z, cause = min(candidates, key=lambda c: (c[0], _RANK[c[2]]))
    return make_event(t, z, z0, P0, cause, trace)
