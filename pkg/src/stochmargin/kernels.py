"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names (``ou_path``, ``power_injections``, ``mismatch``,
``jacobian``) resolve to the numba variants unless numba is disabled via
``STOCHMARGIN_DISABLE_NUMBA``. Both variants are importable so the test-suite
and ``benchmarks/bench_kernels.py`` can compare them directly.

Network conventions: unknowns are ordered ``[theta[pvpq], Vm[pq]]`` and the
mismatch rows ``[dP[pvpq], dQ[pq]]``. Voltage-dependent loads enter as a list
of terms ``coef * Vm[bus] ** exp`` (one list for P, one for Q), which keeps the
exponential-recovery, ramp and static loads in a single representation.
"""
import numpy as np
from scipy.signal import lfilter

from ._accel import njit, pick


# -- OU recursion ---------------------------------------------------------

@njit
def ou_path_numba(eta0, decay, scale, normals):
    n = normals.shape[0]
    out = np.empty(n + 1)
    out[0] = eta0
    eta = eta0
    for k in range(n):
        eta = decay * eta + scale * normals[k]
        out[k + 1] = eta
    return out


def ou_path_numpy(eta0, decay, scale, normals):
    normals = np.asarray(normals, dtype=float)
    out = np.empty(normals.shape[0] + 1)
    out[0] = eta0
    if normals.shape[0]:
        out[1:], _ = lfilter([1.0], [1.0, -decay], scale * normals, zi=[decay * eta0])
    return out


# -- network power flow ---------------------------------------------------

@njit
def power_injections_numba(G, B, Vm, Va):
    n = Vm.shape[0]
    P = np.zeros(n)
    Q = np.zeros(n)
    for i in range(n):
        p = 0.0
        q = 0.0
        for j in range(n):
            g = G[i, j]
            b = B[i, j]
            if g == 0.0 and b == 0.0:
                continue
            d = Va[i] - Va[j]
            c = np.cos(d)
            s = np.sin(d)
            p += Vm[j] * (g * c + b * s)
            q += Vm[j] * (g * s - b * c)
        P[i] = Vm[i] * p
        Q[i] = Vm[i] * q
    return P, Q


def power_injections_numpy(G, B, Vm, Va):
    V = Vm * np.exp(1j * Va)
    S = V * np.conj((G + 1j * B) @ V)
    return S.real.copy(), S.imag.copy()


@njit
def _load_terms_numba(n, bus, coef, expo, Vm):
    val = np.zeros(n)
    der = np.zeros(n)
    for k in range(bus.shape[0]):
        i = bus[k]
        e = expo[k]
        if e == 0.0:
            val[i] += coef[k]
        else:
            val[i] += coef[k] * Vm[i] ** e
            der[i] += e * coef[k] * Vm[i] ** (e - 1.0)
    return val, der


def _load_terms_numpy(n, bus, coef, expo, Vm):
    v = Vm[bus]
    val = np.bincount(bus, weights=coef * v ** expo, minlength=n)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(expo == 0.0, 0.0, expo * coef * v ** (expo - 1.0))
    der = np.bincount(bus, weights=d, minlength=n)
    return val, der


@njit
def _index_maps(n, pvpq, pq):
    row_p = np.full(n, -1, np.int64)
    row_q = np.full(n, -1, np.int64)
    npv = pvpq.shape[0]
    for k in range(npv):
        row_p[pvpq[k]] = k
    for k in range(pq.shape[0]):
        row_q[pq[k]] = npv + k
    return row_p, row_q


@njit
def _evaluate_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                    qbus, qcoef, qexp, pvpq, pq, want_jac):
    # theta and |V| columns share the row maps: unknown theta_i sits at row_p[i],
    # unknown |V|_i at row_q[i]
    n = Vm.shape[0]
    row_p, row_q = _index_maps(n, pvpq, pq)
    m = pvpq.shape[0] + pq.shape[0]
    pl, dpl = _load_terms_numba(n, pbus, pcoef, pexp, Vm)
    ql, dql = _load_terms_numba(n, qbus, qcoef, qexp, Vm)
    P = np.zeros(n)
    Q = np.zeros(n)
    J = np.zeros((m, m)) if want_jac else np.zeros((0, 0))
    for i in range(n):
        rp = row_p[i]
        rq = row_q[i]
        for j in range(n):
            g = G[i, j]
            b = B[i, j]
            if g == 0.0 and b == 0.0:
                continue
            d = Va[i] - Va[j]
            c = np.cos(d)
            s = np.sin(d)
            a = g * c + b * s
            bb = g * s - b * c
            P[i] += Vm[i] * Vm[j] * a
            Q[i] += Vm[i] * Vm[j] * bb
            if want_jac and j != i:
                ct = row_p[j]
                cv = row_q[j]
                if rp >= 0:
                    if ct >= 0:
                        J[rp, ct] = Vm[i] * Vm[j] * bb
                    if cv >= 0:
                        J[rp, cv] = Vm[i] * a
                if rq >= 0:
                    if ct >= 0:
                        J[rq, ct] = -Vm[i] * Vm[j] * a
                    if cv >= 0:
                        J[rq, cv] = Vm[i] * bb
    if want_jac:
        for i in range(n):
            rp = row_p[i]
            rq = row_q[i]
            if rp >= 0:
                J[rp, rp] = -Q[i] - B[i, i] * Vm[i] * Vm[i]
                if rq >= 0:
                    J[rp, rq] = P[i] / Vm[i] + G[i, i] * Vm[i] + dpl[i]
            if rq >= 0:
                J[rq, rq] = Q[i] / Vm[i] - B[i, i] * Vm[i] + dql[i]
                if rp >= 0:
                    J[rq, rp] = P[i] - G[i, i] * Vm[i] * Vm[i]
    F = np.empty(m)
    for i in range(n):
        if row_p[i] >= 0:
            F[row_p[i]] = P[i] - p_fix[i] + pl[i]
        if row_q[i] >= 0:
            F[row_q[i]] = Q[i] - q_fix[i] + ql[i]
    return F, J


@njit
def mismatch_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                   qbus, qcoef, qexp, pvpq, pq):
    F, _ = _evaluate_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                           qbus, qcoef, qexp, pvpq, pq, False)
    return F


def mismatch_numpy(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                   qbus, qcoef, qexp, pvpq, pq):
    n = Vm.shape[0]
    P, Q = power_injections_numpy(G, B, Vm, Va)
    pl, _ = _load_terms_numpy(n, pbus, pcoef, pexp, Vm)
    ql, _ = _load_terms_numpy(n, qbus, qcoef, qexp, Vm)
    return np.concatenate(((P - p_fix + pl)[pvpq], (Q - q_fix + ql)[pq]))


@njit
def jacobian_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                   qbus, qcoef, qexp, pvpq, pq):
    _, J = _evaluate_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                           qbus, qcoef, qexp, pvpq, pq, True)
    return J


def jacobian_numpy(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                   qbus, qcoef, qexp, pvpq, pq):
    n = Vm.shape[0]
    Y = G + 1j * B
    V = Vm * np.exp(1j * Va)
    I = Y @ V
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    Vnorm = V / Vm
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(I) * Vnorm)
    _, dpl = _load_terms_numpy(n, pbus, pcoef, pexp, Vm)
    _, dql = _load_terms_numpy(n, qbus, qcoef, qexp, Vm)
    dS_dVm = dS_dVm + np.diag(dpl + 1j * dql)
    top = np.hstack((dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]))
    bot = np.hstack((dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]))
    return np.vstack((top, bot))


# -- Newton iteration ------------------------------------------------------
# status codes shared by both variants
CONVERGED, MAX_ITER, NONFINITE, NONPOSITIVE_V = 0, 1, 2, 3


@njit
def newton_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                 qbus, qcoef, qexp, pvpq, pq, tol, max_iter):
    """Updates ``Vm``/``Va`` in place; returns ``(status, iterations, max_mismatch)``.

    A singular Jacobian surfaces as ``np.linalg.LinAlgError`` from the solve.
    """
    npv = pvpq.shape[0]
    F, J = _evaluate_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                           qbus, qcoef, qexp, pvpq, pq, True)
    it = 0
    while True:
        err = 0.0
        for k in range(F.shape[0]):
            if not np.isfinite(F[k]):
                return NONFINITE, it, np.inf
            err = max(err, abs(F[k]))
        if err <= tol:
            return CONVERGED, it, err
        if it == max_iter:
            return MAX_ITER, it, err
        dx = np.linalg.solve(J, -F)
        for k in range(npv):
            Va[pvpq[k]] += dx[k]
        for k in range(pq.shape[0]):
            Vm[pq[k]] += dx[npv + k]
            if Vm[pq[k]] <= 0.0:
                return NONPOSITIVE_V, it + 1, err
        it += 1
        F, J = _evaluate_numba(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                               qbus, qcoef, qexp, pvpq, pq, True)


def newton_numpy(G, B, Vm, Va, p_fix, q_fix, pbus, pcoef, pexp,
                 qbus, qcoef, qexp, pvpq, pq, tol, max_iter):
    npv = pvpq.shape[0]
    rest = (p_fix, q_fix, pbus, pcoef, pexp, qbus, qcoef, qexp, pvpq, pq)
    F = mismatch_numpy(G, B, Vm, Va, *rest)
    it = 0
    while True:
        if not np.all(np.isfinite(F)):
            return NONFINITE, it, np.inf
        err = np.max(np.abs(F)) if F.size else 0.0
        if err <= tol:
            return CONVERGED, it, err
        if it == max_iter:
            return MAX_ITER, it, err
        dx = np.linalg.solve(jacobian_numpy(G, B, Vm, Va, *rest), -F)
        Va[pvpq] += dx[:npv]
        Vm[pq] += dx[npv:]
        if np.any(Vm[pq] <= 0):
            return NONPOSITIVE_V, it + 1, err
        it += 1
        F = mismatch_numpy(G, B, Vm, Va, *rest)


ou_path = pick(ou_path_numba, ou_path_numpy)
power_injections = pick(power_injections_numba, power_injections_numpy)
mismatch = pick(mismatch_numba, mismatch_numpy)
jacobian = pick(jacobian_numba, jacobian_numpy)
newton = pick(newton_numba, newton_numpy)
