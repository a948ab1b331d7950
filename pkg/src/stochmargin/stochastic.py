"""Ornstein-Uhlenbeck noise channels and the renewable-resource processes.

Wind speed and solar irradiance are produced by pushing a standardised OU
value through the Gaussian CDF and then through the inverse of the target
marginal (Weibull for wind, Beta for irradiance). The marginal is therefore
exact and the autocorrelation approximately that of the OU channel.
"""
from dataclasses import dataclass, replace
import math

import numpy as np
from scipy.special import betainc, betaln, ndtr

from . import kernels

EULER_MARUYAMA = "euler-maruyama"
EXACT_OU = "exact-ou"
SCHEMES = (EULER_MARUYAMA, EXACT_OU)

WEIBULL_EPS = 1e-15


class InverseCdfError(ArithmeticError):
    """Raised when the inverse Beta CDF fails to converge."""

    def __init__(self, iterations, worst_residual):
        super().__init__(
            f"inverse Beta CDF did not converge after {iterations} iterations "
            f"(worst |F(x) - u| = {worst_residual:.3e})"
        )
        self.iterations = iterations
        self.worst_residual = worst_residual


@dataclass(frozen=True)
class OuParams:
    alpha: float
    beta: float
    sigma: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"OU alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"OU beta must be >= 0, got {self.beta}")
        if not self.sigma >= 0:
            raise ValueError(f"OU sigma must be >= 0, got {self.sigma}")

    @classmethod
    def standard(cls, alpha, sigma=1.0):
        """Channel with ``beta = sqrt(2 alpha)``, so the stationary std is ``sigma``."""
        return cls(alpha=alpha, beta=math.sqrt(2.0 * alpha), sigma=sigma)

    @property
    def stationary_variance(self):
        return (self.sigma * self.beta) ** 2 / (2.0 * self.alpha)

    @property
    def stationary_std(self):
        return math.sqrt(self.stationary_variance)


@dataclass(frozen=True)
class OuState:
    value: float
    rng_stream: np.random.Generator


@dataclass(frozen=True)
class WeibullParams:
    lam: float
    k: float
    alpha_w: float

    def __post_init__(self):
        if not (self.lam > 0 and self.k > 0 and self.alpha_w > 0):
            raise ValueError(f"Weibull parameters must be positive: {self}")

    @property
    def mean(self):
        return self.lam * math.gamma(1.0 + 1.0 / self.k)

    @property
    def variance(self):
        return self.lam ** 2 * math.gamma(1.0 + 2.0 / self.k) - self.mean ** 2


@dataclass(frozen=True)
class BetaParams:
    p: float
    q: float
    alpha_s: float

    def __post_init__(self):
        if not (self.p > 0 and self.q > 0 and self.alpha_s > 0):
            raise ValueError(f"Beta parameters must be positive: {self}")

    @property
    def mean(self):
        return self.p / (self.p + self.q)

    @property
    def variance(self):
        s = self.p + self.q
        return self.p * self.q / (s * s * (s + 1.0))


@dataclass(frozen=True)
class PvCurveParams:
    r_c: float = 150.0
    r_std: float = 1000.0
    P_r: float = 100.0

    def __post_init__(self):
        if not 0 < self.r_c < self.r_std:
            raise ValueError(f"PV curve needs 0 < r_c < r_std, got r_c={self.r_c}, r_std={self.r_std}")
        if not self.P_r > 0:
            raise ValueError(f"PV rated power must be > 0, got {self.P_r}")


@dataclass(frozen=True)
class WindCurveParams:
    w_ci: float = 3.0
    w_r: float = 12.0
    w_co: float = 25.0
    P_r: float = 100.0

    def __post_init__(self):
        if not 0 <= self.w_ci < self.w_r <= self.w_co:
            raise ValueError(f"wind curve needs 0 <= cut-in < rated <= cut-out: {self}")
        if not self.P_r > 0:
            raise ValueError(f"wind rated power must be > 0, got {self.P_r}")


# -- OU channel -----------------------------------------------------------

def make_rng(seed):
    """Accepts an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def ou_init(params, seed):
    rng = make_rng(seed)
    # always draw, so the stream position does not depend on sigma
    xi = rng.standard_normal()
    return OuState(value=params.stationary_std * xi, rng_stream=rng)


def ou_coefficients(params, dt, scheme=EULER_MARUYAMA):
    """Return ``(decay, scale)`` so that ``eta_next = decay * eta + scale * N(0, 1)``."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    a, sb = params.alpha, params.sigma * params.beta
    if scheme == EULER_MARUYAMA:
        return 1.0 - a * dt, sb * math.sqrt(dt)
    if scheme == EXACT_OU:
        decay = math.exp(-a * dt)
        return decay, sb * math.sqrt(-math.expm1(-2.0 * a * dt) / (2.0 * a))
    raise ValueError(f"unknown OU scheme {scheme!r}; expected one of {SCHEMES}")


def ou_step(state, params, dt, scheme=EULER_MARUYAMA):
    decay, scale = ou_coefficients(params, dt, scheme)
    xi = state.rng_stream.standard_normal()
    return replace(state, value=decay * state.value + scale * xi)


def ou_trajectory(params, n_steps, dt, seed, scheme=EULER_MARUYAMA):
    """``n_steps + 1`` samples starting from a stationary draw.

    Uses the same stream layout as repeated :func:`ou_step` calls, so the two
    agree sample-for-sample for the same seed.
    """
    state = ou_init(params, seed)
    decay, scale = ou_coefficients(params, dt, scheme)
    normals = state.rng_stream.standard_normal(n_steps)
    return kernels.ou_path(float(state.value), decay, scale, normals)


# -- memoryless transforms -------------------------------------------------

def _standardise(eta, ou):
    if not ou.beta > 0:
        raise ValueError("memoryless transform needs ou.beta > 0")
    return np.asarray(eta, dtype=float) / (ou.beta / math.sqrt(2.0 * ou.alpha))


def weibull_ppf(u, params):
    u = np.clip(u, WEIBULL_EPS, 1.0 - WEIBULL_EPS)
    return params.lam * (-np.log1p(-u)) ** (1.0 / params.k)


def weibull_transform(eta, params, ou):
    z = _standardise(eta, ou)
    # survival probability is computed directly so the upper tail keeps precision
    surv = np.clip(ndtr(-z), WEIBULL_EPS, 1.0 - WEIBULL_EPS)
    w = params.lam * (-np.log(surv)) ** (1.0 / params.k)
    return float(w) if np.ndim(w) == 0 else w


def beta_cdf(x, p, q):
    return betainc(p, q, x)


def beta_ppf(u, p, q, tol=1e-10, max_iter=200):
    """Inverse regularised incomplete beta: Newton steps guarded by a bisection bracket.

    ``tol`` applies to the CDF residual ``|F(x) - u|``. Vectorised over ``u``. A Newton step that leaves the current bracket is
    replaced by the bracket midpoint, so every element converges. Raises
    :class:`InverseCdfError` if some element has not converged after
    ``max_iter`` iterations.
    """
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    if np.any((u < 0) | (u > 1)) or np.any(~np.isfinite(u)):
        raise ValueError("beta_ppf needs probabilities in [0, 1]")

    x = np.empty_like(u)
    x[u == 0.0] = 0.0
    x[u == 1.0] = 1.0
    live = np.flatnonzero((u > 0.0) & (u < 1.0))
    if live.size:
        uu = u[live]
        lo = np.zeros_like(uu)
        hi = np.ones_like(uu)
        xx = np.full_like(uu, p / (p + q))
        log_b = betaln(p, q)
        active = np.ones(uu.shape, dtype=bool)
        for it in range(1, max_iter + 1):
            xa = xx[active]
            f = betainc(p, q, xa) - uu[active]
            below = f < 0
            lo_a = np.where(below, xa, lo[active])
            hi_a = np.where(below, hi[active], xa)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                log_pdf = (p - 1.0) * np.log(xa) + (q - 1.0) * np.log1p(-xa) - log_b
                x_new = xa - f / np.exp(log_pdf)
            bad = ~np.isfinite(x_new) | (x_new <= lo_a) | (x_new >= hi_a)
            x_new = np.where(bad, 0.5 * (lo_a + hi_a), x_new)
            # judged on the probability scale: small x-steps prove nothing where
            # the density blows up, and absolute x tolerances fail near 0
            squeezed = hi_a - lo_a <= 4 * np.finfo(float).eps * hi_a
            done = (np.abs(f) <= tol) | squeezed
            x_new = np.where(done, xa, x_new)
            if squeezed.any():
                # bracket at float resolution: return its best endpoint
                k = np.flatnonzero(squeezed)
                u_k = uu[active][k]
                r_lo = np.abs(betainc(p, q, lo_a[k]) - u_k)
                r_hi = np.abs(betainc(p, q, hi_a[k]) - u_k)
                x_new[k] = np.where(r_hi < r_lo, hi_a[k], lo_a[k])
            idx = np.flatnonzero(active)
            lo[idx], hi[idx], xx[idx] = lo_a, hi_a, x_new
            active[idx[done]] = False
            if not active.any():
                break
        else:
            resid = np.abs(betainc(p, q, xx[active]) - uu[active])
            raise InverseCdfError(max_iter, float(resid.max()))
        x[live] = xx
    return float(x[0]) if scalar else x


def beta_transform(eta, params, ou):
    u = ndtr(_standardise(eta, ou))
    return beta_ppf(u, params.p, params.q)


# -- power curves ----------------------------------------------------------

def pv_power(s, params):
    """PV output (MW) for irradiance ``s`` (W/m^2): quadratic, then linear, then flat."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError(f"irradiance must be >= 0, got {s}")
    r_c, r_std, P_r = params.r_c, params.r_std, params.P_r
    out = np.where(
        s_arr < r_c,
        s_arr * s_arr * P_r / (r_c * r_std),
        np.where(s_arr < r_std, s_arr * P_r / r_std, P_r),
    )
    return float(out) if out.ndim == 0 else out


def wind_power(w, curve):
    """Turbine output (MW) for wind speed ``w`` (m/s), cubic between cut-in and rated."""
    w_arr = np.asarray(w, dtype=float)
    if np.any(w_arr < 0):
        raise ValueError(f"wind speed must be >= 0, got {w}")
    ci3, r3 = curve.w_ci ** 3, curve.w_r ** 3
    cubic = curve.P_r * (w_arr ** 3 - ci3) / (r3 - ci3)
    out = np.where(
        w_arr < curve.w_ci, 0.0,
        np.where(w_arr < curve.w_r, cubic, np.where(w_arr <= curve.w_co, curve.P_r, 0.0)),
    )
    return float(out) if out.ndim == 0 else out


def gaussian_expectation(fn, n_nodes=200):
    """E[fn(Z)] for Z ~ N(0, 1) by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    return float(np.sum(w * fn(x)) / math.sqrt(2.0 * math.pi))
