"""First-order flexible-system model and its exact discretization.

The internal state (kWh) follows

    dx/dt = a*x + b*u_s + c*p_opt(t),        a <= 0, c >= 0,

with time measured in hours (a is 1/h), the exogenous input u piece-wise
constant per T_S interval and p_opt the dispatched power (kW).  Because
p_opt is affine on every T_S interval, the step map is exact:

    x_s = f*x_{s-1} + g*u_s + h1*p_{s-1} + h2*p_s + gamma*v_s

with f = exp(a*T), g = b*int_0^T exp(a*tau) dtau,
h1 = (c/T)*int exp(a*tau)*tau dtau, h2 = (c/T)*int exp(a*tau)*(T-tau) dtau
(T = T_S in hours), and v_s = c*int_0^T exp(a*tau) w(s*T - tau) dtau the
activation carry-over.  Near a = 0 the closed forms cancel
catastrophically, so |a*T| <= 1e-2 switches to truncated series accurate
to well below 1e-12 relative.

The uncertain integral v_s is bounded by freezing exp(a*tau) at the
midpoint value e_a_tau_hat = (1 + f)/2 with residual radius
eps = (1 - f)/2, which is tight at tau in {0, T}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .market_time import SECONDS_PER_HOUR, Timescales

#: below this |a*T| the series branch replaces the closed forms
_SERIES_THRESHOLD = 1e-2


def _phi1(x: float) -> float:
    """(e^x - 1)/x, stable at small |x|;  int_0^T e^{a tau} dtau = T*phi1(aT)."""
    if abs(x) < _SERIES_THRESHOLD:
        # sum_{n>=0} x^n/(n+1)!
        return 1.0 + x / 2 + x**2 / 6 + x**3 / 24 + x**4 / 120 + x**5 / 720 + x**6 / 5040
    return np.expm1(x) / x


def _psi(x: float) -> float:
    """(e^x(x-1)+1)/x^2;  int_0^T e^{a tau} tau dtau = T^2*psi(aT)."""
    if abs(x) < _SERIES_THRESHOLD:
        # sum_{n>=0} x^n (n+1)/(n+2)!
        return 0.5 + x / 3 + x**2 / 8 + x**3 / 30 + x**4 / 144 + x**5 / 840 + x**6 / 5760
    return (x * np.exp(x) - np.expm1(x)) / x**2


def discretize(a: float, b: float, c: float, t_step: float) -> tuple[float, float, float, float]:
    """Exact step coefficients (f, g, h1, h2) for step length ``t_step``.

    ``t_step`` must be expressed in the time unit of ``1/a`` (hours
    throughout this package).  The identity h1 + h2 = c*int_0^T e^{a tau} dtau
    holds by construction.
    """
    if t_step <= 0:
        raise ValueError(f"t_step must be positive, got {t_step}")
    x = a * t_step
    f = float(np.exp(x))
    g = b * t_step * _phi1(x)
    h1 = c * t_step * _psi(x)
    h2 = c * t_step * (_phi1(x) - _psi(x))
    return f, g, h1, h2


def epsilon_bound(a: float, t_step: float) -> tuple[float, float]:
    """Midpoint value and radius bounding e^{a tau} on [0, t_step].

    Returns ``(eps, e_a_tau_hat)`` with eps = (1 - e^{aT})/2 and
    e_a_tau_hat = (1 + e^{aT})/2, so |e^{a tau} - e_a_tau_hat| <= eps for
    all tau in [0, T] (a <= 0), with equality at the endpoints.
    """
    if a > 0:
        raise ValueError(f"a must be <= 0, got {a}")
    x = a * t_step
    eps = -np.expm1(x) / 2.0
    e_hat = 1.0 + np.expm1(x) / 2.0
    return float(eps), float(e_hat)


def activation_integral_bounds(a: float, c: float, t_step: float) -> tuple[float, float]:
    """Nominal coefficient and slack radius for the activation carry-over.

    v_s = c*int_0^T e^{a tau} w(sT - tau) dtau lies within
    ``nominal * w_tilde_s +/- slack`` for any admissible w, where
    ``nominal = c*e_a_tau_hat*T`` and ``slack = c*eps*T``.
    """
    eps, e_hat = epsilon_bound(a, t_step)
    return c * e_hat * t_step, c * eps * t_step


@dataclass(frozen=True)
class SystemParams:
    """Physical limits and model coefficients of the flexible system.

    Vectors are per T_S interval (length N_S).  Ramp limits may be
    infinite (no ramp restriction).  The initial state is known only up to
    the interval [x0_min, x0_max].
    """

    a: float
    b: float
    c: float
    u: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    r_lo: np.ndarray
    r_hi: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    x0_min: float
    x0_max: float

    @classmethod
    def constant(
        cls,
        n_s: int,
        *,
        a: float = 0.0,
        b: float = 1.0,
        c: float = 1.0,
        u: float = 0.0,
        p_lo: float,
        p_hi: float,
        x_lo: float,
        x_hi: float,
        x0_min: float,
        x0_max: float,
        r_lo: float = -np.inf,
        r_hi: float = np.inf,
    ) -> "SystemParams":
        """Broadcast scalar limits over ``n_s`` intervals."""
        full = lambda v: np.full(n_s, float(v))
        return cls(
            a=a, b=b, c=c, u=full(u),
            p_lo=full(p_lo), p_hi=full(p_hi),
            r_lo=full(r_lo), r_hi=full(r_hi),
            x_lo=full(x_lo), x_hi=full(x_hi),
            x0_min=float(x0_min), x0_max=float(x0_max),
        )

    def validate(self, n_s: int) -> list[str]:
        problems: list[str] = []
        if self.a > 0:
            problems.append(f"a must be <= 0 (stable or integrating), got {self.a}")
        if self.c < 0:
            problems.append(f"c must be >= 0, got {self.c}")
        for name in ("u", "p_lo", "p_hi", "r_lo", "r_hi", "x_lo", "x_hi"):
            vec = getattr(self, name)
            if np.asarray(vec).shape != (n_s,):
                problems.append(f"{name} must have shape ({n_s},), got {np.shape(vec)}")
        if problems:
            return problems
        if np.any(self.p_lo > self.p_hi):
            problems.append("p_lo must be <= p_hi componentwise")
        if np.any(self.x_lo > self.x_hi):
            problems.append("x_lo must be <= x_hi componentwise")
        if np.any(self.r_lo > 0) or np.any(self.r_hi < 0):
            problems.append("ramp limits must satisfy r_lo <= 0 <= r_hi componentwise")
        if not self.x0_min <= self.x0_max:
            problems.append(f"x0_min ({self.x0_min}) must be <= x0_max ({self.x0_max})")
        if self.x0_min < self.x_lo[0] or self.x0_max > self.x_hi[0]:
            problems.append(
                f"initial-state interval [{self.x0_min}, {self.x0_max}] must lie within "
                f"the first state bounds [{self.x_lo[0]}, {self.x_hi[0]}]"
            )
        return problems


@dataclass(frozen=True)
class DiscreteDynamics:
    """Step coefficients plus the stacked horizon matrices.

    With x = (x_1..x_N), u = (u_1..u_N), p = (p_0..p_N) breakpoints:

        x = F*x0 + G @ u + H @ p + gamma * K @ v

    F[s] = f^{s+1} (1-based power s+1 at row index s), K lower triangular
    with K[s, i] = f^{s-i}, G = g*K, and H combines h1 (weight of the
    interval's start breakpoint) with h2 (end breakpoint) propagated by f.
    When the reference holds its start value through each interval instead
    of interpolating (``hold=True``), H carries h1 + h2 on the start
    breakpoint alone, which is the exact response to a constant drive.
    """

    f: float
    g: float
    h1: float
    h2: float
    eps: float
    e_a_tau_hat: float
    t_step: float
    n: int
    F: np.ndarray
    G: sp.csr_matrix
    H: sp.csr_matrix
    K: sp.csr_matrix


def build_state_matrices(
    a: float, b: float, c: float, t_step: float, n: int, hold: bool = False
) -> DiscreteDynamics:
    """Stack the exact step map over ``n`` intervals (t_step in hours).

    ``hold=True`` integrates the reference as a zero-order hold of each
    interval's start breakpoint (the last breakpoint never enters a state).
    """
    f, g, h1, h2 = discretize(a, b, c, t_step)
    eps, e_hat = epsilon_bound(a, t_step)
    powers = np.ones(n + 1) if f == 1.0 else f ** np.arange(n + 1)

    # K[s, i] = f^(s-i) for 0 <= i <= s (0-based), shape (n, n): row s covers
    # intervals 1..s+1 -> columns 0..s
    rows = np.repeat(np.arange(n), np.arange(1, n + 1))
    cols = np.concatenate([np.arange(s + 1) for s in range(n)]) if n else np.empty(0, dtype=int)
    K = sp.csr_matrix((powers[rows - cols], (rows, cols)), shape=(n, n))
    G = (g * K).tocsr()

    if hold:
        # H[s, j] = f^(s-j)*(h1 + h2) for j <= s: constant drive per interval
        H = sp.csr_matrix(
            (powers[rows - cols] * (h1 + h2), (rows, cols)), shape=(n, n + 1)
        )
    else:
        # H[s, j]: breakpoint j of p enters state s+1 (0-based row s) with
        # f^(s-j)*h1 for j <= s and f^(s+1-j)*h2 for 1 <= j <= s+1
        h_rows = np.concatenate([rows, rows])
        h_cols = np.concatenate([cols, cols + 1])
        h_data = np.concatenate([powers[rows - cols] * h1, powers[rows - cols] * h2])
        H = sp.csr_matrix((h_data, (h_rows, h_cols)), shape=(n, n + 1))
        H.sum_duplicates()

    return DiscreteDynamics(
        f=f, g=g, h1=h1, h2=h2, eps=eps, e_a_tau_hat=e_hat,
        t_step=t_step, n=n, F=powers[1:].copy(), G=G, H=H, K=K,
    )


def discretize_scales(params: SystemParams, ts: Timescales, n_s: int) -> DiscreteDynamics:
    """Convenience wrapper: build the horizon matrices on the T_S grid.

    A zero ramp window means the reference is a left-held step schedule
    rather than an interpolated one, so the state map switches to the
    zero-order-hold quadrature to integrate what is actually delivered.
    """
    return build_state_matrices(
        params.a, params.b, params.c, ts.T_S / SECONDS_PER_HOUR, n_s,
        hold=(ts.T_RP == 0),
    )
