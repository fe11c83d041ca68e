"""Closed forms and quadratures used as independent references in the tests.

Nothing here imports pathhedge; each value is computed a second way.
"""

import json
import math
from pathlib import Path

from scipy import integrate


def ncdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def bs_call(spot: float, strike: float, sigma: float, tau: float) -> float:
    s = sigma * math.sqrt(tau)
    d1 = (math.log(spot / strike) + 0.5 * s * s) / s
    return spot * ncdf(d1) - strike * ncdf(d1 - s)


def bs_delta(spot: float, strike: float, sigma: float, tau: float) -> float:
    s = sigma * math.sqrt(tau)
    return ncdf((math.log(spot / strike) + 0.5 * s * s) / s)


def heat_square(x: float, tau: float, a: float = 2.0) -> float:
    """Solution of v_t + a/2 v_xx = 0 with v(T) = x^2."""
    return x * x + a * tau


def lookback_quadrature(x: float, m: float, sigma: float, tau: float) -> float:
    """E[max(m, max_{r <= tau} X_r)] for driftless geometric Brownian motion from x.

    log(X/x) is Brownian motion with drift -sigma^2/2; integrate the tail of its
    running maximum, P(M > y) = N((-y + mu tau)/s) + exp(2 mu y / sigma^2) N((-y - mu tau)/s).
    """
    mu = -0.5 * sigma * sigma
    s = sigma * math.sqrt(tau)

    def tail(y):
        return ncdf((-y + mu * tau) / s) + math.exp(2 * mu * y / sigma**2) * ncdf((-y - mu * tau) / s)

    y0 = math.log(m / x)
    val, _ = integrate.quad(lambda y: math.exp(y) * tail(y), y0, y0 + 40 * s + 1.0,
                            epsabs=1e-12, epsrel=1e-12, limit=200)
    return m + x * val


def asian_n2_oracle() -> dict:
    """Committed 10^6-path Monte-Carlo price of (avg(S(1/2), S(1)) - 100)+."""
    return json.loads((Path(__file__).parent / "fixtures" / "asian_n2_oracle.json").read_text())


def asian_n2_quadrature(spot: float, strike: float, sigma: float, t1: float, t2: float) -> float:
    """E[(avg(S(t1), S(t2)) - K)+] by one-dimensional quadrature over S(t1).

    Given S(t1) = s the payoff is s/2 (R - k)+ with R lognormal of unit mean and
    k = 2K/s - 1, a Black-Scholes call; when k <= 0 it is linear, s - K.
    """
    def integrand(z):
        s = spot * math.exp(sigma * math.sqrt(t1) * z - 0.5 * sigma**2 * t1)
        k = 2 * strike / s - 1
        inner = s - strike if k <= 0 else 0.5 * s * bs_call(1.0, k, sigma, t2 - t1)
        return inner * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    zk = (math.log(2 * strike / spot) + 0.5 * sigma**2 * t1) / (sigma * math.sqrt(t1))
    pieces = [(-12.0, zk), (zk, 12.0)]
    return sum(integrate.quad(integrand, a, b, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
               for a, b in pieces)


def continuous_asian_oracle() -> dict:
    """Committed control-variate Monte-Carlo price of the continuously averaged Asian call."""
    return json.loads((Path(__file__).parent / "fixtures" / "continuous_asian_oracle.json")
                      .read_text())
