"""Regenerate continuous_asian_oracle.json: E[(I_T / T - K)+] with I_T = int_0^T S dt.

Zero-rate Black-Scholes, sigma = 0.2, S0 = K = 100, T = 1.  Each path takes
1024 exact lognormal steps; the time integral is the trapezoid sum.  The
continuously monitored geometric-average call, whose log average is normal
with mean log S0 - sigma^2 T / 4 and variance sigma^2 T / 3, serves as a
control variate.  Run from the repository root:

    python3 tests/fixtures/make_continuous_asian_oracle.py
"""

import json
import math
from pathlib import Path

import numpy as np
from scipy.stats import norm

SEED = 77
BATCHES, BATCH = 20, 10_000
STEPS = 1024
SIGMA, X0, T, K = 0.2, 100.0, 1.0, 100.0


def geometric_call() -> float:
    m = math.log(X0) - SIGMA**2 * T / 4
    v = SIGMA**2 * T / 3
    d2 = (m - math.log(K)) / math.sqrt(v)
    return math.exp(m + v / 2) * norm.cdf(d2 + math.sqrt(v)) - K * norm.cdf(d2)


def main() -> None:
    rng = np.random.Generator(np.random.Philox(key=SEED))
    dt = T / STEPS
    arith, geo = [], []
    for _ in range(BATCHES):
        z = rng.standard_normal((BATCH, STEPS))
        steps = SIGMA * math.sqrt(dt) * z - 0.5 * SIGMA**2 * dt
        logs = math.log(X0) + np.concatenate([np.zeros((BATCH, 1)), np.cumsum(steps, 1)], 1)
        avg = 0.5 * dt / T * (np.exp(logs[:, 1:]) + np.exp(logs[:, :-1])).sum(1)
        log_avg = 0.5 * dt / T * (logs[:, 1:] + logs[:, :-1]).sum(1)
        arith.append(np.maximum(avg - K, 0.0))
        geo.append(np.maximum(np.exp(log_avg) - K, 0.0))
    a, g = np.concatenate(arith), np.concatenate(geo)
    beta = np.cov(a, g)[0, 1] / g.var()
    est = a - beta * (g - geometric_call())
    out = {
        "description": "control-variate MC price of the continuously averaged Asian call",
        "sigma": SIGMA, "x0": X0, "T": T, "strike": K, "steps": STEPS,
        "generator": "numpy Philox", "seed": SEED, "n_paths": int(a.size),
        "price": float(est.mean()),
        "std_error": float(est.std(ddof=1) / math.sqrt(a.size)),
    }
    target = Path(__file__).with_name("continuous_asian_oracle.json")
    target.write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
