"""Independent reference implementations used only by the tests.

Each oracle follows a textbook definition directly and shares no code with
the package, so agreement between the two is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def ridge_oracle(X, y, prior_precision: float, noise_precision: float):
    """Batch posterior of Bayesian linear regression: ``(mean, precision)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    precision = noise_precision * X.T @ X + prior_precision * np.eye(X.shape[1])
    mean = np.linalg.solve(precision, noise_precision * X.T @ y)
    return mean, precision


def shapley_by_permutations(value, n: int) -> np.ndarray:
    """Average marginal loss reduction over all ``n!`` orderings."""
    phi = np.zeros(n)
    count = 0
    for order in itertools.permutations(range(n)):
        seen: frozenset = frozenset()
        for i in order:
            phi[i] += value(seen) - value(seen | {i})
            seen = seen | {i}
        count += 1
    return phi / count


def banzhaf_by_subsets(value, n: int) -> np.ndarray:
    """Uniform average of marginal loss reductions over subsets of the others."""
    phi = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        total = 0.0
        for r in range(n):
            for subset in itertools.combinations(others, r):
                s = frozenset(subset)
                total += value(s) - value(s | {i})
        phi[i] = total / 2 ** (n - 1)
    return phi


def conditional_gaussian(mean, cov, given, values):
    """Mean and covariance of the other coordinates given ``x[given] = values``."""
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    n = mean.size
    rest = [i for i in range(n) if i not in given]
    if not given:
        return mean[rest], cov[np.ix_(rest, rest)]
    S_gg = cov[np.ix_(given, given)]
    S_rg = cov[np.ix_(rest, given)]
    K = S_rg @ np.linalg.inv(S_gg)
    m = mean[rest] + K @ (np.asarray(values, float) - mean[given])
    C = cov[np.ix_(rest, rest)] - K @ S_rg.T
    return m, C


def expected_squared_error(intercept, weights, mean, cov, kept, x, y, conditioning):
    """Brute-force expected squared error of a linear predictor over a Gaussian fill-in."""
    kept = sorted(kept)
    rest = [i for i in range(len(weights)) if i not in kept]
    if conditioning == "observational":
        m, C = conditional_gaussian(mean, cov, kept, np.asarray(x)[kept])
    else:
        m, C = np.asarray(mean)[rest], np.asarray(cov)[np.ix_(rest, rest)]
    w = np.asarray(weights, float)
    pred = intercept + w[kept] @ np.asarray(x, float)[kept] + w[rest] @ m
    return float((pred - y) ** 2 + w[rest] @ C @ w[rest])


def phi_moments_mc(mean_w, var_w, var_x, draws: int, seed: int):
    """Sample mean and variance of ``w**2 * var_x`` with ``w`` Gaussian."""
    rng = np.random.default_rng(seed)
    w = mean_w + math.sqrt(var_w) * rng.standard_normal(draws)
    phi = w ** 2 * var_x
    return float(phi.mean()), float(phi.var(ddof=1))
