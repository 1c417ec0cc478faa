import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ridge_oracle
from regmarket.bayes import (
    LossTracker, ModelConfig, NumericalError, PredictiveDistribution, init_posterior,
    predict, score, track_loss, update, update_batch,
)


def test_init_posterior():
    s = init_posterior(ModelConfig(prior_precision=2.0), 1)
    assert s.mean.tolist() == [0.0] and s.precision.tolist() == [[2.0]]
    with pytest.raises(ValueError):
        init_posterior(ModelConfig(), 0)


def test_fresh_prior_predictive_variance():
    cfg = ModelConfig(include_intercept=False)
    s = init_posterior(cfg, 3)
    assert predict(s, np.array([1.0, 0, 0]), cfg).variance == 2.0
    assert predict(s, np.zeros(3), cfg).variance == 1.0


def test_zero_row_only_forgets():
    cfg = ModelConfig(forgetting=0.9, include_intercept=False)
    s = init_posterior(cfg, 2)
    s = update(s, np.array([1.0, 2.0]), 3.0, cfg)
    t = update(s, np.zeros(2), 0.0, cfg)
    np.testing.assert_allclose(t.precision, 0.9 * s.precision + 0.1 * np.eye(2))


def test_invalid_inputs():
    cfg = ModelConfig()
    s = init_posterior(cfg, 2)
    with pytest.raises(ValueError):
        update(s, np.array([1.0, np.nan]), 0.0, cfg)
    with pytest.raises(ValueError):
        predict(s, np.zeros(3), cfg)
    with pytest.raises(ValueError):
        ModelConfig(forgetting=1.5)
    with pytest.raises(ValueError):
        score(PredictiveDistribution(0, 1), 0, "hinge")


def test_score_rules():
    p = PredictiveDistribution(1.0, 0.5)
    assert score(p, 1.0) == 0.0
    assert score(p, 1.0, "nlpd") == pytest.approx(0.5 * math.log(2 * math.pi * 0.5))


def test_nlpd_prefers_true_predictive():
    rng = np.random.default_rng(0)
    y = 0.3 + rng.standard_normal(20_000)
    true = np.mean([score(PredictiveDistribution(0.3, 1.0), v, "nlpd") for v in y])
    off = np.mean([score(PredictiveDistribution(0.6, 1.0), v, "nlpd") for v in y])
    assert true < off


def test_variance_shrinks_with_repeated_rows():
    cfg = ModelConfig(forgetting=1.0, include_intercept=False)
    s = init_posterior(cfg, 2)
    x = np.array([0.5, -1.0])
    last = predict(s, x, cfg).variance
    for _ in range(5):
        s = update(s, x, 1.0, cfg)
        v = predict(s, x, cfg).variance
        assert 1.0 <= v < last
        last = v


def test_converges_to_true_weights():
    rng = np.random.default_rng(1)
    w = np.array([0.5, -1.0, 2.0])
    cfg = ModelConfig(forgetting=0.999, include_intercept=False, noise_precision=100.0)
    s = init_posterior(cfg, 3)
    for _ in range(3000):
        x = rng.standard_normal(3)
        s = update(s, x, float(w @ x + 0.1 * rng.standard_normal()), cfg)
    sd = np.sqrt(np.diag(s.covariance))
    assert np.all(np.abs(s.mean - w) <= 3 * sd + 1e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 500), st.floats(0.1, 10), st.floats(0.1, 10),
       st.integers(0, 2**31 - 1))
def test_batch_equivalence_with_ridge(dim, T, alpha, beta, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T, dim))
    y = X @ rng.standard_normal(dim) + rng.standard_normal(T)
    cfg = ModelConfig(alpha, beta, 1.0, include_intercept=False)
    s = update_batch(init_posterior(cfg, dim), X, y, cfg)
    mean, prec = ridge_oracle(X, y, alpha, beta)
    assert np.linalg.norm(s.mean - mean) <= 1e-8 * max(np.linalg.norm(mean), 1e-12) + 1e-12
    np.testing.assert_allclose(s.precision - alpha * np.eye(dim), beta * X.T @ X, atol=1e-10 * T)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.lists(st.floats(0, 100), min_size=1, max_size=30))
def test_tracker_stays_within_observed_range(tau, losses):
    tr = LossTracker(tau)
    for v in losses:
        tr = track_loss(tr, v)
    assert min(losses) - 1e-9 <= tr.value <= max(losses) + 1e-9
    assert tr.count == len(losses)


def test_tracker_recursion():
    tr = LossTracker(0.5, 0.0)
    tr = track_loss(track_loss(tr, 1.0), 1.0)
    assert tr.value == 0.75
    assert track_loss(LossTracker(0.9), 4.0).value == 4.0
    slow = LossTracker(1.0, 2.0)
    assert track_loss(slow, 100.0).value == 2.0
    with pytest.raises(ValueError):
        track_loss(tr, math.inf)


def test_forgetting_keeps_precision_definite():
    cfg = ModelConfig(forgetting=0.5)
    s = init_posterior(cfg, 3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = update(s, cfg.design(1e3 * rng.standard_normal(2)), 1.0, cfg)
    assert np.all(np.linalg.eigvalsh(s.precision) > 0)
    assert issubclass(NumericalError, ArithmeticError)
