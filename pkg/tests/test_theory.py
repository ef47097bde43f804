import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dropout_rashomon.errors import InvalidArgument
from dropout_rashomon.models import DropoutSpec, ModelParams, NetworkSpec, forward, init_params, ridge_fit
from dropout_rashomon.numerics import Rng
from dropout_rashomon.synth import gaussian_blobs, gaussian_regression, orthonormal_design
from dropout_rashomon.theory import (
    BoundInputs,
    prop1_expected_epsilon,
    prop1_monte_carlo,
    prop2_bound,
    prop2_monte_carlo,
    prop3_bound,
    prop4_bound,
    prop4_monte_carlo,
    prop5_bound,
    surrogate_variance_estimate,
    whiten,
)
from dropout_rashomon.training import Dataset, TrainConfig, sgd_train


def test_prop1_closed_form_edges():
    data, _ = gaussian_regression(50, 5, seed=1)
    assert prop1_expected_epsilon(data.X, data.y, 0.1, 0.0) == 0.0
    assert prop1_expected_epsilon(data.X, data.y, 0.1, 1.0) == 0.0


def test_prop1_orthonormal_matches_target_norm():
    X = orthonormal_design(40, 6, seed=3)
    y = np.random.default_rng(3).standard_normal(40)
    for lam in (0.0, 0.5):
        got = prop1_expected_epsilon(X, y, lam, 0.5)
        # only the projection of y onto the column span survives; with n > d that is ||X^T y||^2
        assert got == pytest.approx(0.25 / (1 + lam) ** 2 * np.sum((X.T @ y) ** 2), rel=1e-10)


def test_prop1_square_orthonormal_uses_full_target():
    X = orthonormal_design(8, 8, seed=4)
    y = np.random.default_rng(4).standard_normal(8)
    assert prop1_expected_epsilon(X, y, 0.0, 0.5) == pytest.approx(0.25 * y @ y, rel=1e-10)


def test_prop1_expectation_by_enumeration():
    # exact expectation by summing over all 2^d masks
    rng = np.random.default_rng(5)
    X, y, p = rng.standard_normal((12, 4)), rng.standard_normal(12), 0.3
    w = ridge_fit(X, y, 0.2).weights
    ref = np.sum(((1 - p) * X @ w - y) ** 2)
    total = 0.0
    for bits in range(16):
        z = np.array([(bits >> i) & 1 for i in range(4)], dtype=float)
        total += p ** (4 - z.sum()) * (1 - p) ** z.sum() * (np.sum((X @ (z * w) - y) ** 2) - ref)
    assert prop1_expected_epsilon(X, y, 0.2, p) == pytest.approx(total, rel=1e-10)


def test_prop1_monte_carlo_small():
    data, _ = gaussian_regression(200, 10, seed=0)
    r = prop1_monte_carlo(data.X, data.y, 0.0, 0.1, trials=20000, seed=1)
    assert r.passed and r.trials == 20000
    zero = prop1_monte_carlo(data.X, data.y, 0.0, 0.0, trials=1000, seed=1)
    assert zero.detail["all_zero"] and zero.statistic == 0.0


def test_prop1_monte_carlo_is_reproducible():
    data, _ = gaussian_regression(100, 5, seed=2)
    a = prop1_monte_carlo(data.X, data.y, 0.0, 0.2, trials=2000, seed=7)
    b = prop1_monte_carlo(data.X, data.y, 0.0, 0.2, trials=2000, seed=7, threads=4)
    assert a.to_dict() == b.to_dict()


def test_prop1_variance_grows_with_dimension():
    var = []
    for d in (10, 200):
        data, _ = gaussian_regression(300, d, seed=d)
        var.append(prop1_monte_carlo(data.X, data.y, 0.0, 0.1, trials=5000, seed=3).detail["variance"])
    assert var[1] > var[0]


def test_prop1_needs_enough_trials():
    data, _ = gaussian_regression(20, 2, seed=0)
    with pytest.raises(InvalidArgument):
        prop1_monte_carlo(data.X, data.y, 0.0, 0.1, trials=10)


def test_prop2_bound_arithmetic():
    assert prop2_bound(BoundInputs(p=0.0, M=3.0, epsilon=0.1)).value == 1.0
    assert prop2_bound(BoundInputs(p=0.1, lam=0.0, M=1.0, epsilon=0.5)).value == pytest.approx(0.8)
    assert prop2_bound(BoundInputs("gaussian", alpha=0.2, lam=1.0, M=1.0, epsilon=1.0)).value == pytest.approx(0.6)
    b = prop2_bound(BoundInputs(p=0.5, M=10.0, epsilon=1.0))
    assert b.value == 0.0 and b.raw == pytest.approx(-4.0)
    with pytest.raises(InvalidArgument):
        prop2_bound(BoundInputs(p=0.1, epsilon=0.0))


def test_prop3_bound_arithmetic():
    assert prop3_bound(BoundInputs(p=0.0, d=10, epsilon=0.5)).value == 1.0
    got = prop3_bound(BoundInputs(p=0.01, M=1.0, d=10, mean_x_norm=1.0, epsilon=0.5))
    assert got.value == pytest.approx(0.8)
    with pytest.raises(InvalidArgument):
        prop3_bound(BoundInputs(p=0.1, epsilon=-1.0))


@settings(max_examples=100, deadline=None)
@given(p=st.floats(0, 1), lam=st.floats(0, 5), M=st.floats(0.01, 10), eps=st.floats(0.01, 10),
       d=st.integers(1, 100), mx=st.floats(0.01, 10))
def test_prop3_is_prop2_scaled_by_d(p, lam, M, eps, d, mx):
    inp = BoundInputs(p=p, lam=lam, M=M, epsilon=eps, d=d, mean_x_norm=mx)
    r2, r3 = prop2_bound(inp).raw, prop3_bound(inp).raw
    assert (1 - r3) == pytest.approx((1 - r2) * d * mx, rel=1e-9, abs=1e-12)
    if d * mx >= 1:
        assert r2 >= r3 - 1e-12


def test_whiten_gives_orthonormal_design():
    X = np.random.default_rng(0).standard_normal((60, 7))
    Xw, S = whiten(X)
    assert np.allclose(Xw.T @ Xw, np.eye(7), atol=1e-10)
    assert np.allclose(X @ S, Xw)


def test_prop2_monte_carlo():
    X = orthonormal_design(300, 50, seed=1)
    y = np.random.default_rng(1).standard_normal(300)
    w = ridge_fit(X, y, 0.0).weights
    M = w @ w
    r = prop2_monte_carlo(X, y, 0.0, DropoutSpec.bernoulli(0.02, seed=2), 0.02 * M / 0.2, trials=5000)
    assert r.passed and r.theory == pytest.approx(0.8) and r.statistic >= 0.8
    one = prop2_monte_carlo(X, y, 0.0, DropoutSpec.bernoulli(0.0, seed=2), 0.01, trials=200)
    assert one.statistic == 1.0
    freqs = [prop2_monte_carlo(X, y, 0.0, DropoutSpec.bernoulli(p, seed=3), 0.05 * M, trials=2000).statistic
             for p in (0.01, 0.05, 0.1)]
    assert freqs[0] >= freqs[1] >= freqs[2]


def test_prop2_rejects_unwhitened_design():
    X = np.random.default_rng(0).standard_normal((30, 3))
    with pytest.raises(InvalidArgument):
        prop2_monte_carlo(X, np.ones(30), 0.0, DropoutSpec.bernoulli(0.1), 1.0, trials=10)


def test_prop4_bound_arithmetic():
    assert prop4_bound(BoundInputs("gaussian", alpha=0.0, K=3, m=10, M=2.0, rho=0.1)) == 0.0
    assert prop4_bound(BoundInputs("gaussian", alpha=0.1, K=1, M=1.0, mean_x_norm=1.0, m=10, rho=0.5)) == \
        pytest.approx(2.0)
    assert prop4_bound(BoundInputs("gaussian", alpha=0.1, K=2, M=1.0, mean_x_norm=1.0, m=5, rho=1.0)) == \
        pytest.approx(1.25)
    with pytest.raises(InvalidArgument):
        prop4_bound(BoundInputs("gaussian", alpha=0.1, rho=0.0))


def test_prop4_bound_vanishes_with_alpha():
    vals = [prop4_bound(BoundInputs("gaussian", alpha=a, K=3, m=8, M=4.0, mean_x_norm=2.0, rho=0.1))
            for a in (1e-2, 1e-4, 1e-6, 1e-8, 1e-10)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-5


@pytest.fixture(scope="module")
def net_10_8_2():
    data = gaussian_blobs(100, 10, 2, separation=2.0, seed=3)
    spec = NetworkSpec((10, 8, 2))
    base = sgd_train(spec, init_params(spec, Rng(0)), data, TrainConfig(epochs=50, learning_rate=0.1,
                                                                         batch_size=20))
    return spec, base, data


def test_prop4_monte_carlo(net_10_8_2):
    spec, base, data = net_10_8_2
    zero = prop4_monte_carlo(spec, base, data, 0.0, 0.1, trials=50, seed=1)
    assert zero.statistic == 1.0 and zero.detail["max_deviation"] == 0.0
    r = prop4_monte_carlo(spec, base, data, 0.01, 0.1, trials=2000, seed=1)
    assert r.passed and r.detail["m"] == 8 and r.detail["K"] == 2
    hi = prop4_monte_carlo(spec, base, data, 0.02, 0.1, trials=500, seed=2)
    lo = prop4_monte_carlo(spec, base, data, 0.005, 0.1, trials=500, seed=2)
    assert hi.detail["median_deviation"] > lo.detail["median_deviation"]


def test_prop4_requires_bias_free(net_10_8_2):
    _, _, data = net_10_8_2
    spec = NetworkSpec((10, 8, 2), use_bias=True)
    params = init_params(spec, Rng(0))
    with pytest.raises(InvalidArgument):
        prop4_monte_carlo(spec, params, data, 0.01, 0.1, trials=10)


def test_prop5_bound():
    s = math.sqrt(0.005)
    assert prop5_bound(200, 2 / math.e**2, 1.0, 10**6, 1.0) == pytest.approx(s * (1 + s), rel=1e-12)
    assert prop5_bound(200, 2 / math.e**2, 1.0, 10**6, 1.0) == pytest.approx(0.07571, abs=1e-5)
    vals = [prop5_bound(T, 0.1, 0.1, 100, 0.5) for T in (10, 100, 1000)]
    assert vals[0] > vals[1] > vals[2]
    for n in (1, 2, 10, 1000):
        assert prop5_bound(100, 0.1, 0.1, 100, 0.5, n=n) >= prop5_bound(100, 0.1, 0.1, 100, 0.5)
    with pytest.raises(InvalidArgument):
        prop5_bound(10, 0.0, 0.1, 10, 1.0)
    with pytest.raises(InvalidArgument):
        prop5_bound(10, 1.5, 0.1, 10, 1.0)


def test_surrogate_zero_noise(net_10_8_2):
    spec, base, data = net_10_8_2
    x, y = data.X[0], int(data.y[0])
    mu, v = surrogate_variance_estimate(spec, base, x, y, 0.0, 10, seed=1)
    assert mu == forward(spec, base, x)[y] and v == mu * (1 - mu)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), alpha=st.floats(0, 2), idx=st.integers(0, 99))
def test_surrogate_ranges(net_10_8_2, seed, alpha, idx):
    spec, base, data = net_10_8_2
    mu, v = surrogate_variance_estimate(spec, base, data.X[idx], int(data.y[idx]), alpha, 5, seed=seed)
    assert 0.0 <= mu <= 1.0 and 0.0 <= v <= 0.25


def test_surrogate_converges_with_t():
    # a confidently wrong point so the true-class score has real spread under noise
    spec = NetworkSpec((3, 6, 2))
    base = ModelParams([np.random.default_rng(0).standard_normal((3, 6)),
                        np.random.default_rng(1).standard_normal((6, 2))])
    x, y, alpha = np.array([1.0, -0.5, 0.3]), 0, 0.5
    ref, _ = surrogate_variance_estimate(spec, base, x, y, alpha, 50000, seed=99)
    errs = {}
    for T in (500, 2000):
        e = [abs(surrogate_variance_estimate(spec, base, x, y, alpha, T, seed=s)[0] - ref) for s in range(20)]
        errs[T] = float(np.sqrt(np.mean(np.square(e))))
    assert 0.3 < errs[2000] / errs[500] < 0.75
