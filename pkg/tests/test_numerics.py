import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dropout_rashomon.errors import InvalidArgument
from dropout_rashomon.numerics import (
    Rng,
    is_simplex,
    nearest_rank_quantile,
    parallel_map,
    sample_bernoulli_diag,
    sample_gaussian_diag,
    softmax,
)


def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(softmax([1000.0, 0.0]), [1.0, 0.0], atol=1e-12, rtol=0)
    assert np.allclose(softmax([np.log(2), 0.0]), [2 / 3, 1 / 3])


def test_softmax_rejects_nonfinite():
    with pytest.raises(InvalidArgument):
        softmax([np.nan, 0.0])
    with pytest.raises(InvalidArgument):
        softmax([np.inf, 0.0])


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e6, 1e6)))
def test_softmax_is_simplex(z):
    assert is_simplex(softmax(z))


def test_bernoulli_extremes():
    rng = Rng(3)
    assert np.array_equal(sample_bernoulli_diag(5, 0.0, rng), np.ones(5))
    assert np.array_equal(sample_bernoulli_diag(5, 1.0, rng), np.zeros(5))


def test_bernoulli_rate():
    z = sample_bernoulli_diag(10000, 0.2, Rng(2024))
    assert set(np.unique(z)) <= {0.0, 1.0}
    frac = np.mean(z == 0.0)
    assert 0.19 <= frac <= 0.21


def test_bernoulli_rejects_bad_rate():
    for p in (-0.1, 1.1):
        with pytest.raises(InvalidArgument):
            sample_bernoulli_diag(3, p, Rng(0))


def test_gaussian_zero_variance_is_identity():
    assert np.array_equal(sample_gaussian_diag(5, 0.0, Rng(0)), np.ones(5))


def test_gaussian_moments():
    z = sample_gaussian_diag(100000, 0.25, Rng(7))
    assert 0.995 <= z.mean() <= 1.005
    assert 0.24 <= z.var() <= 0.26
    assert np.all(np.isfinite(z))


def test_gaussian_rejects_negative_variance():
    with pytest.raises(InvalidArgument):
        sample_gaussian_diag(3, -0.1, Rng(0))


def test_determinism_and_stream_independence():
    a = sample_gaussian_diag(50, 0.3, Rng(11, (4,)))
    b = sample_gaussian_diag(50, 0.3, Rng(11, (4,)))
    c = sample_gaussian_diag(50, 0.3, Rng(11, (5,)))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(Rng(11).derive(4).generator.random(3), Rng(11, (4,)).generator.random(3))


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(InvalidArgument):
        Rng(-1)
    with pytest.raises(InvalidArgument):
        Rng(2**64)


def test_nearest_rank_quantile():
    assert nearest_rank_quantile([3.0], 0.9) == 3.0
    v = [5.0, 1.0, 4.0, 2.0, 3.0]
    assert nearest_rank_quantile(v, 0.5) == 3.0
    assert nearest_rank_quantile(v, 0.9) == 5.0
    assert nearest_rank_quantile(v, 0.0) == 1.0


def test_parallel_map_preserves_order():
    assert parallel_map(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]
