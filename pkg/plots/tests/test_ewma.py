import numpy as np
import pytest

from spectra_plots import ewma


def test_step_example():
    np.testing.assert_allclose(ewma([0.0, 1.0], alpha=0.99), [0.0, 0.01])


def test_constant_series_unchanged():
    np.testing.assert_allclose(ewma([0.7] * 10, alpha=0.99), [0.7] * 10)


def test_alpha_zero_is_identity():
    x = np.array([3.0, -1.0, 2.5, 0.0])
    np.testing.assert_array_equal(ewma(x, alpha=0.0), x)


def test_empty_rejected():
    with pytest.raises(ValueError):
        ewma([])


def test_alpha_one_rejected():
    with pytest.raises(ValueError):
        ewma([1.0], alpha=1.0)


def test_length_preserved():
    for n in (1, 2, 17):
        assert ewma(np.arange(n, dtype=float)).size == n


def test_chunking_invariance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(50)
    full = ewma(x, alpha=0.9)
    for split in (1, 7, 25, 49):
        head = ewma(x[:split], alpha=0.9)
        tail = ewma(x[split:], alpha=0.9, init=head[-1])
        np.testing.assert_allclose(np.concatenate([head, tail]), full, atol=1e-12)
