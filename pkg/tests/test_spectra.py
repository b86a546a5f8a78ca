import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msbfft.model import SelectionMap
from msbfft.spectra import TimeHistory, auto_psd, band_slice, reslice, scaled_fft, sv_spectrum


def _hist(r, n_r=3, N=600, dt=0.01):
    return TimeHistory(r.standard_normal((n_r, N)), dt)


def test_constant_input():
    N, dt, c = 50, 0.02, 3.0
    F = scaled_fft(TimeHistory(np.full((1, N), c), dt))
    assert np.isclose(F.coeffs[0, 0], c * np.sqrt(N * dt))
    assert np.abs(F.coeffs[0, 1:]).max() < 1e-12


def test_time_history_checks():
    with pytest.raises(ValueError):
        TimeHistory(np.zeros((1, 1)), 0.1)
    with pytest.raises(ValueError):
        TimeHistory(np.zeros((1, 4)), 0.0)
    with pytest.raises(ValueError):
        TimeHistory(np.array([[0.0, np.nan, 1.0]]), 0.1)


@given(st.integers(0, 10 ** 6), st.integers(2, 300))
@settings(max_examples=30, deadline=None)
def test_parseval(seed, N):
    r = np.random.default_rng(seed)
    y = TimeHistory(r.standard_normal((2, N)), 0.05)
    F = scaled_fft(y).coeffs
    # two-sided sum from the one-sided half
    two = 2 * np.sum(np.abs(F[:, 1:]) ** 2, axis=1) + np.abs(F[:, 0]) ** 2
    if N % 2 == 0:
        two -= np.abs(F[:, -1]) ** 2
    energy = y.dt * np.sum(y.samples ** 2, axis=1)
    assert np.allclose(two, energy, rtol=1e-10)


@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=20, deadline=None)
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    y1, y2 = r.standard_normal((2, 64)), r.standard_normal((2, 64))
    lhs = scaled_fft(TimeHistory(a * y1 + b * y2, 0.1)).coeffs
    rhs = a * scaled_fft(TimeHistory(y1, 0.1)).coeffs + b * scaled_fft(TimeHistory(y2, 0.1)).coeffs
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_band_counts(rng):
    y = TimeHistory(rng.standard_normal((2, 30000)), 0.01)   # df = 1/300
    F = scaled_fft(y)
    mp = SelectionMap(np.arange(2), 2)
    assert band_slice(F, 4.0, 4.6, 0, mp).n_lines == 181
    k0 = 1200
    f0 = k0 * F.df
    one = band_slice(F, f0 - 0.5 * F.df, f0 + 0.4 * F.df, 0, mp)
    assert one.n_lines == 1 and np.isclose(one.freqs[0], f0)
    full = band_slice(F, F.df / 2, 0.5 / y.dt - F.df / 2, 0, mp)
    assert full.n_lines == y.n_samples // 2 - 1


def test_band_errors(rng):
    F = scaled_fft(_hist(rng))
    mp = SelectionMap(np.arange(3), 3)
    with pytest.raises(ValueError):
        band_slice(F, 10.0, 60.0, 0, mp)
    with pytest.raises(ValueError):
        band_slice(F, 1.001, 1.002, 0, mp)   # between lines
    with pytest.raises(ValueError):
        band_slice(F, 1.0, 2.0, 0, SelectionMap(np.arange(2), 3))


def test_reslice_idempotent(rng):
    F = scaled_fft(_hist(rng))
    b = band_slice(F, 2.0, 5.0, 0, None)
    b2 = reslice(b, 2.0, 5.0)
    assert np.array_equal(b.freqs, b2.freqs) and np.array_equal(b.F, b2.F)


def test_sv_spectrum_shape(rng):
    F = scaled_fft(_hist(rng, n_r=4, N=2000))
    f, sv = sv_spectrum(F, half_window=5)
    assert sv.shape == (f.size, 4)
    assert np.all(np.diff(sv, axis=1) <= 1e-12)
    assert np.all(sv >= 0)
    # window average of the trace equals the windowed auto-PSD sum
    P = auto_psd(F).sum(axis=0)
    k = 50
    assert np.isclose(sv[k - 5].sum(), P[k - 5:k + 6].mean())
