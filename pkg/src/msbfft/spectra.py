"""Time histories, scaled FFT, spectral diagnostics and band selection."""

from dataclasses import dataclass, field

import numpy as np

from .model import SelectionMap


@dataclass
class TimeHistory:
    samples: np.ndarray          # (n_r, N)
    dt: float
    channel_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.dt = float(self.dt)
        if not self.channel_labels:
            self.channel_labels = [f"ch{i + 1}" for i in range(self.samples.shape[0])]
        if self.samples.shape[1] < 2:
            raise ValueError("need at least two samples per channel")
        if self.dt <= 0:
            raise ValueError("sampling interval must be positive")
        if len(self.channel_labels) != self.samples.shape[0]:
            raise ValueError("one label per channel required")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("time history contains non-finite samples")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]


@dataclass
class ScaledFft:
    coeffs: np.ndarray   # (n_r, N//2 + 1)
    dt: float
    n_samples: int

    @property
    def df(self):
        return 1.0 / (self.n_samples * self.dt)

    @property
    def freqs(self):
        return np.arange(self.coeffs.shape[1]) * self.df


@dataclass
class SetupBand:
    freqs: np.ndarray    # (K,)
    F: np.ndarray        # (K, n_r) complex, row k is F_k
    r: int
    layout: SelectionMap

    @property
    def n_lines(self):
        return self.freqs.size

    @property
    def n_r(self):
        return self.F.shape[1]


def scaled_fft(y):
    """One-sided half of ``sqrt(dt/N) * sum_j y_j exp(-i 2 pi j k / N)``."""
    N = y.n_samples
    return ScaledFft(np.sqrt(y.dt / N) * np.fft.rfft(y.samples, axis=1), y.dt, N)


def auto_psd(fft):
    return np.abs(fft.coeffs) ** 2


def sv_spectrum(fft, half_window=10):
    """Descending eigenvalues of the windowed PSD-matrix estimate per frequency.

    Returns ``(freqs, sv)`` with ``sv`` of shape (K, min(n_r, 2w+1)); edge
    lines without a full window are skipped.
    """
    if half_window < 0:
        raise ValueError("half_window must be non-negative")
    w = half_window
    X = fft.coeffs.T  # (K, n_r)
    K, n_r = X.shape
    if K < 2 * w + 1:
        return np.empty(0), np.empty((0, min(n_r, 2 * w + 1)))
    outer = X[:, :, None] * X.conj()[:, None, :]
    csum = np.concatenate([np.zeros((1, n_r, n_r), complex), np.cumsum(outer, axis=0)])
    centers = np.arange(w, K - w)
    P = (csum[centers + w + 1] - csum[centers - w]) / (2 * w + 1)
    ev = np.linalg.eigvalsh(P)[:, ::-1]
    ev = np.clip(ev, 0.0, None)
    return fft.freqs[centers], ev[:, :min(n_r, 2 * w + 1)]


def band_slice(fft, f_l, f_u, r, layout):
    nyq = 0.5 / fft.dt
    if not (0 < f_l <= f_u < nyq):
        raise ValueError(f"band [{f_l}, {f_u}] must satisfy 0 < f_l <= f_u < {nyq}")
    freqs = fft.freqs
    n_half = fft.coeffs.shape[1] - 1
    k = np.arange(fft.coeffs.shape[1])
    # exclude DC and (for even N) the Nyquist line
    slack = 1e-9 * fft.df
    keep = (freqs >= f_l - slack) & (freqs <= f_u + slack) & (k > 0)
    if fft.n_samples % 2 == 0:
        keep &= k < n_half
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ValueError(f"no frequency lines in band [{f_l}, {f_u}] Hz")
    if layout is not None and layout.n_r != fft.coeffs.shape[0]:
        raise ValueError("selection map size does not match the channel count")
    return SetupBand(freqs[idx].copy(), fft.coeffs[:, idx].T.copy(), r, layout)


def reslice(band, f_l, f_u):
    slack = 1e-9 * (band.freqs[1] - band.freqs[0] if band.n_lines > 1 else 1.0)
    keep = (band.freqs >= f_l - slack) & (band.freqs <= f_u + slack)
    if not keep.any():
        raise ValueError(f"no frequency lines in band [{f_l}, {f_u}] Hz")
    return SetupBand(band.freqs[keep], band.F[keep], band.r, band.layout)
