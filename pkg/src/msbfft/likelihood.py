"""Exact and complete-data negative log-likelihoods, latent moments and the Q-function.

Everything is evaluated through m x m quantities.  With ``Phi_r = Q R`` (thin QR),
``c_k = Q^T F_k`` and ``B_k = R H_k R^T + Se I``,

    ln|E_k|     = (n_r - m) ln Se + ln|B_k|
    F^H E^-1 F  = |F_k - Q c_k|^2 / Se + c_k^H B_k^-1 c_k

and with ``G = Phi_r^T Phi_r``, ``M_k = Se I + G H_k`` the posterior of the
modal response is ``w_k = H_k M_k^-1 Phi_r^T F_k``, ``Sigma_k = Se H_k M_k^-1``.
No S^-1 appears, so S may be singular.
"""

from dataclasses import dataclass

import numpy as np

from .model import inv_frf, local_shape

LN_PI = np.log(np.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, r, k, what="E_k"):
        super().__init__(f"{what} is not positive definite at setup {r}, line {k}")
        self.r = r
        self.k = k


@dataclass
class LatentMoments:
    w: np.ndarray       # (..., m)
    Sigma: np.ndarray   # (..., m, m)

    @property
    def W(self):
        return self.w[..., :, None] * self.w.conj()[..., None, :] + self.Sigma

    def line(self, k):
        return LatentMoments(self.w[k], self.Sigma[k])


def _herm(A):
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


def setup_lines(p, Phi_r, band, q=0, with_moments=True):
    """Per-line NLLF terms of one setup and (optionally) the latent moments.

    Returns ``(L, moments)`` with ``L`` of shape (K,).
    """
    m = p.m
    n_r = Phi_r.shape[0]
    a = inv_frf(p.f, p.zeta, band.freqs, q)
    h = 1.0 / a
    H = h[:, :, None] * p.S[None] * h.conj()[:, None, :]
    # E = Qf (Rf H Rf^T + Se I) Qf^T + Se (I - Qf Qf^T) with Phi_r = Qf Rf (thin QR);
    # splitting F along range(Qf) avoids the |F|^2 - y^H w cancellation at high SNR
    Qf, Rf = np.linalg.qr(Phi_r)
    mq = Qf.shape[1]
    B = np.einsum("ij,kjl,ml->kim", Rf, H, Rf) + p.Se * np.eye(mq)
    try:
        chol = np.linalg.cholesky(_herm(B))
    except np.linalg.LinAlgError:
        bad = [k for k in range(B.shape[0]) if np.linalg.eigvalsh(_herm(B[k])).min() <= 0]
        raise NotPositiveDefinite(band.r, bad[0] if bad else -1) from None
    logdetE = (n_r - mq) * np.log(p.Se) + 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2).real).sum(axis=1)
    c = band.F @ Qf
    perp = band.F - c @ Qf.T
    v = np.linalg.solve(chol, c[:, :, None])[:, :, 0]
    quad = (np.einsum("ku,ku->k", perp.conj(), perp).real / p.Se
            + np.einsum("ki,ki->k", v.conj(), v).real)
    L = n_r * LN_PI + quad + logdetE
    if not with_moments:
        return L, None
    G = Phi_r.T @ Phi_r
    y = band.F @ Phi_r                       # (K, m) rows are Phi_r^T F_k
    M = p.Se * np.eye(m) + G[None] @ H
    w = np.einsum("kij,kj->ki", H, np.linalg.solve(M, y[:, :, None])[:, :, 0])
    Sigma = _herm(p.Se * H @ np.linalg.inv(M))
    return L, LatentMoments(w, Sigma)


def nllf_setup(p, Phi_r, band, q=0):
    L, _ = setup_lines(p, Phi_r, band, q, with_moments=False)
    return float(L.sum())


def nllf(theta, bands, q=0):
    """Exact NLLF summed over setups (ascending r) and band lines (ascending k)."""
    total = 0.0
    for p, band in zip(theta.setups, bands):
        total += nllf_setup(p, local_shape(theta.Phi, band.layout), band, q)
    return total


def latent_moments(theta, band, k, q=0):
    p = theta.setups[band.r]
    Phi_r = local_shape(theta.Phi, band.layout)
    _, mom = setup_lines(p, Phi_r, band, q)
    return mom.line(k)


def setup_moments(p, Phi_r, band, q=0):
    return setup_lines(p, Phi_r, band, q)[1]


def _psd_inverse_logdet(S):
    """Pseudo-inverse and pseudo-log-determinant of a Hermitian PSD S on its range."""
    lam, V = np.linalg.eigh(_herm(np.asarray(S, dtype=complex)))
    floor = 1e-12 * max(lam.sum(), 0.0) / lam.size
    keep = lam > floor
    if not keep.any():
        raise np.linalg.LinAlgError("S has no eigenvalue above the floor")
    Vk = V[:, keep]
    return (Vk / lam[keep]) @ Vk.conj().T, float(np.log(lam[keep]).sum()), Vk


def complete_nllf(p, Phi_r, band, eta, q=0):
    """Complete-data NLLF summed over the lines of one setup; ``eta`` is (K, m)."""
    eta = np.asarray(eta, dtype=complex).reshape(band.n_lines, p.m)
    m, n_r = p.m, Phi_r.shape[0]
    a = inv_frf(p.f, p.zeta, band.freqs, q)
    Sinv, logdetS, Vk = _psd_inverse_logdet(p.S)
    xi = a * eta
    if Vk.shape[1] < m:
        xi = xi @ Vk.conj() @ Vk.T   # drop directions the floor treats as deterministic
    resid = band.F - eta @ Phi_r.T
    val = ((m + n_r) * LN_PI + n_r * np.log(p.Se)
           + np.einsum("ku,ku->k", resid.conj(), resid).real / p.Se
           + np.einsum("ki,ij,kj->k", xi.conj(), Sinv, xi).real
           + logdetS - np.log(np.abs(a) ** 2).sum(axis=1))
    return float(val.sum())


def q_value(p, Phi_r, band, moments, q=0):
    """Q-function: expectation of the complete-data NLLF under CN(w_k, Sigma_k)."""
    m, n_r = p.m, Phi_r.shape[0]
    a = inv_frf(p.f, p.zeta, band.freqs, q)
    Sinv, logdetS, _ = _psd_inverse_logdet(p.S)
    w, W = moments.w, moments.W
    V = a[:, :, None] * W * a.conj()[:, None, :]
    FF = np.einsum("ku,ku->k", band.F.conj(), band.F).real
    y = band.F @ Phi_r
    G = Phi_r.T @ Phi_r
    R = FF - 2.0 * np.einsum("ki,ki->k", y.conj(), w).real + np.einsum("ij,kji->k", G, W).real
    val = ((m + n_r) * LN_PI + n_r * np.log(p.Se) + R / p.Se
           + np.einsum("ij,kji->k", Sinv, V).real
           + logdetS - np.log(np.abs(a) ** 2).sum(axis=1))
    return float(val.sum())
