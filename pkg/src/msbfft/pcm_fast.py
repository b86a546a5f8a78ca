"""Fast posterior covariance via Fisher/Louis identities and sparse assembly.

Local parameter ordering for setup r is ``[f, zeta, s, Se, vec(Phi_r)]`` with
``s`` the real Hermitian chart of S (see :mod:`msbfft.model`), so a local
Hessian is ``(m+1)**2 + m*n_r`` square.

The complete-data gradient of one line is affine-quadratic in the latent
modal response,

    g_a(eta) = c_a + 2 Re(b_a^H eta) + eta^H Q_a eta,     Q_a Hermitian,

so for eta ~ CN(w, Sigma), with beta_a = b_a + Q_a w,

    E[g_a]                  = c_a + 2 Re(b_a^H w) + tr(Q_a W)
    Cov(g_a, g_b)           = 2 Re(beta_a^H Sigma beta_b) + tr(Q_a Sigma Q_b Sigma)

which is what the expectation term needs (second- and fourth-order moments
of a non-central circular complex Gaussian).
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .likelihood import setup_moments
from .mat_kit import ConstraintError, nullspace_basis
from .model import chart_basis, encode_setup, inv_frf, local_shape, n_theta, param_labels


class IndefiniteHessian(np.linalg.LinAlgError):
    def __init__(self, min_eig):
        super().__init__(
            f"projected Hessian is not positive definite (min eigenvalue {min_eig:.3e}); "
            "the MPV may not be converged or the band may be mis-selected")
        self.min_eig = min_eig


# -- FRF derivative kernels --------------------------------------------------


def frf_derivatives(f, zeta, freqs, q=0):
    """a = 1/h and its derivatives w.r.t. (f_i, zeta_i); each (K, m).

    d2a/dzeta2 is identically zero.
    """
    fk = np.asarray(freqs, dtype=float)[:, None]
    c = (2j * np.pi * fk) ** q
    a = inv_frf(f, zeta, freqs, q)
    da_f = c * (-2.0 * f[None, :] / fk ** 2 - 2j * zeta[None, :] / fk)
    da_z = c * (-2j * f[None, :] / fk) * np.ones_like(zeta)[None, :]
    d2_ff = c * (-2.0 / fk ** 2) * np.ones_like(f)[None, :]
    d2_fz = c * (-2j / fk) * np.ones_like(f)[None, :]
    return a, da_f, da_z, d2_ff, d2_fz


def fz_objective(f, zeta, A, W, freqs, q=0, order=2):
    """Terms of Q that depend on (f, zeta) for fixed S^-1 = A and second moments W.

    J = sum_k tr(A V_k) - sum_k sum_i ln|a_ik|^2,  V_k = diag(a_k) W_k diag(a_k)^*.
    Returns (J, grad (2m,), hess (2m, 2m)) for ``order=2``.
    """
    a, da_f, da_z, d2_ff, d2_fz = frf_derivatives(f, zeta, freqs, q)
    Z = A.conj()[None] * W
    Za = np.einsum("kij,kj->ki", Z, a.conj())
    J = np.einsum("ki,ki->", a, Za).real - np.log(np.abs(a) ** 2).sum()
    if order == 0:
        return J
    das = (da_f, da_z)
    grad = np.concatenate([
        (2.0 * (d * Za) - 2.0 * d / a).real.sum(axis=0) for d in das
    ])
    if order == 1:
        return J, grad
    m = f.size
    d2 = {(0, 0): d2_ff, (0, 1): d2_fz, (1, 0): d2_fz}
    hess = np.zeros((2 * m, 2 * m))
    for tu in range(2):
        for tv in range(2):
            blk = 2.0 * np.einsum("kpq,kp,kq->pq", Z, das[tu], das[tv].conj()).real
            diag = (2.0 * das[tu] * das[tv] / a ** 2).real.sum(axis=0)
            if (tu, tv) in d2:
                dd = d2[(tu, tv)]
                diag += (2.0 * dd * Za - 2.0 * dd / a).real.sum(axis=0)
            blk[np.diag_indices(m)] += diag
            hess[tu * m:(tu + 1) * m, tv * m:(tv + 1) * m] = blk
    return J, grad, 0.5 * (hess + hess.T)


def _fz_s_cross(A, W, a, da_f, da_z, E):
    """d2Q / d(f, zeta) d s, summed over lines: (2m, m**2)."""
    AEA = np.einsum("ij,qjl,lm->qim", A, E, A)
    T = np.einsum("kpj,kj,qjp->kqp", W, a.conj(), AEA)
    return np.concatenate([-2.0 * np.einsum("kp,kqp->pq", da, T).real for da in (da_f, da_z)])


def _ss_block(A, Bsum, K, E):
    """tr([-K A E_q A + A E_q B + B E_q A] E_p) with B = sum_k A V_k A."""
    AEq = np.einsum("ij,qjl->qil", A, E)
    t1 = -K * np.einsum("qil,lj,pji->pq", AEq, A, E)
    t2 = np.einsum("qil,lj,pji->pq", AEq, Bsum, E)
    t3 = np.einsum("il,qlj,jm,pmi->pq", Bsum, E, A, E)
    hs = (t1 + t2 + t3).real
    return 0.5 * (hs + hs.T)


def fz_profile(f, zeta, W, freqs, q=0, order=2):
    """Q minimized over S in closed form, as a function of (f, zeta).

    J_p = K ln|S*| - sum ln|a|^2 with S* = mean_k V_k.  The gradient equals the
    fixed-S gradient at S = S* (envelope); the Hessian is the Schur complement
    of the s-block.  Returns (J_p, grad, hess, S*) or J_p alone for ``order=0``.
    """
    a = inv_frf(f, zeta, freqs, q)
    K, m = a.shape
    V = a[:, :, None] * W * a.conj()[:, None, :]
    S = V.mean(axis=0)
    S = 0.5 * (S + S.conj().T)
    sign, logdet = np.linalg.slogdet(S)
    if sign.real <= 0:
        return np.inf if order == 0 else (np.inf, None, None, S)
    Jp = K * logdet - np.log(np.abs(a) ** 2).sum()
    if order == 0:
        return Jp
    A = np.linalg.inv(S)
    A = 0.5 * (A + A.conj().T)
    _, g, H = fz_objective(f, zeta, A, W, freqs, q)
    _, da_f, da_z, _, _ = frf_derivatives(f, zeta, freqs, q)
    E = chart_basis(m)
    X = _fz_s_cross(A, W, a, da_f, da_z, E)
    Hss = _ss_block(A, K * A, K, E)
    Hp = H - X @ np.linalg.solve(Hss, X.T)
    return Jp, g, 0.5 * (Hp + Hp.T), S


# -- first derivatives (Fisher identity) -------------------------------------


def _ctx(p, Phi_r, band, moments, q):
    m, n_r = p.m, Phi_r.shape[0]
    A = np.linalg.inv(p.S)
    A = 0.5 * (A + A.conj().T)
    a, da_f, da_z, d2_ff, d2_fz = frf_derivatives(p.f, p.zeta, band.freqs, q)
    w, W = moments.w, moments.W
    y = band.F @ Phi_r
    FF = np.einsum("ku,ku->k", band.F.conj(), band.F).real
    G = Phi_r.T @ Phi_r
    R = FF - 2.0 * np.einsum("ki,ki->k", y.conj(), w).real + np.einsum("ij,kji->k", G, W).real
    return dict(m=m, n_r=n_r, A=A, a=a, da_f=da_f, da_z=da_z, d2_ff=d2_ff, d2_fz=d2_fz,
                w=w, W=W, y=y, FF=FF, G=G, R=R, E=chart_basis(m))


def _phi_grad_lines(p, Phi_r, band, w, W):
    # (2 Phi Re W - 2 Re(conj(F) w^T)) / Se, vectorized column-major -> (K, m*n_r)
    g = 2.0 * (np.einsum("ui,kij->kuj", Phi_r, W.real)
               - (band.F.conj()[:, :, None] * w[:, None, :]).real) / p.Se
    return np.swapaxes(g, 1, 2).reshape(g.shape[0], -1)


def q_gradient(p, Phi_r, band, moments, k=None, q=0):
    """Per-line gradient of Q over ``[x_r; vec(Phi_r)]`` at fixed moments.

    With moments computed at the same parameters this equals the per-line
    NLLF gradient.  ``k=None`` returns all lines, shape (K, n_loc).
    """
    c = _ctx(p, Phi_r, band, moments, q)
    m, n_r, A, a, W = c["m"], c["n_r"], c["A"], c["a"], c["W"]
    Za = np.einsum("kij,kj->ki", A.conj()[None] * W, a.conj())
    g_f = (2.0 * c["da_f"] * Za - 2.0 * c["da_f"] / a).real
    g_z = (2.0 * c["da_z"] * Za - 2.0 * c["da_z"] / a).real
    V = a[:, :, None] * W * a.conj()[:, None, :]
    Mmat = A[None] - A[None] @ V @ A[None]
    g_s = np.einsum("kij,qji->kq", Mmat, c["E"]).real
    g_se = (n_r / p.Se - c["R"] / p.Se ** 2)[:, None]
    g_phi = _phi_grad_lines(p, Phi_r, band, c["w"], W)
    out = np.concatenate([g_f, g_z, g_s, g_se, g_phi], axis=1)
    return out if k is None else out[k]


# -- second derivatives of Q --------------------------------------------------


def q_hessian(p, Phi_r, band, moments, k=None, q=0):
    """Hessian of Q at fixed moments, summed over lines (or for line ``k``)."""
    if k is not None:
        band, moments = _one_line(band, moments, k)
    c = _ctx(p, Phi_r, band, moments, q)
    m, n_r, A, W, E = c["m"], c["n_r"], c["A"], c["W"], c["E"]
    a, K = c["a"], band.n_lines
    nx = (m + 1) ** 2
    nloc = nx + m * n_r
    out = np.zeros((nloc, nloc))
    i_fz = slice(0, 2 * m)
    i_s = slice(2 * m, 2 * m + m * m)
    i_se = 2 * m + m * m
    i_phi = slice(nx, nloc)

    _, _, out[i_fz, i_fz] = fz_objective(p.f, p.zeta, A, W, band.freqs, q)

    X = _fz_s_cross(A, W, a, c["da_f"], c["da_z"], E)
    out[i_fz, i_s] = X
    out[i_s, i_fz] = X.T

    V = a[:, :, None] * W * a.conj()[:, None, :]
    Bsum = (A[None] @ V @ A[None]).sum(axis=0)
    out[i_s, i_s] = _ss_block(A, Bsum, K, E)

    out[i_se, i_se] = (-n_r / p.Se ** 2 + 2.0 * c["R"] / p.Se ** 3).sum()

    ReW = W.real.sum(axis=0)
    out[i_phi, i_phi] = np.kron(2.0 * ReW / p.Se, np.eye(n_r))
    g_phi = _phi_grad_lines(p, Phi_r, band, c["w"], W).sum(axis=0)
    out[i_phi, i_se] = -g_phi / p.Se
    out[i_se, i_phi] = -g_phi / p.Se
    return out


# -- expectation term -------------------------------------------------------


def gradient_decomposition(p, Phi_r, band, q=0):
    """Coefficients (c, b, Q) of the complete-data gradient, per line.

    Shapes: c (K, n_loc) real, b (K, n_loc, m) complex, Q (K, n_loc, m, m) Hermitian.
    """
    m, n_r = p.m, Phi_r.shape[0]
    K = band.n_lines
    nx = (m + 1) ** 2
    nloc = nx + m * n_r
    A = np.linalg.inv(p.S)
    A = 0.5 * (A + A.conj().T)
    E = chart_basis(m)
    a, da_f, da_z, _, _ = frf_derivatives(p.f, p.zeta, band.freqs, q)
    c = np.zeros((K, nloc))
    b = np.zeros((K, nloc, m), dtype=complex)
    Q = np.zeros((K, nloc, m, m), dtype=complex)

    eye = np.eye(m)
    for t, da in enumerate((da_f, da_z)):
        c[:, t * m:(t + 1) * m] = (-2.0 * da / a).real
        for pi in range(m):
            Bp = np.zeros((K, m, m), dtype=complex)
            Bp[:, :, pi] = a.conj() * A[:, pi][None, :]
            Qp = da[:, pi, None, None] * Bp
            Q[:, t * m + pi] = Qp + np.conj(np.swapaxes(Qp, 1, 2))
    i0 = 2 * m
    c[:, i0:i0 + m * m] = np.einsum("ij,qji->q", A, E).real[None, :]
    AEA = np.einsum("ij,qjl,lm->qim", A, E, A)
    Q[:, i0:i0 + m * m] = -(a.conj()[:, None, :, None] * AEA[None] * a[:, None, None, :])

    i_se = 2 * m + m * m
    y = band.F @ Phi_r
    FF = np.einsum("ku,ku->k", band.F.conj(), band.F).real
    c[:, i_se] = n_r / p.Se - FF / p.Se ** 2
    b[:, i_se] = y / p.Se ** 2
    Q[:, i_se] = -(Phi_r.T @ Phi_r)[None] / p.Se ** 2

    for i in range(m):
        for u in range(n_r):
            j = nx + i * n_r + u
            phi_u = Phi_r[u]
            Q[:, j] = ((np.outer(eye[i], phi_u) + np.outer(phi_u, eye[i])) / p.Se)[None]
            b[:, j, i] = -band.F[:, u] / p.Se
    return c, b, Q


def _sqrt_psd(Sigma):
    lam, V = np.linalg.eigh(Sigma)
    return V * np.sqrt(np.clip(lam, 0.0, None))[:, None, :]


def gradient_moments(p, Phi_r, band, moments, q=0):
    """Per-line mean and covariance of the complete-data gradient under CN(w, Sigma)."""
    c, b, Q = gradient_decomposition(p, Phi_r, band, q)
    w, Sigma = moments.w, moments.Sigma
    W = moments.W
    mean = (c + 2.0 * np.einsum("kai,ki->ka", b.conj(), w).real
            + np.einsum("kaij,kji->ka", Q, W).real)
    beta = b + np.einsum("kaij,kj->kai", Q, w)
    L = _sqrt_psd(Sigma)                                       # Sigma = L L^H
    Lh = np.conj(np.swapaxes(L, 1, 2))
    bt = np.einsum("kij,kaj->kai", Lh, beta)
    Qt = np.einsum("kij,kajl,klm->kaim", Lh, Q, L)
    K, nloc = c.shape
    cov = 2.0 * np.einsum("kai,kbi->kab", bt.conj(), bt).real
    Qf = Qt.reshape(K, nloc, -1)
    cov += np.einsum("kai,kbi->kab", Qf, Qf.conj()).real
    return mean, cov


def expectation_term(p, Phi_r, band, moments, k=None, q=0):
    """-sum_k E[g^T g] of the complete-data gradient (or the line-k term)."""
    if k is not None:
        band, moments = _one_line(band, moments, k)
    mean, cov = gradient_moments(p, Phi_r, band, moments, q)
    return -(np.einsum("ka,kb->ab", mean, mean) + cov.sum(axis=0))


def _one_line(band, moments, k):
    from .spectra import SetupBand
    sub = SetupBand(band.freqs[k:k + 1], band.F[k:k + 1], band.r, band.layout)
    return sub, moments.line(slice(k, k + 1)) if isinstance(k, int) else moments.line(k)


# -- local Hessian via Louis' identity ----------------------------------------


@dataclass
class LocalHessian:
    H_x: np.ndarray
    H_xPhi: np.ndarray
    H_Phi: np.ndarray
    parts: dict = field(default_factory=dict, repr=False)

    def full(self):
        return np.block([[self.H_x, self.H_xPhi], [self.H_xPhi.T, self.H_Phi]])


def local_hessian(p, Phi_r, band, q=0, keep_parts=False):
    """E1 + E2 + E3 summed over the band lines of one setup."""
    moments = setup_moments(p, Phi_r, band, q)
    mean, cov = gradient_moments(p, Phi_r, band, moments, q)
    E1 = np.einsum("ka,kb->ab", mean, mean)
    E2 = q_hessian(p, Phi_r, band, moments, q=q)
    E3 = -(E1 + cov.sum(axis=0))
    H = E1 + E2 + E3
    H = 0.5 * (H + H.T)
    nx = (p.m + 1) ** 2
    parts = dict(E1=E1, E2=E2, E3=E3, grad=mean.sum(axis=0)) if keep_parts else {}
    return LocalHessian(H[:nx, :nx], H[:nx, nx:], H[nx:, nx:], parts)


# -- sparse assembly ----------------------------------------------------------


@dataclass
class GlobalHessian:
    matrix: sp.csr_matrix
    n_s: int
    m: int
    n: int

    def toarray(self):
        return self.matrix.toarray()


def _phi_global_index(mp, m, n, offset):
    # local vec(Phi_r) index i*n_r + u  ->  offset + i*n + tau_u
    return (offset + np.arange(m)[:, None] * n + mp.tau[None, :]).ravel()


def assemble(locals_, maps, m, n):
    """Scatter per-setup blocks into the global sparse Hessian (index maps only)."""
    n_s = len(locals_)
    nx = (m + 1) ** 2
    off_phi = n_s * nx
    N = n_theta(n_s, m, n)
    rows, cols, vals = [], [], []
    for r, (lh, mp) in enumerate(zip(locals_, maps)):
        if mp.tau.max() >= n or mp.tau.min() < 0:
            raise IndexError(f"setup {r}: tau out of range")
        ix = r * nx + np.arange(nx)
        ip = _phi_global_index(mp, m, n, off_phi)
        if lh.H_Phi.shape[0] != ip.size:
            raise ValueError(f"setup {r}: local block size does not match its selection map")
        for (ri, ci, blk) in ((ix, ix, lh.H_x), (ix, ip, lh.H_xPhi),
                              (ip, ix, lh.H_xPhi.T), (ip, ip, lh.H_Phi)):
            rr, cc = np.meshgrid(ri, ci, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(np.asarray(blk).ravel())
    coo = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(N, N))
    return GlobalHessian(coo.tocsr(), n_s, m, n)


def predicted_pattern(maps, m, n):
    """Boolean sparsity pattern implied by the selection maps alone."""
    n_s = len(maps)
    nx = (m + 1) ** 2
    N = n_theta(n_s, m, n)
    P = np.zeros((N, N), dtype=bool)
    off = n_s * nx
    for r, mp in enumerate(maps):
        ix = r * nx + np.arange(nx)
        ip = _phi_global_index(mp, m, n, off)
        idx = np.concatenate([ix, ip])
        P[np.ix_(idx, idx)] = True
    return P


# -- constraints ----------------------------------------------------------------


def constraint_gradient(theta):
    """Jacobian of g_i = (phi_i^T phi_i - 1)/2; row i holds phi_i^T in mode-i columns."""
    n_s, m, n = theta.n_s, theta.m, theta.n
    off = n_s * (m + 1) ** 2
    G = np.zeros((m, n_theta(n_s, m, n)))
    for i in range(m):
        G[i, off + i * n:off + (i + 1) * n] = theta.Phi[:, i]
    return G


def _structured_nullspace(Ggrad, tol=1e-10):
    """Sparse null-space basis when constraint rows have disjoint supports."""
    m, N = Ggrad.shape
    supports = [np.flatnonzero(Ggrad[i]) for i in range(m)]
    used = np.concatenate(supports) if supports else np.empty(0, int)
    if used.size != np.unique(used).size or any(s.size == 0 for s in supports):
        return None
    free = np.setdiff1d(np.arange(N), used)
    blocks_r, blocks_c, blocks_v = [free], [np.arange(free.size)], [np.ones(free.size)]
    col = free.size
    for i, s in enumerate(supports):
        Ui = nullspace_basis(Ggrad[i, s][None, :], tol)
        rr, cc = np.meshgrid(s, col + np.arange(Ui.shape[1]), indexing="ij")
        blocks_r.append(rr.ravel())
        blocks_c.append(cc.ravel())
        blocks_v.append(Ui.ravel())
        col += Ui.shape[1]
    U = sp.csr_matrix((np.concatenate(blocks_v), (np.concatenate(blocks_r), np.concatenate(blocks_c))),
                      shape=(N, col))
    return U


def constrained_inverse(H, Ggrad, tol=1e-10):
    """C = U (U^T H U)^-1 U^T with U an orthonormal basis of null(Ggrad)."""
    Hm = H.matrix if isinstance(H, GlobalHessian) else H
    U = _structured_nullspace(np.asarray(Ggrad, dtype=float), tol)
    if U is None:
        U = sp.csr_matrix(nullspace_basis(Ggrad, tol))
    HU = Hm @ U
    Ared = np.asarray((U.T @ HU).todense() if sp.issparse(HU) else U.T @ HU)
    Ared = 0.5 * (Ared + Ared.T)
    try:
        cf = sla.cho_factor(Ared)
    except np.linalg.LinAlgError:
        raise IndefiniteHessian(np.linalg.eigvalsh(Ared).min()) from None
    Ud = U.toarray()
    C = Ud @ sla.cho_solve(cf, Ud.T)
    return 0.5 * (C + C.T)


# -- full pipeline ----------------------------------------------------------------


@dataclass
class PosteriorResult:
    theta_hat: object
    labels: list
    setup_cov: np.ndarray          # (n_s, nx, nx)
    param_var: np.ndarray          # (n_s, nx)
    cov_of_variation: np.ndarray   # (n_s, nx)
    shape_cov: np.ndarray          # (m*n, m*n)
    shape_cov_per_mode: np.ndarray  # (m, n, n)
    shape_uncertainty: np.ndarray  # (m,)
    mac: np.ndarray = None
    C_hat: np.ndarray = None
    hessian: GlobalHessian = None
    timings: dict = field(default_factory=dict)


def mac(phi_a, phi_b):
    phi_a = np.asarray(phi_a, dtype=float)
    phi_b = np.asarray(phi_b, dtype=float)
    return (phi_a @ phi_b) ** 2 / ((phi_a @ phi_a) * (phi_b @ phi_b))


def summarize(theta, C, Phi_ref=None, keep_full=False, hessian=None, timings=None):
    n_s, m, n = theta.n_s, theta.m, theta.n
    nx = (m + 1) ** 2
    off = n_s * nx
    setup_cov = np.stack([C[r * nx:(r + 1) * nx, r * nx:(r + 1) * nx] for r in range(n_s)])
    var = np.clip(np.diagonal(setup_cov, axis1=1, axis2=2), 0.0, None)
    values = np.stack([encode_setup(p) for p in theta.setups])
    with np.errstate(divide="ignore", invalid="ignore"):
        cov_ = np.where(np.abs(values) > 0, np.sqrt(var) / np.abs(values), np.nan)
    shape_cov = C[off:, off:]
    per_mode = np.stack([shape_cov[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(m)])
    unc = np.sqrt(np.clip([np.linalg.eigvalsh(b).sum() for b in per_mode], 0.0, None))
    macs = None
    if Phi_ref is not None:
        macs = np.array([mac(theta.Phi[:, i], Phi_ref[:, i]) for i in range(m)])
    return PosteriorResult(theta, param_labels(n_s, m, n), setup_cov, var, cov_, shape_cov,
                           per_mode, unc, macs, C if keep_full else None, hessian,
                           dict(timings or {}))


def pcm(theta_hat, bands, q=0, Phi_ref=None, keep_full=False):
    """Algorithm: local Louis Hessians -> sparse assembly -> null-space inverse."""
    t0 = time.perf_counter()
    locals_ = []
    for p, band in zip(theta_hat.setups, bands):
        try:
            locals_.append(local_hessian(p, local_shape(theta_hat.Phi, band.layout), band, q))
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(f"local Hessian failed for setup {band.r}: {exc}") from exc
    t1 = time.perf_counter()
    H = assemble(locals_, [b.layout for b in bands], theta_hat.m, theta_hat.n)
    t2 = time.perf_counter()
    Gg = constraint_gradient(theta_hat)
    try:
        C = constrained_inverse(H, Gg)
    except (ConstraintError, np.linalg.LinAlgError) as exc:
        raise RuntimeError(f"constrained inversion failed: {exc}") from exc
    t3 = time.perf_counter()
    timings = dict(local=t1 - t0, assemble=t2 - t1, inverse=t3 - t2, total=t3 - t0)
    return summarize(theta_hat, C, Phi_ref, keep_full, H, timings)
