"""Parameter containers, selection maps, FRFs and the flat real encoding of theta.

Per-setup block ``x = [f (m), zeta (m), s (m**2), Se]`` where ``s`` is the real
chart of the Hermitian modal-force PSD ``S``: the m diagonal entries, then the
real parts of the strict upper triangle (column-major), then the imaginary
parts in the same order.  The full vector is ``[x1; ...; x_ns; vec(Phi)]``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mat_kit import vec


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionMap:
    """Local channel -> global DoF gather map (0-based ``tau``)."""

    tau: np.ndarray
    n: int

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=np.intp).ravel()
        object.__setattr__(self, "tau", tau)
        if tau.size == 0:
            raise ConfigurationError("selection map has no channels")
        if tau.min() < 0 or tau.max() >= self.n:
            raise ConfigurationError(f"tau entries must lie in [0, {self.n - 1}]")
        if np.unique(tau).size != tau.size:
            raise ConfigurationError("tau entries must be distinct within a setup")

    @classmethod
    def from_one_based(cls, tau, n):
        return cls(np.asarray(tau, dtype=np.intp) - 1, n)

    @property
    def n_r(self):
        return self.tau.size

    def to_dense(self):
        C = np.zeros((self.n_r, self.n))
        C[np.arange(self.n_r), self.tau] = 1.0
        return C


def check_coverage(maps, n):
    covered = np.zeros(n, dtype=bool)
    for mp in maps:
        covered[mp.tau] = True
    if not covered.all():
        missing = np.flatnonzero(~covered) + 1
        raise ConfigurationError(f"global DoFs never measured: {missing.tolist()}")


@dataclass
class SetupParams:
    f: np.ndarray
    zeta: np.ndarray
    S: np.ndarray
    Se: float

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float).ravel()
        self.zeta = np.asarray(self.zeta, dtype=float).ravel()
        self.S = np.asarray(self.S, dtype=complex).reshape(self.f.size, self.f.size)
        self.Se = float(self.Se)

    @property
    def m(self):
        return self.f.size

    def copy(self):
        return SetupParams(self.f.copy(), self.zeta.copy(), self.S.copy(), self.Se)

    def validate(self):
        if np.any(self.f <= 0):
            raise ValueError("natural frequencies must be positive")
        if np.any(self.zeta <= 0) or np.any(self.zeta >= 1):
            raise ValueError("damping ratios must lie in (0, 1)")
        if self.Se <= 0:
            raise ValueError("prediction-error PSD must be positive")
        if not np.allclose(self.S, self.S.conj().T, rtol=1e-12, atol=1e-14 * np.abs(self.S).max()):
            raise ValueError("S must be Hermitian")
        if np.linalg.eigvalsh(self.S).min() < -1e-10 * max(np.trace(self.S).real, 1e-300):
            raise ValueError("S must be positive semidefinite")


@dataclass
class Theta:
    """Full parameter set: per-setup scalars plus the global mode shape (n x m)."""

    setups: list
    Phi: np.ndarray

    def __post_init__(self):
        self.Phi = np.asarray(self.Phi, dtype=float)

    @property
    def m(self):
        return self.Phi.shape[1]

    @property
    def n(self):
        return self.Phi.shape[0]

    @property
    def n_s(self):
        return len(self.setups)

    def copy(self):
        return Theta([p.copy() for p in self.setups], self.Phi.copy())


def n_theta(n_s, m, n):
    return n_s * (m + 1) ** 2 + m * n


# -- Hermitian chart --------------------------------------------------------


@lru_cache(maxsize=None)
def _upper_pairs(m):
    # strict upper triangle, column-major: (0,1), (0,2), (1,2), ...
    return tuple((i, j) for j in range(m) for i in range(j))


@lru_cache(maxsize=None)
def chart_basis(m):
    """Basis matrices E_p (m**2, m, m) with ``S = sum_p s_p E_p``."""
    pairs = _upper_pairs(m)
    E = np.zeros((m * m, m, m), dtype=complex)
    for i in range(m):
        E[i, i, i] = 1.0
    off = len(pairs)
    for p, (i, j) in enumerate(pairs):
        E[m + p, i, j] = E[m + p, j, i] = 1.0
        E[m + off + p, i, j] = 1j
        E[m + off + p, j, i] = -1j
    E.setflags(write=False)
    return E


def chart_jacobian(m):
    """Constant complex matrix J (m**2 x m**2) with ``vec(S) = J @ s``."""
    E = chart_basis(m)
    return np.stack([vec(Ep) for Ep in E], axis=1)


def S_to_chart(S):
    S = np.asarray(S)
    m = S.shape[0]
    pairs = _upper_pairs(m)
    out = np.empty(m * m)
    out[:m] = np.diag(S).real
    if pairs:
        ii, jj = np.array(pairs).T
        out[m:m + len(pairs)] = S[ii, jj].real
        out[m + len(pairs):] = S[ii, jj].imag
    return out


def chart_to_S(s, m):
    return np.tensordot(np.asarray(s, dtype=float), chart_basis(m), axes=(0, 0))


# -- flat encoding ----------------------------------------------------------


def encode_setup(p):
    return np.concatenate([p.f, p.zeta, S_to_chart(p.S), [p.Se]])


def decode_setup(x, m):
    x = np.asarray(x, dtype=float)
    return SetupParams(x[:m].copy(), x[m:2 * m].copy(), chart_to_S(x[2 * m:2 * m + m * m], m), x[-1])


def encode(theta):
    parts = [encode_setup(p) for p in theta.setups]
    parts.append(vec(theta.Phi))
    return np.concatenate(parts)


def decode(v, n_s, m, n):
    v = np.asarray(v, dtype=float)
    nx = (m + 1) ** 2
    if v.size != n_theta(n_s, m, n):
        raise ValueError(f"expected {n_theta(n_s, m, n)} entries, got {v.size}")
    setups = [decode_setup(v[r * nx:(r + 1) * nx], m) for r in range(n_s)]
    Phi = v[n_s * nx:].reshape((n, m), order="F").copy()
    return Theta(setups, Phi)


def param_labels(n_s, m, n):
    """Human-readable labels for every entry of the flat vector (1-based)."""
    pairs = _upper_pairs(m)
    labels = []
    for r in range(1, n_s + 1):
        labels += [f"s{r}:f{i}" for i in range(1, m + 1)]
        labels += [f"s{r}:zeta{i}" for i in range(1, m + 1)]
        labels += [f"s{r}:S{i}{i}" for i in range(1, m + 1)]
        labels += [f"s{r}:ReS{i + 1}{j + 1}" for i, j in pairs]
        labels += [f"s{r}:ImS{i + 1}{j + 1}" for i, j in pairs]
        labels.append(f"s{r}:Se")
    for i in range(1, m + 1):
        labels += [f"phi:dof{d}:mode{i}" for d in range(1, n + 1)]
    return labels


# -- frequency response -----------------------------------------------------


def inv_frf(f, zeta, fk, q=0):
    """1/h for every (line, mode): shape (K, m)."""
    fk = np.atleast_1d(np.asarray(fk, dtype=float))[:, None]
    beta = np.atleast_1d(f)[None, :] / fk
    return (2j * np.pi * fk) ** q * ((1.0 - beta ** 2) - 2j * np.atleast_1d(zeta)[None, :] * beta)


def frf(f_i, zeta_i, f_k, q=0):
    """Modal FRF ``(i 2 pi f_k)^-q / ((1 - b^2) - 2 i zeta b)`` with ``b = f_i / f_k``."""
    beta = f_i / f_k
    return (2j * np.pi * f_k) ** (-q) / ((1.0 - beta ** 2) - 2j * zeta_i * beta)


@dataclass
class DerivativeWorkspace:
    h: np.ndarray   # (K, m)
    Dk: np.ndarray  # (K, m) = |h|^2
    Hk: np.ndarray  # (K, m, m)
    Ek: np.ndarray  # (K, n_r, n_r)


def modal_psd(p, fk, q=0):
    h = 1.0 / inv_frf(p.f, p.zeta, fk, q)
    return h, h[:, :, None] * p.S[None] * h.conj()[:, None, :]


def spectral_cov(p, Phi_r, fk, q=0):
    """Evaluate h_k, D_k, H_k and E_k = Phi_r H_k Phi_r^T + Se I on the given lines."""
    h, H = modal_psd(p, fk, q)
    E = np.einsum("ui,kij,vj->kuv", Phi_r, H, Phi_r) + p.Se * np.eye(Phi_r.shape[0])
    return DerivativeWorkspace(h=h, Dk=np.abs(h) ** 2, Hk=H, Ek=E)


def local_shape(Phi, mp):
    return np.asarray(Phi)[mp.tau]
