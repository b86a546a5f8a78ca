"""Central finite-difference gradients/Hessians and the two reference PCM routes.

``scheme="central"`` is the 3-point stencil; ``"central4"`` is the 5-point,
fourth-order one (gradients only), useful when |L| is large so that roundoff
forces big steps.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .likelihood import nllf
from .mat_kit import nullspace_basis
from .model import decode, encode
from .pcm_fast import IndefiniteHessian


@dataclass
class FdSettings:
    rel_step: float = 1e-5
    abs_step_floor: float = 1e-8
    scheme: str = "central"     # or "central4" (gradient only)

    def __post_init__(self):
        if self.rel_step <= 0 or self.abs_step_floor <= 0:
            raise ValueError("finite-difference steps must be positive")
        if self.scheme not in ("central", "central4"):
            raise ValueError("scheme must be 'central' or 'central4'")

    def steps(self, theta0, typical=None):
        """``h_i = max(rel_step * max(|theta_i|, typical_i), abs_step_floor)``."""
        a = np.abs(theta0)
        if typical is not None:
            a = np.maximum(a, typical)
        return np.maximum(self.rel_step * a, self.abs_step_floor)


def _eval(fun, x, i):
    v = fun(x)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite evaluation when perturbing coordinate {i}")
    return v


def fd_gradient(fun, theta0, settings=None, typical=None):
    settings = settings or FdSettings()
    x0 = np.asarray(theta0, dtype=float)
    h = settings.steps(x0, typical)
    g = np.empty(x0.size)

    def at(i, t):
        x = x0.copy()
        x[i] += t * h[i]
        return _eval(fun, x, i)
    for i in range(x0.size):
        d1 = at(i, 1.0) - at(i, -1.0)
        if settings.scheme == "central4":
            g[i] = (8.0 * d1 - (at(i, 2.0) - at(i, -2.0))) / (12.0 * h[i])
        else:
            g[i] = d1 / (2.0 * h[i])
    return g


def fd_hessian(fun, theta0, settings=None, typical=None):
    """Central second differences; diagonal via the 3-point stencil."""
    settings = settings or FdSettings()
    x0 = np.asarray(theta0, dtype=float)
    n = x0.size
    h = settings.steps(x0, typical)
    f0 = _eval(fun, x0, -1)
    H = np.empty((n, n))
    for i in range(n):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        H[i, i] = (_eval(fun, xp, i) - 2.0 * f0 + _eval(fun, xm, i)) / h[i] ** 2
        for j in range(i):
            vals = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                x = x0.copy()
                x[i] += si * h[i]
                x[j] += sj * h[j]
                vals.append(_eval(fun, x, i))
            H[i, j] = H[j, i] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def fd_hessian_from_gradient(grad, theta0, settings=None, typical=None):
    """Central differences of an analytic gradient (cheaper, one order less noise)."""
    settings = settings or FdSettings()
    x0 = np.asarray(theta0, dtype=float)
    h = settings.steps(x0, typical)
    cols = []
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        cols.append((_eval(grad, xp, i) - _eval(grad, xm, i)) / (2.0 * h[i]))
    J = np.stack(cols, axis=1)
    return 0.5 * (J + J.T)


def nllf_flat(theta_like, bands, q=0):
    """Scalar nllf of a flat vector with the layout of ``theta_like``."""
    n_s, m, n = theta_like.n_s, theta_like.m, theta_like.n

    def fun(v):
        try:
            return nllf(decode(v, n_s, m, n), bands, q)
        except np.linalg.LinAlgError:
            return np.nan
    return fun


def pcm_fdm(H_fd, Ggrad, route="nullspace", rcond=1e-10):
    """Constrained PCM from a dense Hessian by the null-space or pseudoinverse route.

    Both use the same orthonormal basis U of null(Ggrad).
    """
    H_fd = np.asarray(H_fd, dtype=float)
    U = nullspace_basis(Ggrad)
    A = U.T @ H_fd @ U
    A = 0.5 * (A + A.T)
    lam = np.linalg.eigvalsh(A)
    if lam[0] <= 0:
        raise IndefiniteHessian(lam[0])
    if route == "nullspace":
        C = U @ sla.cho_solve(sla.cho_factor(A), U.T)
    elif route == "pseudoinverse":
        C = U @ np.linalg.pinv(A, rcond=rcond, hermitian=True) @ U.T
    else:
        raise ValueError(f"unknown route {route!r}")
    return 0.5 * (C + C.T)


def typical_scale(theta):
    """Per-coordinate magnitude for step sizing: shape entries use 1/sqrt(n)
    so near-zero components still get a usable step."""
    v = encode(theta)
    t = np.zeros(v.size)
    t[theta.n_s * (theta.m + 1) ** 2:] = 1.0 / np.sqrt(theta.n)
    return t


def fd_pcm(theta_hat, bands, q=0, settings=None, route="nullspace"):
    """Full FDM pipeline: finite-difference Hessian of the nllf then constrained inverse."""
    from .pcm_fast import constraint_gradient
    settings = settings or FdSettings(rel_step=1e-4, abs_step_floor=1e-12)
    H = fd_hessian(nllf_flat(theta_hat, bands, q), encode(theta_hat), settings,
                   typical_scale(theta_hat))
    return pcm_fdm(H, constraint_gradient(theta_hat), route), H
