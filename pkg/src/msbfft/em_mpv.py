"""Most probable value by expectation-maximization.

The M-step is a conditional (ECM) sweep, each piece lowering Q with the rest
held: global mode shape (row-wise linear solves), prediction-error PSDs,
modal-force PSDs (closed form at the previous f, zeta), then a projected
Newton solve for (f, zeta) per setup.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .likelihood import setup_lines
from .model import SetupParams, Theta, decode, encode, local_shape, n_theta
from .pcm_fast import fz_profile, q_gradient

ZETA_BOUNDS = (1e-4, 0.3)
F_SLACK = 0.2
STATIONARY_TOL = 1e-4


@dataclass
class EmSettings:
    max_iter: int = 2000
    tol_rel_nllf: float = 1e-9
    tol_param: float = 1e-6
    acceleration: str = "anderson"
    accel_every: int = 3          # parabolic: extrapolate on every n-th iteration
    anderson_memory: int = 6
    deterministic: bool = True
    newton_iter: int = 20

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol_rel_nllf <= 0 or self.tol_param <= 0:
            raise ValueError("tolerances must be positive")
        if self.acceleration not in ("off", "parabolic", "anderson"):
            raise ValueError("acceleration must be 'off', 'parabolic' or 'anderson'")


@dataclass
class MpvResult:
    theta_hat: Theta
    nllf_trace: list
    converged: bool
    grad_norm: float
    n_iter: int = 0
    trace: list = field(default_factory=list)   # (iter, nllf, max param delta, accelerated)
    elapsed: float = 0.0

    @property
    def nllf(self):
        return self.nllf_trace[-1]

    @property
    def stationary(self):
        """Zero-gradient check ``max|dL| <= 1e-4 max(1, |L|)``.

        EM can meet its step tolerances while creeping along a flat or
        boundary direction (e.g. a modal-force PSD turning singular), so this
        is reported separately from ``converged``.
        """
        return self.grad_norm <= STATIONARY_TOL * max(1.0, abs(self.nllf))

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "nllf", "max_param_delta", "accelerated"])
            for it, val, dp, acc in self.trace:
                w.writerow([it, f"{val:.17e}", f"{dp:.17e}", int(acc)])


# -- initialization -----------------------------------------------------------------


def _windowed_psd(band, half_window=5):
    P = np.einsum("ku,kv->kuv", band.F, band.F.conj())
    cs = np.concatenate([np.zeros((1,) + P.shape[1:], complex), np.cumsum(P, axis=0)])
    idx = np.arange(P.shape[0])
    lo = np.clip(idx - half_window, 0, None)
    hi = np.clip(idx + half_window + 1, None, P.shape[0])
    return (cs[hi] - cs[lo]) / (hi - lo)[:, None, None]


def _local_shapes(Pw, freqs, f0):
    """One real vector per mode: dominant direction of the PSD near f0_i, deflated
    against the vectors already chosen."""
    n_r = Pw.shape[1]
    U = np.zeros((n_r, 0))
    for fi in f0:
        k = int(np.argmin(np.abs(freqs - fi)))
        P = Pw[k].real
        if U.shape[1]:
            Pr = np.eye(n_r) - U @ np.linalg.pinv(U)
            lam, V = np.linalg.eigh(P)
            u = V[:, -1]
            if np.linalg.norm(Pr @ u) < 0.3:
                lam, V = np.linalg.eigh(Pr @ P @ Pr)
                u = V[:, -1]
        else:
            u = np.linalg.eigh(P)[1][:, -1]
        U = np.column_stack([U, u / np.linalg.norm(u)])
    return U


def initialize(bands, f0, q=0):
    f0 = np.asarray(f0, dtype=float).ravel()
    m = f0.size
    if m < 1 or np.any(np.diff(f0) <= 0):
        raise ValueError("f0 must be strictly increasing")
    n = bands[0].layout.n
    Phi = np.zeros((n, m))
    filled = np.zeros(n, dtype=bool)
    psds = []
    for band in bands:
        if m > band.n_r:
            raise ValueError(f"setup {band.r}: {m} modes but only {band.n_r} channels")
        if f0[0] < band.freqs[0] or f0[-1] > band.freqs[-1]:
            raise ValueError(f"setup {band.r}: f0 outside the band [{band.freqs[0]}, {band.freqs[-1]}]")
        Pw = _windowed_psd(band)
        psds.append(Pw)
        U = _local_shapes(Pw, band.freqs, f0)
        tau = band.layout.tau
        shared = filled[tau]
        if shared.any():
            # per-mode scale/sign so the shared DoFs agree with what is already placed
            num = np.einsum("ui,ui->i", U[shared], Phi[tau[shared]])
            den = np.einsum("ui,ui->i", U[shared], U[shared])
            scale = np.where(np.abs(num) > 1e-12 * den, num / np.maximum(den, 1e-300), 1.0)
            U = U * scale
        Phi[tau[~shared]] = U[~shared]
        filled[tau] = True
    norms = np.linalg.norm(Phi, axis=0)
    if np.any(norms == 0):
        raise ValueError("initial mode shape has a zero column")
    Phi /= norms

    zeta0 = 0.01
    setups = []
    for band, Pw in zip(bands, psds):
        n_r = band.n_r
        ev = np.linalg.eigvalsh(Pw)
        if n_r > m:
            Se = float(np.median(ev[:, :n_r - m].mean(axis=1)))
        else:
            Se = 1e-2 * float(np.median(ev[:, 0]))
        Se = max(Se, 1e-12 * float(ev[:, -1].max()))
        Phi_r = local_shape(Phi, band.layout)
        S = np.zeros((m, m), dtype=complex)
        for i in range(m):
            k = int(np.argmin(np.abs(band.freqs - f0[i])))
            peak = ev[k, -1]
            # |h|^2 at resonance
            gain = abs(1.0 / ((2j * np.pi * band.freqs[k]) ** q * (-2j * zeta0))) ** 2
            S[i, i] = max(peak - Se, 1e-3 * peak) / (gain * max(Phi_r[:, i] @ Phi_r[:, i], 1e-6))
        setups.append(SetupParams(f0.copy(), np.full(m, zeta0), S, Se))
    return Theta(setups, Phi)


# -- E and M steps ---------------------------------------------------------------------


def e_step(theta, bands, q=0):
    """Latent moments and nllf for every setup: returns (list of LatentMoments, nllf)."""
    out, total = [], 0.0
    for p, band in zip(theta.setups, bands):
        L, mom = setup_lines(p, local_shape(theta.Phi, band.layout), band, q)
        out.append(mom)
        total += float(L.sum())
    return out, total


def _update_phi(moments, bands, theta):
    n, m = theta.n, theta.m
    lhs = np.zeros((n, m, m))
    rhs = np.zeros((n, m))
    for p, band, mom in zip(theta.setups, bands, moments):
        A = mom.W.real.sum(axis=0) / p.Se
        B = np.einsum("ku,ki->ui", band.F, mom.w.conj()).real / p.Se
        tau = band.layout.tau
        lhs[tau] += A
        rhs[tau] += B
    try:
        return np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "singular mode-shape normal matrix: insufficient coverage or unidentifiable modes") from None


def _residual_power(Phi_r, band, mom):
    y = band.F @ Phi_r
    FF = np.einsum("ku,ku->k", band.F.conj(), band.F).real
    G = Phi_r.T @ Phi_r
    return FF - 2.0 * np.einsum("ki,ki->k", y.conj(), mom.w).real + np.einsum("ij,kji->k", G, mom.W).real


def _newton_fz(p, W, band, q, bounds, max_iter):
    """Projected Newton on the S-profiled objective; returns (f, zeta, S)."""
    m = p.m
    lo = np.concatenate([np.full(m, bounds[0]), np.full(m, ZETA_BOUNDS[0])])
    hi = np.concatenate([np.full(m, bounds[1]), np.full(m, ZETA_BOUNDS[1])])
    x = np.clip(np.concatenate([p.f, p.zeta]), lo, hi)
    J, g, H, S = fz_profile(x[:m], x[m:], W, band.freqs, q)
    for _ in range(max_iter):
        lam, V = np.linalg.eigh(H)
        lam = np.maximum(np.abs(lam), 1e-10 * max(np.abs(lam).max(), 1e-300))
        step = -(V / lam) @ (V.T @ g)
        t = 1.0
        while t > 1e-12:
            xn = np.clip(x + t * step, lo, hi)
            Jn = fz_profile(xn[:m], xn[m:], W, band.freqs, q, order=0)
            if Jn <= J:
                break
            t *= 0.5
        else:
            break
        dx = np.abs(xn - x).max()
        x = xn
        J, g, H, S = fz_profile(x[:m], x[m:], W, band.freqs, q)
        if dx <= 1e-14 * max(1.0, np.abs(x).max()):
            break
    return x[:m], x[m:], S


def m_step(moments, bands, theta_prev, q=0, settings=None):
    settings = settings or EmSettings()
    Phi = _update_phi(moments, bands, theta_prev)
    setups = []
    for p, band, mom in zip(theta_prev.setups, bands, moments):
        Phi_r = local_shape(Phi, band.layout)
        K, n_r = band.n_lines, band.n_r
        Se = float(_residual_power(Phi_r, band, mom).sum() / (n_r * K))
        f_bounds = ((1.0 - F_SLACK) * band.freqs[0], (1.0 + F_SLACK) * band.freqs[-1])
        f, zeta, S = _newton_fz(p, mom.W, band, q, f_bounds, settings.newton_iter)
        setups.append(SetupParams(f, zeta, S, Se))
    return Theta(setups, Phi)


# -- renormalization --------------------------------------------------------------------


def renormalize(theta):
    """Unit-norm mode shapes with the compensating S scaling; nllf is unchanged."""
    d = np.linalg.norm(theta.Phi, axis=0)
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise ValueError("cannot renormalize a zero mode-shape column")
    setups = [SetupParams(p.f.copy(), p.zeta.copy(), d[:, None] * p.S * d[None, :], p.Se)
              for p in theta.setups]
    return Theta(setups, theta.Phi / d)


# -- gradient at a point ------------------------------------------------------------------


def nllf_gradient(theta, bands, q=0):
    """Exact nllf gradient over the flat encoding (Fisher identity)."""
    n_s, m, n = theta.n_s, theta.m, theta.n
    nx = (m + 1) ** 2
    off = n_s * nx
    g = np.zeros(n_theta(n_s, m, n))
    for r, (p, band) in enumerate(zip(theta.setups, bands)):
        Phi_r = local_shape(theta.Phi, band.layout)
        _, mom = setup_lines(p, Phi_r, band, q)
        gl = q_gradient(p, Phi_r, band, mom, q=q).sum(axis=0)
        g[r * nx:(r + 1) * nx] += gl[:nx]
        idx = (off + np.arange(m)[:, None] * n + band.layout.tau[None, :]).ravel()
        np.add.at(g, idx, gl[nx:])
    return g


# -- driver ----------------------------------------------------------------------------------


def _valid(theta):
    for p in theta.setups:
        if (np.any(p.f <= 0) or np.any(p.zeta < ZETA_BOUNDS[0]) or np.any(p.zeta > ZETA_BOUNDS[1])
                or p.Se <= 0):
            return False
        S = 0.5 * (p.S + p.S.conj().T)
        if np.linalg.eigvalsh(S).min() < -1e-12 * max(np.trace(S).real, 1e-300):
            return False
    return np.all(np.linalg.norm(theta.Phi, axis=0) > 0)


def _param_delta(a, b):
    blocks = [(encode_setup_like(pa), encode_setup_like(pb)) for pa, pb in zip(a.setups, b.setups)]
    blocks.append((a.Phi.ravel(), b.Phi.ravel()))
    worst = 0.0
    for u, v in blocks:
        worst = max(worst, np.abs(u - v).max() / max(np.abs(v).max(), 1e-300))
    return worst


def encode_setup_like(p):
    return np.concatenate([p.f, p.zeta, p.S.real.ravel(), p.S.imag.ravel(), [p.Se]])


def _bezier(v0, v1, v2, t):
    # (1-t)^2 v0 + 2t(1-t) v1 + t^2 v2 = v0 + 2t r + t^2 d
    r = v1 - v0
    d = v2 - 2.0 * v1 + v0
    return v0 + 2.0 * t * r + t * t * d


def _try_extrapolate(th0, th1, th2, L2, bands, q, settings, max_backtrack=10):
    """Parabolic step through three successive iterates, followed by one EM step.

    The step length t = |r| / |d| is the squared-extrapolation choice; it is
    pulled back towards t = 1 until the stabilized point beats the plain iterate.
    Returns (theta, moments, nllf) or None.
    """
    v0, v1, v2 = encode(th0), encode(th1), encode(th2)
    nd = np.linalg.norm(v2 - 2.0 * v1 + v0)
    if nd == 0:
        return None
    t = np.linalg.norm(v1 - v0) / nd
    n_s, m, n = th2.n_s, th2.m, th2.n
    for _ in range(max_backtrack):
        if t <= 1.0:
            return None
        try:
            cand = renormalize(decode(_bezier(v0, v1, v2, t), n_s, m, n))
            if _valid(cand):
                mom, Lc = e_step(cand, bands, q)
                if np.isfinite(Lc):
                    cand = renormalize(m_step(mom, bands, cand, q, settings))
                    mom, Lc = e_step(cand, bands, q)
                    if Lc <= L2:
                        return cand, mom, Lc
        except (np.linalg.LinAlgError, ValueError):
            pass
        t = 0.5 * (t + 1.0)
    return None


class _Anderson:
    """Anderson mixing on the EM map in the flat encoding (residuals scaled per entry)."""

    def __init__(self, memory):
        self.memory = memory
        self.X, self.G = [], []

    def reset(self):
        self.X, self.G = self.X[-1:], self.G[-1:]

    def propose(self, x, g):
        self.X = (self.X + [x])[-self.memory - 1:]
        self.G = (self.G + [g])[-self.memory - 1:]
        if len(self.X) < 2:
            return None
        sc = 1.0 / np.maximum(np.abs(g), 1e-3 * np.abs(g).max())
        F = np.array([(gi - xi) * sc for xi, gi in zip(self.X, self.G)])
        dF = np.diff(F, axis=0).T
        dG = np.diff(np.array(self.G), axis=0).T
        gam, *_ = np.linalg.lstsq(dF, F[-1], rcond=1e-10)
        return g - dG @ gam


def _anderson_step(acc, theta, plain, L_plain, bands, q):
    v = acc.propose(encode(theta), encode(plain))
    if v is None:
        return None
    try:
        cand = renormalize(decode(v, plain.n_s, plain.m, plain.n))
        if _valid(cand):
            mom, Lc = e_step(cand, bands, q)
            if np.isfinite(Lc) and Lc <= L_plain:
                return cand, mom, Lc
    except (np.linalg.LinAlgError, ValueError):
        pass
    acc.reset()
    return None


def run_em(bands, f0=None, settings=None, theta0=None, q=0, callback=None):
    """EM from ``initialize(bands, f0)`` (or ``theta0``) until both tolerances hold.

    Accelerated candidates are only taken when their nllf does not exceed the
    plain EM iterate, so the trace stays non-increasing.
    """
    settings = settings or EmSettings()
    t_start = time.perf_counter()
    theta = renormalize(theta0.copy() if theta0 is not None else initialize(bands, f0, q))
    moments, L = e_step(theta, bands, q)
    trace = [(0, L, np.nan, False)]
    history = [theta]
    acc = _Anderson(settings.anderson_memory)
    converged = False
    it = 0
    for it in range(1, settings.max_iter + 1):
        new = renormalize(m_step(moments, bands, theta, q, settings))
        new_moments, L_new = e_step(new, bands, q)
        best = None
        if settings.acceleration == "anderson":
            best = _anderson_step(acc, theta, new, L_new, bands, q)
        elif (settings.acceleration == "parabolic" and it % settings.accel_every == 0
              and len(history) >= 2):
            best = _try_extrapolate(history[-2], history[-1], new, L_new, bands, q, settings)
        accelerated = best is not None
        if accelerated:
            new, new_moments, L_new = best
        dp = _param_delta(new, theta)
        dL = abs(L - L_new) / max(abs(L_new), 1e-300)
        trace.append((it, L_new, dp, accelerated))
        history = (history + [new])[-2:]
        theta, moments, L = new, new_moments, L_new
        if callback is not None:
            callback(it, theta, L)
        if dL < settings.tol_rel_nllf and dp < settings.tol_param:
            converged = True
            break
    g = nllf_gradient(theta, bands, q)
    return MpvResult(theta, [t[1] for t in trace], converged, float(np.abs(g).max()),
                     it, trace, time.perf_counter() - t_start)
