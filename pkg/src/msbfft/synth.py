"""Synthetic multi-setup ambient data: true models, test plans and FFT-domain synthesis.

Data are drawn line by line in the frequency domain,
``F_k = Phi h_k p_k + e_k`` with ``p_k ~ CN(0, S)`` and ``e_k ~ CN(0, Se I)``,
then inverted to real time histories, so the scaled FFT of the output follows
the likelihood model exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import SelectionMap, SetupParams, Theta, check_coverage, frf
from .spectra import SetupBand, TimeHistory


@dataclass
class TrueModel:
    f_true: np.ndarray
    zeta_true: np.ndarray
    Phi_true: np.ndarray
    S_true: np.ndarray
    Se_true: float
    q: int = 0
    fs: float = 100.0
    seed: int = 0
    dof_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.f_true = np.asarray(self.f_true, dtype=float)
        self.zeta_true = np.asarray(self.zeta_true, dtype=float)
        self.Phi_true = np.asarray(self.Phi_true, dtype=float)
        self.S_true = np.asarray(self.S_true, dtype=complex)
        if not np.allclose(np.linalg.norm(self.Phi_true, axis=0), 1.0, atol=1e-12):
            raise ValueError("Phi_true columns must have unit norm")
        if np.linalg.eigvalsh(self.S_true).min() < -1e-12:
            raise ValueError("S_true must be positive semidefinite")
        if not self.dof_labels:
            self.dof_labels = [f"dof{i + 1}" for i in range(self.n)]

    @property
    def n(self):
        return self.Phi_true.shape[0]

    @property
    def m(self):
        return self.Phi_true.shape[1]

    def setup_params(self):
        return SetupParams(self.f_true, self.zeta_true, self.S_true, self.Se_true)

    def restricted(self, dofs):
        """Same model on a subset of DoFs (0-based), shapes renormalized."""
        Phi = self.Phi_true[dofs]
        return TrueModel(self.f_true, self.zeta_true, Phi / np.linalg.norm(Phi, axis=0),
                         self.S_true, self.Se_true, self.q, self.fs, self.seed,
                         [self.dof_labels[d] for d in dofs])


@dataclass
class SetupSegment:
    layout: SelectionMap
    start: float
    duration: float


@dataclass
class TestPlan:
    __test__ = False   # not a pytest class

    segments: list
    total_duration: float

    def validate(self, n):
        for r, seg in enumerate(self.segments):
            if seg.start < 0 or seg.duration <= 0 or seg.start + seg.duration > self.total_duration + 1e-9:
                raise ValueError(f"setup {r}: segment [{seg.start}, {seg.start + seg.duration}] "
                                 f"outside [0, {self.total_duration}]")
        check_coverage([s.layout for s in self.segments], n)

    @property
    def maps(self):
        return [s.layout for s in self.segments]


# -- shear-frame preset -----------------------------------------------------------

N_FLOORS = 8
LX, LY = 20.0, 12.0
REFERENCE_POINTS = (1, 5)


def frame_points():
    """Point number -> (floor, x, y); top floor is 8, 34 points in total."""
    pts = {}
    top = [(0.0, 0.0), (LX / 2, 0.0), (LX, 0.0), (LX / 2, LY), (LX, LY), (0.0, LY)]
    for i, (x, y) in enumerate(top):
        pts[i + 1] = (N_FLOORS, x, y)
    corners = [(0.0, 0.0), (LX, 0.0), (LX, LY), (0.0, LY)]
    p = 7
    for floor in range(N_FLOORS - 1, 0, -1):
        for x, y in corners:
            pts[p] = (floor, x, y)
            p += 1
    return pts


def point_dofs(p):
    """1-based global DoFs (X, Y) of point p."""
    return (2 * p - 1, 2 * p)


def shear_frame_shapes():
    """Rigid-floor TX, TY and torsion shapes over 68 DoFs with a linear height profile."""
    pts = frame_points()
    n = 2 * len(pts)
    Phi = np.zeros((n, 3))
    xc, yc = LX / 2, LY / 2
    for p, (floor, x, y) in pts.items():
        hgt = floor / N_FLOORS
        ix, iy = point_dofs(p)[0] - 1, point_dofs(p)[1] - 1
        Phi[ix, 0] = hgt
        Phi[iy, 1] = hgt
        Phi[ix, 2] = -(y - yc) * hgt
        Phi[iy, 2] = (x - xc) * hgt
    return Phi / np.linalg.norm(Phi, axis=0)


def shear_frame_preset(seed=0):
    c = np.exp(1j * np.pi / 4)
    S = np.array([[1.0, c, 0.0], [np.conj(c), 1.0, 0.0], [0.0, 0.0, 1.0]])
    labels = []
    for p in sorted(frame_points()):
        labels += [f"p{p}x", f"p{p}y"]
    return TrueModel(f_true=[4.20, 4.25, 4.40], zeta_true=[0.01, 0.015, 0.02],
                     Phi_true=shear_frame_shapes(), S_true=S, Se_true=10.0, q=0,
                     fs=100.0, seed=seed, dof_labels=labels)


PRESET_BAND = (3.68, 4.927)
PRESET_F0 = (4.18, 4.27, 4.41)   # rough peak picks used to start EM


def preset_plan(n_setups=4, rovers_per_setup=8, duration=300.0):
    """Reference points 1, 5 in every setup; rovers taken top-down, chunked per setup.

    Returns ``(plan, dofs)`` where ``dofs`` (0-based, into the 68-DoF frame)
    are the covered DoFs; selection maps index into that covered subset.
    """
    rovers = [p for p in sorted(frame_points()) if p not in REFERENCE_POINTS]
    need = n_setups * rovers_per_setup
    if n_setups < 1 or rovers_per_setup < 1 or need > len(rovers):
        raise ValueError(f"{n_setups} setups x {rovers_per_setup} rovers exceeds {len(rovers)} rover points")
    used = sorted(REFERENCE_POINTS) + rovers[:need]
    dofs = [d - 1 for p in sorted(used) for d in point_dofs(p)]
    pos = {d: i for i, d in enumerate(dofs)}
    ref = [d - 1 for p in REFERENCE_POINTS for d in point_dofs(p)]
    segs = []
    for r in range(n_setups):
        pts = rovers[r * rovers_per_setup:(r + 1) * rovers_per_setup]
        chans = ref + [d - 1 for p in pts for d in point_dofs(p)]
        segs.append(SetupSegment(SelectionMap(np.array([pos[d] for d in chans]), len(dofs)),
                                 r * duration, duration))
    return TestPlan(segs, n_setups * duration), dofs


# -- sampling ---------------------------------------------------------------------------


def _complex_normal(rng, cov, size):
    """Draws from CN(0, cov); rank-deficient cov handled in its eigenbasis."""
    lam, V = np.linalg.eigh(np.asarray(cov, dtype=complex))
    L = V * np.sqrt(np.clip(lam, 0.0, None))
    z = (rng.standard_normal((size, lam.size)) + 1j * rng.standard_normal((size, lam.size))) / np.sqrt(2.0)
    return z @ L.T


def draw_lines(p, Phi, freqs, rng, q=0):
    """FFT lines (K, n) from the likelihood model at the given frequencies."""
    freqs = np.asarray(freqs, dtype=float)
    K, n = freqs.size, Phi.shape[0]
    h = frf(p.f[None, :], p.zeta[None, :], freqs[:, None], q)
    modal = _complex_normal(rng, p.S, K)
    noise = np.sqrt(p.Se / 2.0) * (rng.standard_normal((K, n)) + 1j * rng.standard_normal((K, n)))
    return (h * modal) @ Phi.T + noise


def _synthesize(model, Phi, duration, rng):
    N = int(round(duration * model.fs))
    if N < 2 or abs(N - duration * model.fs) > 1e-6:
        raise ValueError("duration * fs must be an integer >= 2")
    dt = 1.0 / model.fs
    n_half = N // 2 + 1
    freqs = np.arange(n_half) / (N * dt)
    k_hi = n_half - 1 if N % 2 == 0 else n_half   # DC and even-N Nyquist left at zero
    lines = np.zeros((n_half, Phi.shape[0]), dtype=complex)
    lines[1:k_hi] = draw_lines(model.setup_params(), Phi, freqs[1:k_hi], rng, model.q)
    return np.fft.irfft(lines.T * np.sqrt(N / dt), n=N, axis=1), dt


def generate(model, duration, rng=None):
    """Real time history of all n DoFs whose scaled FFT follows the model exactly."""
    rng = np.random.default_rng(model.seed) if rng is None else rng
    y, dt = _synthesize(model, model.Phi_true, duration, rng)
    return TimeHistory(y, dt, list(model.dof_labels))


def slice(history, plan):  # noqa: A001 - public name mirrors the operation
    out = []
    N = history.n_samples
    for r, seg in enumerate(plan.segments):
        i0 = int(round(seg.start / history.dt))
        i1 = i0 + int(round(seg.duration / history.dt))
        if i0 < 0 or i1 > N:
            raise ValueError(f"setup {r}: segment exceeds the record ({i1} > {N} samples)")
        rows = seg.layout.tau
        out.append(TimeHistory(history.samples[rows, i0:i1], history.dt,
                               [history.channel_labels[i] for i in rows]))
    return out


def synthesize_plan(model, plan, seed=None):
    """Per-setup records drawn independently (one child RNG stream per setup).

    Each record uses the rows tau of the global shape, i.e. the same law as
    slicing disjoint segments of one long record, without segment-edge leakage.
    """
    plan.validate(model.n)
    seed = model.seed if seed is None else seed
    streams = np.random.SeedSequence(seed).spawn(len(plan.segments))
    out = []
    for seg, ss in zip(plan.segments, streams):
        rows = seg.layout.tau
        y, dt = _synthesize(model, model.Phi_true[rows], seg.duration, np.random.default_rng(ss))
        out.append(TimeHistory(y, dt, [model.dof_labels[i] for i in rows]))
    return out


# -- small random cases for tests ---------------------------------------------------------


def random_case(m=2, n_s=2, n_r=4, n_lines=200, n_ref=2, seed=0, q=0, f_center=2.0,
                df=0.005, snr=100.0):
    """Random well-posed multi-setup problem drawn from the model.

    Modes are spaced about 6% apart around ``f_center`` with 2-3% damping, so
    each resonance spans many lines and neighbouring peaks overlap.  Returns ``(theta_true, bands)``; setups share ``n_ref``
    reference DoFs.
    """
    rng = np.random.default_rng(seed)
    n_rov = n_r - n_ref
    if n_rov < 0 or m > n_r:
        raise ValueError("need n_ref <= n_r and m <= n_r")
    n = n_ref + n_s * n_rov
    Phi = rng.standard_normal((n, m))
    Phi /= np.linalg.norm(Phi, axis=0)
    sep = 0.06 * f_center
    f = f_center + sep * (np.arange(m) - (m - 1) / 2) + 0.002 * f_center * rng.standard_normal(m)
    zeta = 0.02 + 0.01 * rng.random(m)
    freqs = f_center + (np.arange(n_lines) - n_lines // 2) * df
    setups, bands = [], []
    for r in range(n_s):
        B = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
        S = B @ B.conj().T / m + 0.5 * np.eye(m)
        Se = float(np.abs(np.diag(S)).mean() / snr * (1 + rng.random()))
        p = SetupParams(f * (1 + 0.001 * rng.standard_normal(m)), zeta, S, Se)
        tau = np.concatenate([np.arange(n_ref), n_ref + r * n_rov + np.arange(n_rov)])
        mp = SelectionMap(tau, n)
        F = draw_lines(p, Phi[tau], freqs, rng, q)
        setups.append(p)
        bands.append(SetupBand(freqs.copy(), F, r, mp))
    return Theta(setups, Phi), bands


def preset_bands(n_setups=4, duration=300.0, seed=0, rovers_per_setup=8, band=PRESET_BAND):
    """Shear-frame data sliced to the identification band.

    Returns ``(model, plan, bands)`` where ``model`` lives on the covered DoFs.
    """
    from .spectra import band_slice, scaled_fft
    plan, dofs = preset_plan(n_setups, rovers_per_setup, duration)
    model = shear_frame_preset(seed).restricted(dofs)
    records = synthesize_plan(model, plan, seed)
    bands = [band_slice(scaled_fft(y), band[0], band[1], r, seg.layout)
             for r, (y, seg) in enumerate(zip(records, plan.segments))]
    return model, plan, bands
