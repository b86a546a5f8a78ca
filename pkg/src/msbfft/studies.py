"""Shear-frame studies shared by scripts/ and the acceptance suite.

Each study returns plain dicts so results can be printed, tabulated or
written to CSV without further conversion.
"""

import time

import numpy as np

from .em_mpv import EmSettings, run_em
from .fdm_oracle import FdSettings, fd_hessian, nllf_flat, typical_scale
from .model import Theta, encode, local_shape
from .pcm_fast import (IndefiniteHessian, assemble, constrained_inverse, constraint_gradient,
                       local_hessian, pcm)
from .synth import PRESET_F0, preset_bands


TIMING_RIDGE = 0.05


def recovery_run(seed, n_setups=4, duration=300.0, rovers_per_setup=8, settings=None):
    """EM from the preset peak picks, then PCM; MAC and +-3 sigma coverage of f, zeta."""
    model, _, bands = preset_bands(n_setups, duration, seed, rovers_per_setup)
    settings = settings or EmSettings(max_iter=3000)
    res = run_em(bands, f0=list(PRESET_F0), settings=settings)
    th = res.theta_hat
    m = th.m
    out = dict(seed=seed, duration=duration, converged=res.converged, stationary=res.stationary,
               nllf=res.nllf, grad_norm=res.grad_norm, n_iter=res.n_iter, em_time=res.elapsed,
               mac=np.sum(th.Phi * model.Phi_true, axis=0) ** 2,
               min_S_eig=min(np.linalg.eigvalsh(p.S).min() for p in th.setups),
               pcm_ok=False, pcm_error="", shape_uncertainty=np.full(m, np.nan),
               covered=0, pairs=2 * m * th.n_s)
    try:
        post = pcm(th, bands, Phi_ref=model.Phi_true)
    except RuntimeError as exc:
        out["pcm_error"] = str(exc)
        return out
    sd = np.sqrt(post.param_var)
    hits = 0
    for r, p in enumerate(th.setups):
        hits += int(np.sum(np.abs(p.f - model.f_true) <= 3 * sd[r, :m]))
        hits += int(np.sum(np.abs(p.zeta - model.zeta_true) <= 3 * sd[r, m:2 * m]))
    out.update(pcm_ok=True, shape_uncertainty=post.shape_uncertainty, covered=hits,
               pcm_time=post.timings["total"])
    return out


def truth_theta(model, bands, ridge=0.0):
    """True parameters in the per-setup layout (the model is the same in every setup).

    ``ridge`` adds ``ridge * tr(S)/m * I`` to S; the preset S is singular and
    the Hessian needs S^-1, so timing runs use a small ridge (cost does not
    depend on the values).
    """
    p = model.setup_params()
    p.S = p.S + ridge * np.trace(p.S).real / p.m * np.eye(p.m)
    return Theta([p.copy() for _ in bands], model.Phi_true.copy())


def time_pcm(theta, bands, repeats=3):
    """Best-of wall time of local Hessians + assembly + constrained inverse.

    An indefinite projected Hessian still costs a full factorization, so it
    is timed rather than treated as an error.
    """
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        locs = [local_hessian(p, local_shape(theta.Phi, b.layout), b) for p, b in zip(theta.setups, bands)]
        H = assemble(locs, [b.layout for b in bands], theta.m, theta.n)
        try:
            constrained_inverse(H, constraint_gradient(theta))
        except IndefiniteHessian:
            pass
        best = min(best, time.perf_counter() - t0)
    return best


def time_fd_hessian(theta, bands, settings=None):
    settings = settings or FdSettings(rel_step=1e-4, abs_step_floor=1e-12)
    t0 = time.perf_counter()
    H = fd_hessian(nllf_flat(theta, bands), encode(theta), settings, typical_scale(theta))
    return time.perf_counter() - t0, H


def bench_duration(durations=(300.0, 600.0, 1200.0), seed=0, repeats=3):
    rows = []
    for d in durations:
        model, _, bands = preset_bands(4, d, seed)
        rows.append(dict(duration_s=d, n_lines=bands[0].n_lines,
                         pcm_s=time_pcm(truth_theta(model, bands, TIMING_RIDGE), bands, repeats)))
    return rows


def bench_setups(setups=(2, 4, 8), rovers_per_setup=4, duration=300.0, seed=0, repeats=3):
    rows = []
    for ns in setups:
        model, _, bands = preset_bands(ns, duration, seed, rovers_per_setup)
        rows.append(dict(n_setups=ns, n_dofs=model.n,
                         pcm_s=time_pcm(truth_theta(model, bands, TIMING_RIDGE), bands, repeats)))
    return rows
