import numpy as np
import pytest

from msbfft import em_mpv
from msbfft.em_mpv import EmSettings, e_step, initialize, m_step, nllf_gradient, renormalize, run_em
from msbfft.fdm_oracle import FdSettings, fd_gradient, nllf_flat
from msbfft.likelihood import nllf, q_value
from msbfft.model import SetupParams, Theta, encode, local_shape
from msbfft.synth import random_case

from conftest import rel


def _q_total(theta, bands, moments):
    return sum(q_value(p, local_shape(theta.Phi, b.layout), b, mom)
               for p, b, mom in zip(theta.setups, bands, moments))


def test_settings_validation():
    with pytest.raises(ValueError):
        EmSettings(acceleration="fast")
    with pytest.raises(ValueError):
        EmSettings(max_iter=0)
    with pytest.raises(ValueError):
        EmSettings(tol_param=0.0)


def test_initialize(small_case):
    theta, bands = small_case
    th0 = initialize(bands, np.sort(theta.setups[0].f))
    assert np.allclose(np.linalg.norm(th0.Phi, axis=0), 1.0)
    for p in th0.setups:
        assert np.allclose(p.zeta, 0.01)
        assert p.Se > 0 and np.all(np.linalg.eigvalsh(p.S) > 0)
    with pytest.raises(ValueError):
        initialize(bands, [2.1, 2.0])
    with pytest.raises(ValueError):
        initialize(bands, [0.5, 2.0])


def test_m_step_sub_updates_do_not_increase_q(small_case, rng):
    theta, bands = small_case
    th = initialize(bands, np.sort(theta.setups[0].f))
    moments, _ = e_step(th, bands)
    q0 = _q_total(th, bands, moments)
    Phi = em_mpv._update_phi(moments, bands, th)
    th1 = Theta([p.copy() for p in th.setups], Phi)
    q1 = _q_total(th1, bands, moments)
    setups = []
    for p, b, mom in zip(th.setups, bands, moments):
        Se = em_mpv._residual_power(local_shape(Phi, b.layout), b, mom).sum() / (b.n_r * b.n_lines)
        setups.append(SetupParams(p.f, p.zeta, p.S, float(Se)))
    th2 = Theta(setups, Phi)
    q2 = _q_total(th2, bands, moments)
    th3 = m_step(moments, bands, th)
    q3 = _q_total(th3, bands, moments)
    tol = 1e-10 * abs(q0)
    assert q1 <= q0 + tol and q2 <= q1 + tol and q3 <= q2 + tol


@pytest.mark.parametrize("seed", range(3))
def test_plain_em_monotone(seed):
    theta, bands = random_case(m=2, n_s=3, n_r=4, n_lines=120, seed=seed)
    f0 = np.sort(theta.setups[0].f) * 1.01
    res = run_em(bands, f0=f0, settings=EmSettings(max_iter=150, acceleration="off"))
    L = np.array(res.nllf_trace)
    assert np.all(np.diff(L) <= 1e-9 * np.abs(L[1:]))


def test_accelerated_traces_monotone(small_case):
    theta, bands = small_case
    f0 = np.sort(theta.setups[0].f)
    for acc in ("parabolic", "anderson"):
        res = run_em(bands, f0=f0, settings=EmSettings(max_iter=300, acceleration=acc))
        L = np.array(res.nllf_trace)
        assert np.all(np.diff(L) <= 1e-9 * np.abs(L[1:])), acc


def test_renormalize_invariance(small_case, rng):
    theta, bands = small_case
    d = np.array([3.0, -0.5])
    scaled = Theta([SetupParams(p.f, p.zeta, p.S / np.outer(d, d), p.Se) for p in theta.setups],
                   theta.Phi * d)
    assert np.isclose(nllf(scaled, bands), nllf(theta, bands), rtol=1e-12)
    out = renormalize(scaled)
    assert np.allclose(np.linalg.norm(out.Phi, axis=0), 1.0)
    assert np.isclose(nllf(out, bands), nllf(theta, bands), rtol=1e-12)
    with pytest.raises(ValueError):
        renormalize(Theta(theta.setups, np.zeros_like(theta.Phi)))


def test_gradient_matches_fd(small_case, rng):
    theta, bands = small_case
    g = nllf_gradient(theta, bands)
    g_fd = fd_gradient(nllf_flat(theta, bands), encode(theta), FdSettings(3e-6, 1e-12))
    assert rel(g, g_fd) < 1e-6


def test_mpv_stationary_and_restart(small_mpv, small_case):
    _, bands = small_case
    assert small_mpv.converged and small_mpv.stationary
    again = run_em(bands, theta0=small_mpv.theta_hat)
    assert again.converged and again.n_iter <= 3
    assert again.nllf <= small_mpv.nllf + 1e-9 * abs(small_mpv.nllf)


def test_accelerations_agree(small_case):
    theta, bands = small_case
    f0 = np.sort(theta.setups[0].f)
    # plain EM crawls here, so check it never beats the accelerated optimum
    # and that restarting plain EM from that optimum stays put
    a = run_em(bands, f0=f0, settings=EmSettings(acceleration="off", max_iter=300))
    b = run_em(bands, f0=f0, settings=EmSettings(acceleration="anderson", max_iter=2000))
    assert b.converged and b.n_iter < 300
    assert min(a.nllf_trace) >= b.nllf - 1e-9 * abs(b.nllf)
    c = run_em(bands, theta0=b.theta_hat, settings=EmSettings(acceleration="off", max_iter=20))
    assert abs(c.nllf - b.nllf) <= 1e-9 * abs(b.nllf)


def test_callback_and_trace(tmp_path, small_case):
    theta, bands = small_case
    seen = []
    res = run_em(bands, theta0=theta, settings=EmSettings(max_iter=5),
                 callback=lambda it, th, L: seen.append((it, L)))
    assert [s[0] for s in seen] == list(range(1, res.n_iter + 1))
    path = tmp_path / "trace.csv"
    res.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,nllf,max_param_delta,accelerated"
    assert len(lines) == res.n_iter + 2


def test_deterministic(small_case):
    theta, bands = small_case
    f0 = np.sort(theta.setups[0].f)
    a = run_em(bands, f0=f0, settings=EmSettings(max_iter=50))
    b = run_em(bands, f0=f0, settings=EmSettings(max_iter=50))
    assert a.nllf_trace == b.nllf_trace
    assert np.array_equal(encode(a.theta_hat), encode(b.theta_hat))
