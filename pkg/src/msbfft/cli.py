"""Command-line front end: ``msbfft {synth,identify,pcm,report}``.

Exit codes: 0 success, 2 EM did not converge (results still written),
1 any hard error (bad config, missing files, failed factorization).
"""

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from . import io as mio
from .em_mpv import EmSettings, run_em
from .fdm_oracle import FdSettings, fd_hessian, nllf_flat, pcm_fdm, typical_scale
from .model import ConfigurationError, SelectionMap, encode, param_labels
from .pcm_fast import constraint_gradient, pcm
from .spectra import band_slice, scaled_fft, sv_spectrum
from .synth import (PRESET_BAND, PRESET_F0, SetupSegment, TestPlan, TrueModel, preset_plan,
                    shear_frame_preset, synthesize_plan)

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class CliError(Exception):
    pass


def _out_dir(args):
    if not args.out:
        raise CliError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


# -- synth ---------------------------------------------------------------------------


def _custom_model(d, seed):
    """TrueModel + TestPlan + band from a synth config object."""
    try:
        md = d["model"]
        S = md["S"]
        S = mio._uncplx(S) if isinstance(S, dict) else np.asarray(S, dtype=complex)
        Phi = np.asarray(md["Phi"], dtype=float)
        if Phi.ndim != 2:
            raise ConfigurationError("model.Phi: expected an n x m matrix")
        model = TrueModel(md["f"], md["zeta"], Phi / np.linalg.norm(Phi, axis=0), S,
                          float(md["Se"]), int(md.get("q", 0)), float(md.get("fs", 100.0)),
                          seed, list(md.get("dof_labels", [])))
        segs, t0 = [], 0.0
        for r, s in enumerate(d["setups"]):
            dur = float(s["duration"])
            if dur <= 0:
                raise ConfigurationError(f"setups[{r}].duration: must be positive")
            segs.append(SetupSegment(SelectionMap.from_one_based(s["tau"], model.n), t0, dur))
            t0 += dur
        band = tuple(float(b) for b in d["band"])
    except KeyError as exc:
        raise ConfigurationError(f"synth config: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"synth config: {exc}") from None
    plan = TestPlan(segs, t0)
    plan.validate(model.n)
    return model, plan, band, d.get("f0")


def cmd_synth(args):
    t0 = time.perf_counter()
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    if args.config:
        model, plan, band, f0 = _custom_model(mio.read_json(args.config, "config"), seed)
    else:
        if args.preset not in (None, "shear-frame"):
            raise CliError(f"unknown preset {args.preset!r}")
        if args.duration_min <= 0:
            raise CliError("--duration-min must be positive")
        if args.setups < 1:
            raise CliError("--setups must be >= 1")
        dur = args.duration_min * 60.0
        plan, dofs = preset_plan(args.setups, duration=dur)
        model = shear_frame_preset(seed).restricted(dofs)
        band, f0 = PRESET_BAND, list(PRESET_F0)
    records = synthesize_plan(model, plan, seed)
    t1 = time.perf_counter()
    setups, outputs = [], []
    for r, (rec, seg) in enumerate(zip(records, plan.segments)):
        name = f"setup{r + 1}.csv"
        mio.write_history(os.path.join(out, name), rec)
        setups.append({"data": name, "tau": [int(t) + 1 for t in seg.layout.tau]})
        outputs.append(name)
    mio.write_json(os.path.join(out, "plan.json"), {
        "total_duration": plan.total_duration,
        "segments": [{"tau": [int(t) + 1 for t in s.layout.tau], "start": s.start,
                      "duration": s.duration} for s in plan.segments]})
    mio.write_json(os.path.join(out, "truth.json"), {
        "f": model.f_true.tolist(), "zeta": model.zeta_true.tolist(),
        "Phi": model.Phi_true.tolist(), "S": mio._cplx(model.S_true), "Se": model.Se_true,
        "q": model.q, "fs": model.fs, "dof_labels": model.dof_labels})
    cfg = {"n_dofs": model.n, "band": list(band), "m": model.m, "q": model.q,
           "setups": setups, "dof_labels": model.dof_labels, "truth": "truth.json"}
    if f0 is not None:
        cfg["f0"] = list(f0)
    mio.write_json(os.path.join(out, "identify.json"), cfg)
    outputs += ["plan.json", "truth.json", "identify.json"]
    man = mio.RunManifest("synth", __version__, out, args.config, [],
                          {"preset": None if args.config else "shear-frame", "setups": len(plan.segments),
                           "duration_min": [s.duration / 60.0 for s in plan.segments]},
                          seed, args.deterministic,
                          {"synthesize": t1 - t0, "total": time.perf_counter() - t0}, outputs)
    man.write()
    return EXIT_OK


# -- identify -----------------------------------------------------------------------


def _load_bands(cfg):
    bands, paths = [], []
    for r, mp in enumerate(cfg.maps()):
        path = cfg.data_path(r)
        y = mio.read_history(path, cfg.sidecar_path(r))
        if y.n_channels != mp.n_r:
            raise ConfigurationError(f"config.setups[{r}]: {mp.n_r} DoFs in tau but "
                                     f"{y.n_channels} channels in {path}")
        bands.append(band_slice(scaled_fft(y), cfg.band[0], cfg.band[1], r, mp))
        paths.append(path)
    return bands, paths


def _em_settings(cfg, args):
    try:
        s = EmSettings(**cfg.em)
    except TypeError as exc:
        raise ConfigurationError(f"config.em: {exc}") from None
    if args.deterministic:
        s.deterministic = True
    return s


def _truth_phi(cfg, raw):
    path = raw.get("truth")
    if not path:
        return None
    path = path if os.path.isabs(path) else os.path.join(cfg.base_dir, path)
    if not os.path.exists(path):
        return None
    return np.asarray(mio.read_json(path, "truth")["Phi"], dtype=float)


def cmd_identify(args):
    t0 = time.perf_counter()
    out = _out_dir(args)
    if not args.config:
        raise CliError("identify needs --config")
    cfg = mio.load_identify_config(args.config)
    bands, paths = _load_bands(cfg)
    t1 = time.perf_counter()
    theta0 = None
    if args.init:
        theta0 = mio.theta_from_json(mio.read_json(args.init, "initial MPV")["theta"])
    elif cfg.f0 is None:
        raise ConfigurationError("config.f0: required unless --init is given")
    res = run_em(bands, cfg.f0, _em_settings(cfg, args), theta0=theta0, q=cfg.q)
    t2 = time.perf_counter()
    rec = mio.mpv_to_json(res, cfg)
    rec["config_path"] = os.path.abspath(args.config)
    if args.deterministic:
        rec["elapsed_s"] = None
    mio.write_json(os.path.join(out, "mpv.json"), rec)
    res.write_trace(os.path.join(out, "trace.csv"))
    man = mio.RunManifest("identify", __version__, out, args.config, paths,
                          {"band": list(cfg.band), "m": cfg.m, "q": cfg.q, "init": args.init},
                          args.seed, args.deterministic,
                          {"load": t1 - t0, "em": t2 - t1, "total": time.perf_counter() - t0},
                          ["mpv.json", "trace.csv"])
    man.write()
    if not res.converged:
        print(f"EM did not converge in {res.n_iter} iterations (nllf {res.nllf:.6e})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# -- pcm ------------------------------------------------------------------------------


def cmd_pcm(args):
    t0 = time.perf_counter()
    out = _out_dir(args)
    mpv_path = args.mpv or os.path.join(out, "mpv.json")
    if not os.path.exists(mpv_path):
        raise CliError(f"MPV file not found: {mpv_path}")
    rec = mio.read_json(mpv_path, "MPV")
    if not rec.get("converged", False) and not args.force:
        raise CliError(f"{mpv_path}: MPV is not converged; use --force to proceed anyway")
    config = args.config or rec.get("config_path")
    if not config:
        raise CliError("pcm needs --config (or an MPV file that records its config)")
    raw = mio.read_json(config, "config")
    cfg = mio.load_identify_config(config)
    theta = mio.theta_from_json(rec["theta"])
    if theta.n != cfg.n_dofs or theta.m != cfg.m or theta.n_s != len(cfg.setups):
        raise ConfigurationError("MPV dimensions do not match the config")
    bands, paths = _load_bands(cfg)
    Phi_ref = _truth_phi(cfg, raw)
    t1 = time.perf_counter()
    res = pcm(theta, bands, cfg.q, Phi_ref=Phi_ref, keep_full=True)
    t2 = time.perf_counter()
    labels = res.labels
    post = mio.posterior_to_json(res)
    if args.deterministic:
        post["timings_s"] = {k: None for k in post["timings_s"]}
    mio.write_json(os.path.join(out, "posterior.json"), post)
    nx = (theta.m + 1) ** 2
    outputs = ["posterior.json", "shape_cov.csv"]
    off = theta.n_s * nx
    mio.write_cov_block(os.path.join(out, "shape_cov.csv"), res.shape_cov, labels[off:])
    for r in range(theta.n_s):
        name = f"setup{r + 1}_cov.csv"
        mio.write_cov_block(os.path.join(out, name), res.setup_cov[r], labels[r * nx:(r + 1) * nx])
        outputs.append(name)
    timings = {"load": t1 - t0, "pcm_fast": t2 - t1}
    if args.oracle == "fdm":
        s = FdSettings(rel_step=1e-4, abs_step_floor=1e-12)
        t3 = time.perf_counter()
        H_fd = fd_hessian(nllf_flat(theta, bands, cfg.q), encode(theta), s, typical_scale(theta))
        C_fd = pcm_fdm(H_fd, constraint_gradient(theta), "nullspace")
        timings["fdm"] = time.perf_counter() - t3
        _write_oracle(out, res, C_fd, labels, timings)
        outputs += ["oracle_report.csv", "cov_pairs.csv", "timing.csv"]
    man = mio.RunManifest("pcm", __version__, out, config, paths + [mpv_path],
                          {"oracle": args.oracle, "force": args.force}, args.seed,
                          args.deterministic, dict(timings, total=time.perf_counter() - t0), outputs)
    man.write()
    return EXIT_OK


def _write_oracle(out, res, C_fd, labels, timings):
    C = res.C_hat
    scale = np.sqrt(np.outer(np.diag(C_fd), np.diag(C_fd)))
    rows = []
    for i in range(C.shape[0]):
        for j in range(i + 1):
            d = abs(C[i, j] - C_fd[i, j])
            dom = scale[i, j] > 0 and abs(C_fd[i, j]) >= 1e-3 * scale[i, j]
            rel = d / abs(C_fd[i, j]) if C_fd[i, j] != 0 else np.inf
            rows.append([labels[i], labels[j], float(C[i, j]), float(C_fd[i, j]), float(rel), int(dom)])
    mio.write_csv(os.path.join(out, "oracle_report.csv"),
                  ["row", "col", "fast", "fdm", "rel_diff", "dominant"], rows)
    sd_f, sd_d = np.sqrt(np.clip(np.diag(C), 0, None)), np.sqrt(np.clip(np.diag(C_fd), 0, None))
    mio.write_csv(os.path.join(out, "cov_pairs.csv"), ["label", "std_fast", "std_fdm"],
                  ([lab, float(a), float(b)] for lab, a, b in zip(labels, sd_f, sd_d)))
    mio.write_csv(os.path.join(out, "timing.csv"), ["method", "seconds"],
                  [["em_route", float(timings["pcm_fast"])], ["fdm", float(timings["fdm"])]])
    dom = [r for r in rows if r[5]]
    worst = max((r[4] for r in dom), default=0.0)
    print(f"oracle: max relative difference on dominant entries {worst:.3e}; "
          f"speedup {timings['fdm'] / max(timings['pcm_fast'], 1e-12):.1f}x")


# -- report -------------------------------------------------------------------------


def cmd_report(args):
    out = args.out
    if not out or not os.path.isdir(out):
        raise CliError(f"results directory not found: {out}")
    files = set(os.listdir(out))
    if not files & {"mpv.json", "posterior.json", "bench_setups.csv", "bench_duration.csv"}:
        raise CliError(f"{out}: no results to report")
    rdir = os.path.join(out, "report")
    written = []
    if "mpv.json" in files:
        rec = mio.read_json(os.path.join(out, "mpv.json"))
        theta = mio.theta_from_json(rec["theta"])
        config = args.config or rec.get("config_path")
        if config and os.path.exists(config):
            cfg = mio.load_identify_config(config)
            rows = []
            for r in range(len(cfg.setups)):
                y = mio.read_history(cfg.data_path(r), cfg.sidecar_path(r))
                f, sv = sv_spectrum(scaled_fft(y))
                keep = (f >= cfg.band[0]) & (f <= cfg.band[1]) if args.band_only else slice(None)
                for fk, s in zip(f[keep], sv[keep]):
                    rows.append([r + 1, float(fk)] + [float(v) for v in s])
            width = max((len(r) for r in rows), default=2) - 2
            mio.write_csv(os.path.join(rdir, "sv_spectrum.csv"),
                          ["setup", "freq"] + [f"sv{i + 1}" for i in range(width)], rows)
            written.append("sv_spectrum.csv")
        if "posterior.json" in files:
            post = mio.read_json(os.path.join(out, "posterior.json"))
            rows = []
            for p in post["setup_params"]:
                setup, name = p["label"].split(":", 1)
                rows.append([int(setup[1:]), name, p["mpv"], p["std"], p["mpv"] - 3 * p["std"],
                             p["mpv"] + 3 * p["std"]])
            mio.write_csv(os.path.join(rdir, "errorbars.csv"),
                          ["setup", "parameter", "mpv", "std", "lower_3sd", "upper_3sd"], rows)
            mac = post.get("mac") or [None] * theta.m
            mio.write_csv(os.path.join(rdir, "mac.csv"), ["mode", "mac", "shape_uncertainty"],
                          [[i + 1, "" if mac[i] is None else float(mac[i]), float(u)]
                           for i, u in enumerate(post["shape_uncertainty"])])
            written += ["errorbars.csv", "mac.csv"]
    if "cov_pairs.csv" in files:
        data = np.genfromtxt(os.path.join(out, "cov_pairs.csv"), delimiter=",", names=True,
                             dtype=None, encoding="utf-8")
        mio.write_csv(os.path.join(rdir, "cov_scatter.csv"), ["label", "std_fast", "std_fdm"],
                      ([str(r[0]), float(r[1]), float(r[2])] for r in np.atleast_1d(data)))
        written.append("cov_scatter.csv")
    for name, tgt in (("bench_setups.csv", "timing_vs_setups.csv"),
                      ("bench_duration.csv", "timing_vs_duration.csv")):
        if name in files:
            with open(os.path.join(out, name)) as fh:
                mio.write_atomic(os.path.join(rdir, tgt), fh.read())
            written.append(tgt)
    if not written:
        raise CliError(f"{out}: nothing to report")
    print("wrote " + ", ".join(os.path.join(rdir, w) for w in written))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="msbfft", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (u64)")
        sp.add_argument("--deterministic", action="store_true",
                        help="fixed-order reductions; no wall-clock values in written files")

    sp = sub.add_parser("synth", help="generate a synthetic multi-setup dataset")
    common(sp)
    sp.add_argument("--preset", default="shear-frame", help="built-in model (shear-frame)")
    sp.add_argument("--setups", type=int, default=4)
    sp.add_argument("--duration-min", type=float, default=5.0, help="per-setup duration in minutes")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("identify", help="most probable value by EM")
    common(sp)
    sp.add_argument("--init", help="start from a previously written mpv.json")
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("pcm", help="posterior covariance at the MPV")
    common(sp)
    sp.add_argument("--mpv", help="mpv.json from identify (default: <out>/mpv.json)")
    sp.add_argument("--oracle", choices=["fdm"], help="also run the finite-difference reference")
    sp.add_argument("--force", action="store_true", help="accept a non-converged MPV")
    sp.set_defaults(func=cmd_pcm)

    sp = sub.add_parser("report", help="plot-ready CSV tables from a results directory")
    common(sp)
    sp.add_argument("--band-only", action="store_true", help="restrict the SV spectrum to the band")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except (CliError, ConfigurationError, ValueError, RuntimeError, OSError,
            np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
