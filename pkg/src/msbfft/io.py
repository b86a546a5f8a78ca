"""File formats: time-history CSV, identification config, theta / posterior JSON, manifests.

Numbers are written in full double precision (``%.17e``) so files can be
diffed across implementations.  Every writer goes through ``write_atomic``.
"""

import csv
import io as _io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ConfigurationError, SelectionMap, SetupParams, Theta, check_coverage
from .spectra import TimeHistory

FMT = "%.17e"


def fnum(x):
    return FMT % x


def write_atomic(path, text):
    """Write via a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fnum(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    write_atomic(path, _csv_text(header, rows))


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    write_atomic(path, dump_json(obj))


def read_json(path, what="file"):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


# -- time histories ----------------------------------------------------------------


def write_history(path, history):
    """CSV with header ``time,<labels...>``, one row per sample."""
    t = np.arange(history.n_samples) * history.dt
    buf = _io.StringIO()
    buf.write(",".join(["time"] + list(history.channel_labels)) + "\n")
    data = np.column_stack([t, history.samples.T])
    np.savetxt(buf, data, fmt=FMT, delimiter=",", newline="\n")
    write_atomic(path, buf.getvalue())


def read_history(path, sidecar=None):
    """Read a time-history CSV.

    With ``sidecar`` (JSON with ``dt`` and ``channel_labels``) the CSV is a
    headerless numeric matrix, one column per channel.  Otherwise the first
    column is time and dt is inferred from it (uniform within 1e-6 relative).
    """
    if sidecar is not None:
        meta = read_json(sidecar, "sidecar")
        if "dt" not in meta:
            raise ConfigurationError(f"{sidecar}: missing field 'dt'")
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        labels = list(meta.get("channel_labels", []))
        if labels and len(labels) != data.shape[1]:
            raise ConfigurationError(f"{sidecar}: {len(labels)} labels for {data.shape[1]} columns")
        return TimeHistory(data.T, float(meta["dt"]), labels)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
    except FileNotFoundError:
        raise ConfigurationError(f"time history not found: {path}") from None
    if not header or header[0].strip().lower() != "time":
        raise ConfigurationError(f"{path}: header must start with 'time'")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ConfigurationError(f"{path}: {len(header)} header fields but {data.shape[1]} columns")
    t = data[:, 0]
    if t.size < 2:
        raise ConfigurationError(f"{path}: need at least two samples")
    steps = np.diff(t)
    dt = (t[-1] - t[0]) / (t.size - 1)
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ConfigurationError(f"{path}: time column is not uniformly sampled")
    return TimeHistory(data[:, 1:].T, dt, [h.strip() for h in header[1:]])


# -- identification config ------------------------------------------------------------


@dataclass
class SetupSpec:
    data: str
    tau: list                  # 1-based global DoF per channel
    sidecar: str = None


@dataclass
class IdentifyConfig:
    """What ``identify`` and ``pcm`` need: data files, maps, band and model order.

    JSON layout::

        {"n_dofs": 68, "band": [3.68, 4.927], "m": 3, "q": 0,
         "f0": [4.2, 4.25, 4.4],
         "setups": [{"data": "setup1.csv", "tau": [1, 2, 9, ...]}, ...],
         "em": {"max_iter": 2000, "acceleration": "anderson"},
         "dof_labels": [...]}

    Relative data paths are resolved against the config file's directory.
    """
    n_dofs: int
    band: tuple
    m: int
    setups: list
    q: int = 0
    f0: list = None
    em: dict = field(default_factory=dict)
    dof_labels: list = None
    base_dir: str = "."

    def data_path(self, r):
        p = self.setups[r].data
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def sidecar_path(self, r):
        p = self.setups[r].sidecar
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def maps(self):
        return [SelectionMap.from_one_based(s.tau, self.n_dofs) for s in self.setups]

    def to_json(self):
        d = asdict(self)
        d.pop("base_dir")
        d["band"] = list(self.band)
        d["setups"] = [{k: v for k, v in s.items() if v is not None} for s in d["setups"]]
        return {k: v for k, v in d.items() if v is not None}


def _need(d, key, where):
    if key not in d:
        raise ConfigurationError(f"{where}: missing field '{key}'")
    return d[key]


def _int(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
        raise ConfigurationError(f"{where}: expected an integer, got {v!r}")
    return int(v)


def _num(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{where}: expected a number, got {v!r}")
    return float(v)


def parse_identify_config(d, base_dir="."):
    if not isinstance(d, dict):
        raise ConfigurationError("config: top level must be an object")
    n = _int(_need(d, "n_dofs", "config"), "config.n_dofs")
    if n < 1:
        raise ConfigurationError("config.n_dofs: must be >= 1")
    band = _need(d, "band", "config")
    if not isinstance(band, list) or len(band) != 2:
        raise ConfigurationError("config.band: expected [f_l, f_u]")
    fl, fu = (_num(b, f"config.band[{i}]") for i, b in enumerate(band))
    if not 0 < fl < fu:
        raise ConfigurationError(f"config.band: need 0 < f_l < f_u, got [{fl}, {fu}]")
    m = _int(_need(d, "m", "config"), "config.m")
    if m < 1:
        raise ConfigurationError("config.m: must be >= 1")
    q = _int(d.get("q", 0), "config.q")
    if q not in (0, 1, 2):
        raise ConfigurationError("config.q: must be 0, 1 or 2")
    f0 = d.get("f0")
    if f0 is not None:
        if not isinstance(f0, list) or len(f0) != m:
            raise ConfigurationError(f"config.f0: expected {m} frequencies")
        f0 = [_num(v, f"config.f0[{i}]") for i, v in enumerate(f0)]
        if any(not fl <= v <= fu for v in f0):
            raise ConfigurationError("config.f0: initial frequencies must lie inside the band")
    raw = _need(d, "setups", "config")
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError("config.setups: expected a non-empty list")
    setups = []
    for r, s in enumerate(raw):
        where = f"config.setups[{r}]"
        if not isinstance(s, dict):
            raise ConfigurationError(f"{where}: expected an object")
        data = _need(s, "data", where)
        tau = _need(s, "tau", where)
        if not isinstance(tau, list) or not tau:
            raise ConfigurationError(f"{where}.tau: expected a non-empty list")
        tau = [_int(t, f"{where}.tau[{i}]") for i, t in enumerate(tau)]
        for i, t in enumerate(tau):
            if not 1 <= t <= n:
                raise ConfigurationError(f"{where}.tau[{i}]: DoF {t} outside 1..{n}")
        if len(set(tau)) != len(tau):
            raise ConfigurationError(f"{where}.tau: repeated DoF")
        if len(tau) < m:
            raise ConfigurationError(f"{where}.tau: {len(tau)} channels but m = {m}")
        setups.append(SetupSpec(str(data), tau, s.get("sidecar")))
    em = d.get("em", {})
    if not isinstance(em, dict):
        raise ConfigurationError("config.em: expected an object")
    labels = d.get("dof_labels")
    if labels is not None and len(labels) != n:
        raise ConfigurationError(f"config.dof_labels: expected {n} labels")
    cfg = IdentifyConfig(n, (fl, fu), m, setups, q, f0, dict(em), labels, base_dir)
    try:
        check_coverage(cfg.maps(), n)
    except (ConfigurationError, ValueError) as exc:
        raise ConfigurationError(f"config.setups: {exc}") from None
    return cfg


def load_identify_config(path):
    return parse_identify_config(read_json(path, "config"), os.path.dirname(os.path.abspath(path)))


# -- theta / results -------------------------------------------------------------------


def _cplx(M):
    M = np.asarray(M, dtype=complex)
    return {"re": M.real.tolist(), "im": M.imag.tolist()}


def _uncplx(d):
    return np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"], dtype=float)


def theta_to_json(theta):
    return {
        "n_setups": theta.n_s, "m": theta.m, "n_dofs": theta.n,
        "setups": [{"f": p.f.tolist(), "zeta": p.zeta.tolist(), "S": _cplx(p.S), "Se": float(p.Se)}
                   for p in theta.setups],
        "Phi": theta.Phi.tolist(),
    }


def theta_from_json(d):
    try:
        setups = [SetupParams(np.array(s["f"], float), np.array(s["zeta"], float), _uncplx(s["S"]),
                              float(s["Se"])) for s in d["setups"]]
        return Theta(setups, np.array(d["Phi"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed theta record: {exc}") from None


def mpv_to_json(result, config=None):
    out = {
        "theta": theta_to_json(result.theta_hat),
        "converged": bool(result.converged),
        "stationary": bool(result.stationary),
        "nllf": result.nllf,
        "grad_norm": result.grad_norm,
        "n_iter": int(result.n_iter),
        "elapsed_s": result.elapsed,
    }
    if config is not None:
        out["config"] = config.to_json()
    return out


def posterior_to_json(res):
    """Scalar statistics: per-setup MPV, std and c.o.v.; per-mode shape uncertainty and MAC."""
    th = res.theta_hat
    nx = (th.m + 1) ** 2
    rows = []
    for r in range(th.n_s):
        from .model import encode_setup
        vals = encode_setup(th.setups[r])
        for j in range(nx):
            rows.append({"label": res.labels[r * nx + j], "mpv": float(vals[j]),
                         "std": float(np.sqrt(res.param_var[r, j])),
                         "cov": None if not np.isfinite(res.cov_of_variation[r, j])
                         else float(res.cov_of_variation[r, j])})
    return {
        "setup_params": rows,
        "shape_uncertainty": res.shape_uncertainty.tolist(),
        "mac": None if res.mac is None else res.mac.tolist(),
        "timings_s": dict(res.timings),
    }


def write_cov_block(path, C, labels):
    header = ["label"] + list(labels)
    write_csv(path, header, ([lab] + [float(v) for v in row] for lab, row in zip(labels, C)))


# -- manifest --------------------------------------------------------------------------


@dataclass
class RunManifest:
    subcommand: str
    tool_version: str
    out_dir: str
    config_path: str = None
    input_paths: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)
    seed: int = None
    deterministic: bool = False
    timings_s: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def to_json(self):
        d = asdict(self)
        if self.deterministic:
            # wall-clock numbers differ run to run; keep them out of byte-compared files
            d["timings_s"] = {k: None for k in self.timings_s}
        return d

    def write(self, path=None):
        write_json(path or os.path.join(self.out_dir, "manifest.json"), self.to_json())
