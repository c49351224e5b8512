"""Run an experiment from a validated config and persist its outputs.

Outputs of one run (all in the output directory):
    summary.json   flat (depth <= 2) results, no timestamps
    series.csv     tidy long format: series, t, value, ci_lo, ci_hi
    *.nssf/*.nsmg  binary fields, Grams and path checkpoints where relevant
    manifest.json  written last; config hash, code version, timestamps, checksums
"""

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import dynamics as dyn
from . import ergodicity as erg
from . import malliavin as mal
from .spanning import check_condition1, reachable_modes
from .spectral import SpectralField, write_field
from .stats import mean_se

SERIES_HEADER = ["series", "t", "value", "ci_lo", "ci_hi"]
OUT_ENV = "NSMALLIAVIN_OUT"


class CheckFailed(RuntimeError):
    """The experiment ran but its built-in acceptance check did not pass."""


class MissingSeries(RuntimeError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    kind: str
    out_dir: str
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    files: list = field(default_factory=list)  # {"name", "sha256", "bytes"}
    passed: bool = True

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, "manifest.json")
        with open(path) as fh:
            return cls(**json.load(fh))

    def file(self, name):
        return os.path.join(self.out_dir, name)


@dataclass
class Outcome:
    summary: dict
    series: list = field(default_factory=list)  # rows (series, t, value, lo, hi)
    blobs: dict = field(default_factory=dict)  # filename -> bytes
    passed: bool = True


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _clean(v):
    """JSON-safe scalar/list: numpy to python, non-finite floats to None."""
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _rows(name, t, value, lo=None, hi=None):
    t = np.atleast_1d(t)
    value = np.atleast_1d(value)
    lo = np.full(len(t), np.nan) if lo is None else np.atleast_1d(lo)
    hi = np.full(len(t), np.nan) if hi is None else np.atleast_1d(hi)
    return [(name, float(a), float(b), float(c), float(d)) for a, b, c, d in zip(t, value, lo, hi)]


def _initial(lattice, norm, direction=(1, 0)):
    a = np.zeros(lattice.dim)
    if norm > 0:
        a[lattice.mode_index(direction)] = norm
    return SpectralField(lattice, a)


# -- per-kind runners ------------------------------------------------------------

def _run_spanning(cfg, mapper):
    e = cfg.experiment
    ok, _ = check_condition1(cfg.noise["modes"])
    rep = reachable_modes(cfg.noise["modes"], e["radius"], e["max_iter"])
    d = rep.as_dict()
    summary = {"condition1": ok, "is_symmetric": d["is_symmetric"], "is_generator": d["is_generator"],
               "determinant_gcd": d["determinant_gcd"], "nonparallel_unequal_pair": d["nonparallel_unequal_pair"],
               "radius": d["radius"], "covered": d["covered"],
               "coverage_radius_achieved": d["coverage_radius_achieved"], "layer_sizes": d["layer_sizes"],
               "finite_radius_note": "coverage checked on the finite disc only"}
    series = _rows("layer_size", np.arange(len(d["layer_sizes"])), d["layer_sizes"])
    return Outcome(summary, series, passed=ok)


def _run_simulate(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    lat = spec.lattice
    w0 = _initial(lat, e["w0_norm"])
    out = Outcome({"n_paths": e["n_paths"], "steps": spec.steps_for(cfg.physics["T"])})
    finals = []
    for p in range(e["n_paths"]):
        path = dyn.simulate(w0, cfg.physics["T"], spec, model, cfg.run["seed"], p, stride=e["stride"])
        idx = np.arange(0, path.steps + 1, e["every"])
        en = np.array([float(path.state(m) @ path.state(m)) for m in idx])
        out.series += _rows(f"energy_p{p}", idx * spec.dt, en)
        buf = io.BytesIO()
        write_field(buf, path.field(path.steps))
        out.blobs[f"final_p{p}.nssf"] = buf.getvalue()
        buf = io.BytesIO()
        dyn.write_path(buf, path)
        out.blobs[f"path_p{p}.nsmg"] = buf.getvalue()
        finals.append(en[-1])
    out.summary.update({"energy_final_mean": float(np.mean(finals)), "energy_final_max": float(np.max(finals))})
    return out


def _run_energy(cfg, mapper):
    """Ito energy identity with a Richardson step in dt."""
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    T = cfg.physics["T"]
    w0 = _initial(spec.lattice, e["w0_norm"])
    res = {}
    for tag, s in (("dt", spec), ("dt2", spec.with_dt(spec.dt / 2))):
        lhs, inj = dyn.energy_balance(w0, T, s, model, cfg.run["seed"], e["n_paths"])
        res[tag] = mean_se(lhs - inj)
    (m1, s1), (m2, s2) = res["dt"], res["dt2"]
    extrap = 2 * m2 - m1
    se = math.sqrt(4 * s2 ** 2 + s1 ** 2)
    ok = abs(extrap) <= 3 * se
    summary = {"defect_dt": m1, "se_dt": s1, "defect_dt2": m2, "se_dt2": s2,
               "defect_richardson": extrap, "se_richardson": se, "passed": ok}
    series = _rows("energy_defect", [spec.dt, spec.dt / 2, 0.0], [m1, m2, extrap],
                   [m1 - 2 * s1, m2 - 2 * s2, extrap - 2 * se], [m1 + 2 * s1, m2 + 2 * s2, extrap + 2 * se])
    return Outcome(summary, series, passed=ok)


def _run_jacobian(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    lat = spec.lattice
    rng = np.random.default_rng([cfg.run["seed"], 11])
    orders, rows = [], []
    for i in range(e["n_checks"]):
        w0 = SpectralField.random(lat, rng, norm=e["w0_norm"], radius=4)
        xi = SpectralField.random(lat, rng, norm=1.0, radius=4)
        chk = dyn.jacobian_fd_check(w0, xi, e["eps"], cfg.physics["T"], spec, model, cfg.run["seed"], i)
        orders.append(chk.order)
        rows += _rows(f"fd_error_{i}", chk.eps, chk.errors)
    ok = all(abs(o - 1.0) <= 0.2 for o in orders)
    summary = {"orders": orders, "order_min": min(orders), "order_max": max(orders), "passed": ok}
    return Outcome(summary, rows, passed=ok)


def _gram_task(task):
    a0, T, spec, model, seed, index, s_step, t_step, stride, radius, N, alpha, restarts = task
    path = dyn.simulate(SpectralField(spec.lattice, a0), T, spec, model, seed, index, purpose="malliavin")
    g = mal.assemble_gram(path, s_step, t_step, stride, model, radius)
    cm = mal.constrained_min(g, mal.SalphaN(N, alpha), restarts=restarts, seed=index)
    return g.matrix, g.lattice.kmax, g.diagnostics(), cm


def _run_malliavin(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    lat = spec.lattice
    s, t = e["interval"]
    s_step, t_step = spec.steps_for(s) if s > 0 else 0, spec.steps_for(t)
    w0 = _initial(lat, e["w0_norm"])
    tasks = [(w0.coeffs, t, spec, model, cfg.run["seed"], p, s_step, t_step, e["node_stride"],
              cfg.grid["galerkin_radius"], e["N"], e["alpha"], e["restarts"]) for p in range(e["n_paths"])]
    out = Outcome({"n_paths": e["n_paths"], "galerkin_radius": cfg.grid["galerkin_radius"],
                   "interval_steps": [s_step, t_step], "node_stride": e["node_stride"], "alpha": e["alpha"],
                   "N": e["N"]})
    xs, ok = [], True
    for p, (M, kmax, diag, cm) in enumerate(mapper(_gram_task, tasks)):
        glat = mal.get_lattice(kmax)
        ok &= diag["psd"] and diag["asymmetry"] <= 1e-12 * max(1.0, abs(diag["lambda_max"]))
        low = glat.low_mask(e["N"])
        out.summary[f"path_{p}"] = {"lambda_min": diag["lambda_min"], "lambda_max": diag["lambda_max"],
                                    "trace": diag["trace"], "X": cm.value, "xi_low_mass": float(np.linalg.norm(cm.xi[low])),
                                    "method": cm.method, "pgd_agree": cm.agree, "psd": diag["psd"]}
        xs.append(cm.value)
        buf = io.BytesIO()
        for col in M.T:
            write_field(buf, SpectralField(glat, col))
        out.blobs[f"gram_p{p}.nssf"] = buf.getvalue()
        buf = io.BytesIO()
        write_field(buf, SpectralField(glat, cm.xi))
        out.blobs[f"xi_star_p{p}.nssf"] = buf.getvalue()
        out.series += _rows(f"eigenvalues_p{p}", np.arange(len(M)), np.linalg.eigvalsh(M))
    out.summary["aggregate"] = {"X_min": float(np.min(xs)), "X_median": float(np.median(xs)),
                                "X_max": float(np.max(xs)), "all_psd": bool(ok)}
    out.passed = bool(ok)
    return out


def _run_nondegeneracy(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    est = mal.estimate_r(e["eps"], e["alpha"], e["N"], e["R"], e["n_paths"], e["n_initials"], spec, model,
                         cfg.run["seed"], T=cfg.physics["T"], node_stride=e["node_stride"],
                         radius=cfg.grid["galerkin_radius"], restarts=e["restarts"], mapper=mapper)
    summ = est.summary()
    summ["sup_note"] = "supremum over initials approximated by the maximum over sampled initials"
    summ["pgd_disagreements"] = int(sum(not s["agree"] for s in est.samples))
    series = _rows("p_pooled", est.eps, [p[0] for p in est.pooled], [p[1] for p in est.pooled],
                   [p[2] for p in est.pooled])
    series += _rows("p_sup_initial", est.eps, [p[0] for p in est.worst_initial],
                    [p[1] for p in est.worst_initial], [p[2] for p in est.worst_initial])
    return Outcome(summ, series, passed=est.monotone())


def _run_control(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    lat = spec.lattice
    xi = SpectralField.basis(lat, e["xi_mode"][0])
    res = erg.control_probe(_initial(lat, e["w0_norm"]), xi, e["betas"], e["n_cycles"], e["N"],
                            cfg.grid["galerkin_radius"], spec, model, cfg.run["seed"], e["n_paths"],
                            e["node_stride"], mapper=mapper)
    out = Outcome({})
    ok = True
    for r in res:
        tag = f"beta_{r.beta:g}"
        out.summary[tag] = r.summary()
        ok &= r.ceiling_ok
        m, se = mean_se(r.rho_norms)
        out.series += _rows(f"E_rho_{tag}", r.times, m, m - 2 * se, m + 2 * se)
        cm, cse = mean_se(r.cost)
        out.series += _rows(f"cost_{tag}", r.times[:-1], cm, cm - 2 * cse, cm + 2 * cse)
    decays = [r for r in res if r.median_ratio < 1 and r.rate_ci[0] > 0]
    out.summary["decay_found"] = {"any": bool(decays), "betas": [r.beta for r in decays]}
    out.summary["note"] = {"skorokhod": "the anticipating integral of the control is not computed"}
    out.passed = bool(ok and decays)
    return out


def _run_lyapunov(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    w0 = _initial(spec.lattice, e["w0_norm"])
    reps = erg.lyapunov_sweep(w0, cfg.physics["T"], e["n_paths"], spec, model, cfg.run["seed"], e["etas"], e["every"])
    out = Outcome({})
    for r in reps:
        out.summary[f"eta_{r.eta:g}"] = r.summary()
        out.series += _rows(f"functional_eta_{r.eta:g}", r.times, r.mean, r.mean - 2 * r.se, r.mean + 2 * r.se)
    passing = [r.eta for r in reps if r.passed]
    out.summary["result"] = {"passing_eta": passing[0] if passing else None,
                             "note": "largest passing eta in the sweep, not a sharp threshold"}
    out.passed = bool(passing)
    return out


def _run_mixing(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    lat = spec.lattice
    wa, wb = _initial(lat, e["w0_norm_a"]), _initial(lat, e["w0_norm_b"])
    T, seed = cfg.physics["T"], cfg.run["seed"]
    est = erg.mixing_rate(wa, wb, e["observables"], T, e["n_paths"], spec, model, seed, e["every"], e["n_boot"])
    out = Outcome({})
    for i, o in enumerate(est.observables):
        out.series += _rows(f"diff_{o}", est.times, est.diff[i], est.ci_lo[i], est.ci_hi[i])
    for k, v in est.summary().items():
        out.summary[k] = v
    ok = any(s and g[0] > 0 for s, g in zip(est.signal, est.gamma_ci))
    if e["null_control"]:
        null = erg.mixing_rate(wa, wa, e["observables"], T, e["n_paths"], spec, model, seed, e["every"], e["n_boot"])
        out.summary["null_control"] = {o: bool(s) for o, s in zip(null.observables, null.signal)}
        for i, o in enumerate(null.observables):
            out.series += _rows(f"null_diff_{o}", null.times, null.diff[i], null.ci_lo[i], null.ci_hi[i])
        ok = ok and not any(null.signal)
    out.passed = bool(ok)
    return out


def _run_irreducibility(cfg, mapper):
    e, spec, model = cfg.experiment, cfg.integrator(), cfg.noise_model()
    est = erg.irreducibility_probe(e["C"], e["gamma"], cfg.physics["T"], e["n_initials"], e["n_paths"], spec, model,
                                   cfg.run["seed"], e["every"])
    out = Outcome(est.summary())
    out.series += _rows("min_p", est.times, est.min_p, est.min_lo, est.ci_hi.min(axis=0))
    for i in range(est.p_hat.shape[0]):
        out.series += _rows(f"p_initial_{i}", est.times, est.p_hat[i], est.ci_lo[i], est.ci_hi[i])
    out.passed = est.first_positive_time() is not None
    return out


RUNNERS = {
    "spanning": _run_spanning, "simulate": _run_simulate, "energy-check": _run_energy,
    "jacobian-check": _run_jacobian, "malliavin": _run_malliavin, "nondegeneracy": _run_nondegeneracy,
    "control-probe": _run_control, "lyapunov": _run_lyapunov, "mixing": _run_mixing,
    "irreducibility": _run_irreducibility,
}


# -- persistence -----------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path, data):
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
        fh.write(data)


def series_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    w.writerow(SERIES_HEADER)
    for r in rows:
        w.writerow([r[0]] + [repr(float(x)) if math.isfinite(x) else "" for x in r[1:]])
    return buf.getvalue()


def read_series(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vals = [float(row[k]) if row[k] != "" else float("nan") for k in SERIES_HEADER[1:]]
            out.setdefault(row["series"], []).append(vals)
    return {k: np.array(v) for k, v in out.items()}


def output_dir(cfg):
    return os.environ.get(OUT_ENV) or cfg.run["out"]


def _mapper(workers):
    if workers <= 1:
        return map, None
    pool = ProcessPoolExecutor(max_workers=workers)
    return (lambda fn, items: pool.map(fn, items, chunksize=1)), pool


def run_experiment(config, figures=False):
    """Dispatch on the experiment kind and write outputs; returns the manifest.

    Raises CheckFailed (after writing everything) if the built-in check fails.
    Module errors propagate; a failure.json record is left in the output
    directory and no manifest is written.
    """
    out_dir = output_dir(config)
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path):
        os.remove(manifest_path)
    man = RunManifest(config.hash, config.kind, out_dir, started=_now())
    mapper, pool = _mapper(config.run["workers"])
    try:
        outcome = RUNNERS[config.kind](config, mapper)
    except Exception as exc:
        _write(os.path.join(out_dir, "failure.json"),
               json.dumps({"config_hash": config.hash, "kind": config.kind, "error": type(exc).__name__,
                           "message": str(exc)}, indent=2, sort_keys=True))
        raise
    finally:
        if pool is not None:
            pool.shutdown()
    fail = os.path.join(out_dir, "failure.json")
    if os.path.exists(fail):
        os.remove(fail)

    summary = {"config_hash": config.hash, "kind": config.kind, "code_version": __version__,
               "seed": config.run["seed"], "passed": bool(outcome.passed)}
    summary.update(outcome.summary)
    names = []
    _write(os.path.join(out_dir, "summary.json"), json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    names.append("summary.json")
    _write(os.path.join(out_dir, "config.ini"), config.source)
    names.append("config.ini")
    for name, data in sorted(outcome.blobs.items()):
        _write(os.path.join(out_dir, name), data)
        names.append(name)
    if outcome.series:
        names += export_plotdata(man, outcome.series)
    if figures and outcome.series:
        from . import plotting
        names += plotting.render_run(out_dir, read_series(os.path.join(out_dir, "series.csv")), config.kind)
    man.passed = bool(outcome.passed)
    man.files = [{"name": n, "sha256": _sha256(os.path.join(out_dir, n)),
                  "bytes": os.path.getsize(os.path.join(out_dir, n))} for n in names]
    man.finished = _now()
    _write(manifest_path, man.to_json() + "\n")
    if not outcome.passed:
        raise CheckFailed(f"{config.kind}: built-in check failed; see {os.path.join(out_dir, 'summary.json')}")
    return man


def export_plotdata(manifest, rows=None):
    """Write series.csv (tidy long form) and one CSV per series under plotdata/.

    With rows=None the series are read back from the run's series.csv.
    Returns file names relative to the run directory.
    """
    if rows is None:
        if isinstance(manifest, str):
            manifest = RunManifest.load(manifest)
        if not any(f["name"] == "series.csv" for f in manifest.files):
            raise MissingSeries(f"run {manifest.out_dir!r} lists no series")
        data = read_series(manifest.file("series.csv"))
        rows = [(k, *v) for k, arr in data.items() for v in arr]
    if not rows:
        raise MissingSeries("no series to export")
    out_dir = manifest.out_dir
    names = []
    _write(os.path.join(out_dir, "series.csv"), series_csv(rows))
    names.append("series.csv")
    os.makedirs(os.path.join(out_dir, "plotdata"), exist_ok=True)
    groups = {}
    for r in rows:
        groups.setdefault(r[0], []).append(r)
    for k, rs in groups.items():
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in k)
        name = os.path.join("plotdata", f"{safe}.csv")
        _write(os.path.join(out_dir, name), series_csv(rs))
        names.append(name)
    return names
