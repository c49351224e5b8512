"""Experiment configuration: sectioned key = value text, validated in one pass."""

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field

from .dynamics import IntegratorSpec
from .noise import KINDS as NOISE_KINDS
from .noise import PROFILES, NoiseModel, make_profile
from .spanning import check_condition1

EXPERIMENT_KINDS = (
    "simulate", "energy-check", "jacobian-check", "spanning", "malliavin", "nondegeneracy",
    "control-probe", "lyapunov", "mixing", "irreducibility",
)

PAPER_MODES = ((1, 0), (-1, 0), (1, 1), (-1, -1))


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# -- value parsers (raise ValueError with a short reason) ------------------------

def _int(s):
    return int(s.strip())


def _float(s):
    return float(s.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return [float(v) for v in re.split(r"[,\s]+", s.strip()) if v]


def _strs(s):
    return [v.strip() for v in s.split(";") if v.strip()]


def _modes(s):
    out = []
    for part in s.split(";"):
        part = part.strip()
        if not part:
            continue
        a, b = (int(v) for v in part.split(","))
        out.append((a, b))
    return out


def _pair(s):
    v = _floats(s)
    if len(v) != 2:
        raise ValueError("expected two numbers")
    return tuple(v)


SCHEMA = {
    "grid": {"size": (_int, 64), "galerkin_radius": (_int, 8)},
    "physics": {
        "nu": (_float, 0.1), "dt": (_float, 1e-3), "T": (_float, 1.0),
        "nonlinear": (_bool, True), "blowup_guard": (_float, 1e6),
    },
    "noise": {
        "modes": (_modes, list(PAPER_MODES)), "kind": (str.strip, "spectral_coordinate"),
        "profile": (str.strip, "sigmoid"), "params": (_floats, [0.25, 0.25]),
        "aleph": (_float, 0.5), "probes": (_modes, None), "condition1_required": (_bool, True),
    },
    "run": {"seed": (_int, 0), "out": (str.strip, "runs/out"), "workers": (_int, 1)},
}

EXPERIMENT_KEYS = {
    "simulate": {"n_paths": (_int, 1), "w0_norm": (_float, 1.0), "stride": (_int, 10), "every": (_int, 10)},
    "energy-check": {"n_paths": (_int, 200), "w0_norm": (_float, 1.0)},
    "jacobian-check": {"n_checks": (_int, 5), "eps": (_floats, [1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4]),
                       "w0_norm": (_float, 1.0)},
    "spanning": {"radius": (_int, 6), "max_iter": (_int, 50)},
    "malliavin": {"n_paths": (_int, 2), "interval": (_pair, (0.0, 1.0)), "node_stride": (_int, 10),
                  "alpha": (_float, 0.1), "N": (_int, 4), "w0_norm": (_float, 1.0), "restarts": (_int, 16)},
    "nondegeneracy": {"n_paths": (_int, 20), "n_initials": (_int, 10), "eps": (_floats, [1e-2, 1e-4, 1e-6]),
                      "alpha": (_float, 0.1), "N": (_int, 4), "R": (_float, 1.0), "node_stride": (_int, 1),
                      "restarts": (_int, 16)},
    "control-probe": {"n_paths": (_int, 100), "betas": (_floats, [1e-4, 1e-3, 1e-2, 1e-1, 1.0]),
                      "n_cycles": (_int, 6), "N": (_int, 4), "xi_mode": (_modes, [(1, 0)]),
                      "w0_norm": (_float, 0.0), "node_stride": (_int, 1)},
    "lyapunov": {"n_paths": (_int, 1000), "etas": (_floats, [0.1, 0.05, 0.02, 0.01, 0.005]),
                 "w0_norm": (_float, 1.0), "every": (_int, 10)},
    "mixing": {"n_paths": (_int, 500), "w0_norm_a": (_float, 0.0), "w0_norm_b": (_float, 2.0),
               "observables": (_strs, ["mode:1,0", "expnorm:0.1", "ball:2,0.5"]), "every": (_int, 100),
               "null_control": (_bool, True), "n_boot": (_int, 400)},
    "irreducibility": {"n_paths": (_int, 1000), "n_initials": (_int, 10), "C": (_float, 2.0),
                       "gamma": (_float, 0.5), "every": (_int, 100)},
}


@dataclass
class ExperimentConfig:
    grid: dict
    physics: dict
    noise: dict
    experiment: dict
    run: dict
    hash: str = ""
    source: str = field(default="", repr=False)

    @property
    def kind(self):
        return self.experiment["kind"]

    def integrator(self):
        p = self.physics
        return IntegratorSpec(dt=p["dt"], grid=self.grid["size"], nu=p["nu"], nonlinear=p["nonlinear"],
                              guard=p["blowup_guard"])

    def noise_model(self):
        n = self.noise
        return NoiseModel(n["modes"], n["kind"], make_profile(n["profile"], n["params"]), n["aleph"],
                          n["probes"])

    def canonical(self):
        def norm(v):
            if isinstance(v, (list, tuple)):
                return [norm(x) for x in v]
            return v
        return {s: {k: norm(v) for k, v in sorted(getattr(self, s).items())}
                for s in ("grid", "physics", "noise", "experiment", "run")}

    def with_overrides(self, **kw):
        """Copy with run/experiment overrides (seed, out, workers, n_paths, ...); rehashed."""
        cfg = ExperimentConfig(dict(self.grid), dict(self.physics), dict(self.noise),
                               dict(self.experiment), dict(self.run), source=self.source)
        errors = []
        for k, v in kw.items():
            if v is None:
                continue
            for sec in (cfg.run, cfg.experiment, cfg.grid):
                if k in sec and k != "kind":
                    sec[k] = v
                    break
            else:
                errors.append(f"option {k!r} does not apply to experiment kind {cfg.kind!r}")
        errors += _semantic({s: getattr(cfg, s) for s in ("grid", "physics", "noise", "experiment", "run")})
        if errors:
            raise ConfigError(errors)
        cfg.hash = config_hash(cfg)
        return cfg


def config_hash(cfg):
    # output location does not change results, so it stays out of the hash
    c = cfg.canonical()
    c["run"] = {k: v for k, v in c["run"].items() if k not in ("out", "workers")}
    return hashlib.sha256(json.dumps(c, sort_keys=True).encode()).hexdigest()


def _key_lines(text):
    lines, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section:
            lines[(section, m.group(1).strip())] = i
    return lines


def parse_config(text, kind=None):
    """Parse and validate; raises ConfigError listing every problem found.

    `kind` supplies the experiment kind when the text has none (CLI subcommand).
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError([f"line {e.lineno}: key outside any [section]"]) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError([f"line {e.lineno}: {e.message.splitlines()[0]}"]) from None
    except configparser.ParsingError as e:
        raise ConfigError([f"line {ln}: cannot parse {line.strip()!r}" for ln, line in e.errors]) from None

    where = _key_lines(text)
    errors = []
    out = {}

    def at(sec, key):
        ln = where.get((sec, key))
        return f"line {ln}: " if ln else ""

    for sec in parser.sections():
        if sec not in SCHEMA and sec != "experiment":
            errors.append(f"unknown section [{sec}]")

    for sec, keys in SCHEMA.items():
        vals = {}
        given = parser[sec] if parser.has_section(sec) else {}
        for k in given:
            if k not in keys:
                errors.append(f"{at(sec, k)}unknown key {k!r} in [{sec}]")
        for k, (conv, default) in keys.items():
            if k in given:
                try:
                    vals[k] = conv(given[k])
                except (ValueError, TypeError) as e:
                    errors.append(f"{at(sec, k)}[{sec}] {k}: {e}")
                    vals[k] = default
            else:
                vals[k] = default
        out[sec] = vals

    exp = parser["experiment"] if parser.has_section("experiment") else {}
    ekind = exp.get("kind", "").strip() if exp else ""
    if kind is not None:
        if ekind and ekind != kind:
            errors.append(f"{at('experiment', 'kind')}experiment kind {ekind!r} does not match command {kind!r}")
        ekind = kind
    if not ekind:
        errors.append("[experiment] kind is required")
    elif ekind not in EXPERIMENT_KINDS:
        errors.append(f"{at('experiment', 'kind')}unknown experiment kind {ekind!r}")
    evals = {"kind": ekind}
    if ekind in EXPERIMENT_KEYS:
        keys = EXPERIMENT_KEYS[ekind]
        for k in exp:
            if k != "kind" and k not in keys:
                errors.append(f"{at('experiment', k)}unknown key {k!r} for experiment kind {ekind!r}")
        for k, (conv, default) in keys.items():
            if k in exp:
                try:
                    evals[k] = conv(exp[k])
                except (ValueError, TypeError) as e:
                    errors.append(f"{at('experiment', k)}[experiment] {k}: {e}")
                    evals[k] = default
            else:
                evals[k] = default
    out["experiment"] = evals

    # semantic checks run on whatever parsed, so one pass reports everything
    errors.extend(_semantic(out))
    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(out["grid"], out["physics"], out["noise"], out["experiment"], out["run"], source=text)
    cfg.hash = config_hash(cfg)
    return cfg


def _semantic(c):
    err = []
    g, p, n, e, r = c["grid"], c["physics"], c["noise"], c["experiment"], c["run"]
    if g["size"] < 4:
        err.append("grid size must be at least 4")
    K = (g["size"] - 1) // 3
    if g["galerkin_radius"] < 1:
        err.append("galerkin_radius must be >= 1")
    if p["nu"] < 0:
        err.append("nu must be >= 0")
    if p["dt"] <= 0:
        err.append("dt must be positive")
    if p["T"] <= 0:
        err.append("T must be positive")
    elif p["dt"] > 0 and abs(round(p["T"] / p["dt"]) * p["dt"] - p["T"]) > 1e-9 * max(1.0, p["T"]):
        err.append(f"T={p['T']} is not a multiple of dt={p['dt']}")
    if p["blowup_guard"] <= 0:
        err.append("blowup_guard must be positive")

    modes = n["modes"]
    if not modes:
        err.append("noise modes must be nonempty")
    if (0, 0) in modes:
        err.append("the zero mode cannot be forced")
    if len(set(modes)) != len(modes):
        err.append("noise modes must be distinct")
    out_of_range = [m for m in modes if max(abs(m[0]), abs(m[1])) > K]
    if out_of_range:
        err.append(f"noise modes {out_of_range} outside the lattice |k|_inf <= {K} of grid {g['size']}")
    if n["kind"] not in NOISE_KINDS:
        err.append(f"noise kind must be one of {list(NOISE_KINDS)}")
    if n["probes"] is not None and len(n["probes"]) != len(modes):
        err.append("need one probe mode per forced mode")
    if n["aleph"] <= 0:
        err.append("aleph must be positive")
    if n["profile"] not in PROFILES:
        err.append(f"unknown profile {n['profile']!r}; choose from {sorted(PROFILES)}")
    else:
        try:
            prof = make_profile(n["profile"], n["params"])
        except TypeError:
            err.append(f"profile {n['profile']!r} takes a different number of params")
        else:
            for key in ("sup", "d1", "d2") if n["kind"] != "constant" else ("sup",):
                b = prof.bounds.get(key)
                if b is not None and b > n["aleph"] * (1 + 1e-12):
                    err.append(f"profile bound {key}={b:.4g} exceeds aleph={n['aleph']}")
            if n["kind"] == "norm_based":
                b = prof.bounds.get("growth")
                if b is None or b > n["aleph"] * (1 + 1e-12):
                    err.append("norm_based noise needs |f'(x)| <= aleph min(|x|, 1); "
                               f"profile {n['profile']!r} does not certify it")
    if n["condition1_required"] and modes and (0, 0) not in modes:
        ok, rep = check_condition1(modes)
        if not rep.is_symmetric:
            err.append("spanning condition: mode set is not symmetric (need Z0 = -Z0)")
        if not rep.is_generator:
            err.append(f"spanning condition: mode set does not generate Z^2 (determinant gcd {rep.determinant_gcd})")
        if rep.nonparallel_unequal_pair is None:
            err.append("spanning condition: no non-parallel pair of modes with distinct lengths")

    if r["seed"] < 0 or r["seed"] >= 2 ** 64:
        err.append("seed must be an unsigned 64-bit integer")
    if r["workers"] < 1:
        err.append("workers must be >= 1")

    if "alpha" in e and not 0.0 < e["alpha"] <= 1.0:
        err.append("alpha must lie in (0,1]")
    for k in ("n_paths", "n_initials", "n_cycles", "n_checks", "node_stride", "N", "radius", "every",
              "stride", "max_iter", "n_boot"):
        if k in e and e[k] < 1:
            err.append(f"{k} must be >= 1")
    if "restarts" in e and e["restarts"] < 0:
        err.append("restarts must be >= 0")
    if "eps" in e:
        eps = e["eps"]
        if not eps or any(x <= 0 for x in eps):
            err.append("eps values must be positive")
        elif any(b >= a for a, b in zip(eps, eps[1:])):
            err.append("eps grid must be strictly decreasing")
    for k in ("betas", "etas"):
        if k in e and (not e[k] or any(x <= 0 for x in e[k])):
            err.append(f"{k} must be positive")
    for k in ("R", "C", "gamma"):
        if k in e and e[k] <= 0:
            err.append(f"{k} must be positive")
    for k in ("w0_norm", "w0_norm_a", "w0_norm_b"):
        if k in e and e[k] < 0:
            err.append(f"{k} must be >= 0")
    if "interval" in e:
        s, t = e["interval"]
        if not 0 <= s < t:
            err.append("interval must satisfy 0 <= s < t")
    if "xi_mode" in e:
        if len(e["xi_mode"]) != 1:
            err.append("xi_mode must be a single mode")
        elif max(abs(e["xi_mode"][0][0]), abs(e["xi_mode"][0][1])) > K or e["xi_mode"][0] == (0, 0):
            err.append("xi_mode must be a nonzero mode on the lattice")
    if "observables" in e:
        for o in e["observables"]:
            if o.partition(":")[0] not in ("mode", "expnorm", "ball"):
                err.append(f"unknown observable {o!r}")
    return err
