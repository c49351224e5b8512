"""
Ergodicity diagnostics: exponential-moment (Lyapunov) bands, the controlled
residual recursion on alternating unit intervals, the low-mode resolvent
inequality, two-ensemble mixing rates and a small-ball irreducibility probe.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Linearization, run_ensemble, simulate
from .malliavin import SalphaN, assemble_gram, constrained_min, galerkin_lattice, sample_initials
from .spectral import SpectralField
from .stats import loglinear_fit, mean_se, percentile_ci, wilson


# -- Lyapunov -------------------------------------------------------------------

@dataclass
class LyapunovReport:
    eta: float
    T: float
    n_paths: int
    times: np.ndarray
    mean: np.ndarray  # E exp{eta(|w_t|^2 + nu int |w|_1^2 - d aleph^2 t)}
    se: np.ndarray
    bound: float  # exp{eta |w0|^2}
    sup_mean: float  # E exp{eta sup_t (...)}, diagnostic only
    sup_se: float
    passed: bool
    worst_excess: float  # max_t (mean - bound) / (bound + 3 se), <= 0 on a pass

    def summary(self):
        return {
            "eta": self.eta, "T": self.T, "n_paths": self.n_paths, "bound": self.bound,
            "mean_final": float(self.mean[-1]), "se_final": float(self.se[-1]),
            "mean_max": float(self.mean.max()), "sup_mean": self.sup_mean, "sup_se": self.sup_se,
            "passed": self.passed, "worst_excess": self.worst_excess,
        }


def lyapunov_check(w0, eta, T, n_paths, spec, model, seed=0, every=10, path_offset=0):
    """Exponential supermartingale band, checked at every recorded time.

    The functional is exp{eta(|w_t|^2 + nu int_0^t |w|_1^2 - d aleph^2 t)}.
    Pass iff its ensemble mean is <= exp{eta |w0|^2} + 3 SE at every time.
    """
    lat = spec.lattice
    a0 = w0.coeffs if isinstance(w0, SpectralField) else np.asarray(w0, dtype=float)
    steps = spec.steps_for(T)
    k2 = lat.k2
    c = model.d * model.aleph ** 2
    acc = {"int": np.zeros(n_paths), "prev": None, "sup": None}

    def observe(m, a):
        e0 = np.sum(a * a, axis=-1)
        # left-endpoint integral of |w|_1^2, refreshed every step
        if acc["prev"] is not None:
            acc["int"] += spec.dt * acc["prev"]
        acc["prev"] = np.sum(k2 * a * a, axis=-1)
        x = eta * (e0 + spec.nu * acc["int"] - c * m * spec.dt)
        acc["sup"] = x if acc["sup"] is None else np.maximum(acc["sup"], x)
        return np.exp(x) if m % every == 0 else None

    _, out = run_ensemble(a0, steps, spec, model, seed, range(path_offset, path_offset + n_paths),
                          "lyapunov", observe, 1)
    idx = [m for m in range(steps + 1) if m % every == 0]
    vals = np.array([out[m] for m in idx])  # (times, paths)
    mean, se = mean_se(vals, axis=1)
    bound = float(np.exp(eta * np.sum(a0 * a0)))
    excess = (mean - bound) / (bound + 3.0 * se)
    sup = np.exp(acc["sup"])
    sm, ss = mean_se(sup)
    return LyapunovReport(float(eta), float(T), n_paths, np.array(idx) * spec.dt, mean, se, bound,
                          float(sm), float(ss), bool(np.all(mean <= bound + 3.0 * se)),
                          float(excess.max()))


def lyapunov_sweep(w0, T, n_paths, spec, model, seed=0, etas=(0.1, 0.05, 0.02, 0.01, 0.005), every=10):
    """Sweep eta downward, stopping at the first passing value."""
    reports = []
    for eta in etas:
        r = lyapunov_check(w0, eta, T, n_paths, spec, model, seed, every)
        reports.append(r)
        if r.passed:
            break
    return reports


def moment_decay_profile(norms, eta, T, n_paths, spec, model, seed=0, every=50, direction=(1, 0)):
    """Slope of log E exp{eta |w_t|^2} against |w0|^2 at each recorded t.

    The second exponential-moment bound predicts the slope shrinks roughly
    like eta e^{-nu t}.
    """
    lat = spec.lattice
    steps = spec.steps_for(T)
    rows = []
    for r in norms:
        a0 = np.zeros(lat.dim)
        a0[lat.mode_index(direction)] = r
        _, out = run_ensemble(a0, steps, spec, model, seed, range(n_paths), "moment-decay",
                              lambda m, a: np.exp(eta * np.sum(a * a, axis=-1)).mean(), every)
        rows.append(np.log(out))
    L = np.array(rows)  # (norms, times)
    x = np.asarray(norms, dtype=float) ** 2
    slopes = np.polyfit(x, L, 1)[0]
    times = np.arange(L.shape[1]) * every * spec.dt
    return times, slopes


# -- control probe --------------------------------------------------------------

@dataclass
class ControlProbeResult:
    beta: float
    n_cycles: int
    n_paths: int
    times: np.ndarray  # 0, 2, 4, ...
    rho_norms: np.ndarray = field(repr=False)  # (paths, cycles + 1)
    cost: np.ndarray = field(repr=False)  # (paths, cycles) |v|^2_{L^2}
    ceiling: np.ndarray = field(repr=False)  # (paths, cycles) |J rho|^2 / beta
    rate: float = float("nan")
    rate_ci: tuple = (float("nan"), float("nan"))
    median_ratio: float = float("nan")

    @property
    def mean_rho(self):
        return self.rho_norms.mean(axis=0)

    def moments(self, p):
        return (self.rho_norms ** p).mean(axis=0)

    def percentiles(self, q=(5, 50, 95)):
        return np.percentile(self.rho_norms, q, axis=0)

    @property
    def ceiling_ok(self):
        return bool(np.all(self.cost <= self.ceiling * (1 + 1e-10) + 1e-300))

    def summary(self):
        m, se = mean_se(self.rho_norms)
        return {
            "beta": self.beta, "n_cycles": self.n_cycles, "n_paths": self.n_paths,
            "rate": self.rate, "rate_lo": self.rate_ci[0], "rate_hi": self.rate_ci[1],
            "median_ratio": self.median_ratio, "mean_rho_final": float(m[-1]),
            "se_rho_final": float(se[-1]), "cost_mean": float(self.cost.mean()),
            "cost_max": float(self.cost.max()), "ceiling_ok": self.ceiling_ok,
            **{f"moment_{p}_final": float(self.moments(p)[-1]) for p in (1, 2, 4, 8)},
        }


def _control_path(task):
    """One path: residual norms and control costs for every beta."""
    (a0, xi, betas, n_cycles, radius, spec, model, seed, index, node_stride, control) = task
    lat = spec.lattice
    unit = spec.steps_for(1.0)
    path = simulate(SpectralField(lat, a0), 2.0 * n_cycles, spec, model, seed, index, purpose="control")
    glat = galerkin_lattice(lat, radius)
    nb = len(betas)
    rho = np.tile(np.asarray(xi, dtype=float), (nb, 1))
    norms = np.empty((nb, n_cycles + 1))
    cost = np.zeros((nb, n_cycles))
    ceil = np.zeros((nb, n_cycles))
    norms[:, 0] = np.linalg.norm(rho, axis=1)
    for n in range(n_cycles):
        s = 2 * n * unit
        y = Linearization(path, s, s + unit).propagate(rho)  # J_{2n,2n+1} rho
        if control:
            M = assemble_gram(path, s, s + unit, node_stride, model, radius).matrix
            lam, U = np.linalg.eigh(M)
            lam = np.clip(lam, 0.0, None)
            yg = lat.restrict(y, glat) if glat is not lat else y
            c = yg @ U  # eigen-coordinates, (nb, DG)
            for b, beta in enumerate(betas):
                res = c[b] / (lam + beta)  # (M + beta)^{-1} J rho
                cost[b, n] = float(np.sum(lam * res * res))
                ceil[b, n] = float(np.sum(c[b] ** 2)) / beta
                new = U @ (beta * res)
                if glat is lat:
                    y[b] = new
                else:
                    y[b] = y[b] - lat.embed(lat.restrict(y[b], glat), glat) + lat.embed(new, glat)
        rho = Linearization(path, s + unit, s + 2 * unit).propagate(y)
        norms[:, n + 1] = np.linalg.norm(rho, axis=1)
    return norms, cost, ceil


def _rate_fit(times, rho_norms, n_boot, rng):
    """Geometric rate of E|rho| by OLS on the log mean; percentile bootstrap over paths."""
    def fit(R):
        m = R.mean(axis=0)
        if np.any(m <= 0):
            return float("nan")
        return loglinear_fit(times, m)[0]

    rate = fit(rho_norms)
    n = rho_norms.shape[0]
    boots = [fit(rho_norms[rng.integers(0, n, n)]) for _ in range(n_boot)]
    return rate, percentile_ci(boots)


def control_probe(w0, xi, betas, n_cycles, N, trunc_radius, spec, model, seed=0, n_paths=1,
                  node_stride=1, control=True, n_boot=500, mapper=map, path_offset=0):
    """Controlled residual rho_{2n+2} = J_{2n+1,2n+2} beta (M + beta)^{-1} J_{2n,2n+1} rho_{2n}.

    rho_0 = xi with |xi| = 1. Grams live on the Galerkin space of radius
    trunc_radius and are shared across the beta sweep; modes outside it pass
    through uncontrolled. `control=False` drops the resolvent (plain transport).
    N is recorded for the low-mode projection used in reporting.
    """
    lat = spec.lattice
    x = xi.coeffs if isinstance(xi, SpectralField) else np.asarray(xi, dtype=float)
    if abs(np.linalg.norm(x) - 1.0) > 1e-12:
        raise ValueError("xi must be a unit vector")
    betas = [float(b) for b in np.atleast_1d(betas)]
    if any(b <= 0 for b in betas):
        raise ValueError("beta must be positive")
    a0 = w0.coeffs if isinstance(w0, SpectralField) else np.asarray(w0, dtype=float)
    tasks = [(a0, x, betas, n_cycles, trunc_radius, spec, model, seed, path_offset + p, node_stride, control)
             for p in range(n_paths)]
    out = list(mapper(_control_path, tasks))
    norms = np.stack([o[0] for o in out], axis=1)  # (betas, paths, cycles+1)
    cost = np.stack([o[1] for o in out], axis=1)
    ceil = np.stack([o[2] for o in out], axis=1)
    times = 2.0 * np.arange(n_cycles + 1)
    rng = np.random.default_rng([int(seed), 31337])
    results = []
    for b, beta in enumerate(betas):
        R = norms[b]
        ratio = R[:, 1:] / np.where(R[:, :-1] > 0, R[:, :-1], np.nan)
        rate, ci = _rate_fit(times, R, n_boot, rng)
        results.append(ControlProbeResult(beta, n_cycles, n_paths, times, R, cost[b], ceil[b],
                                          rate, ci, float(np.nanmedian(ratio))))
    return results


def resolvent_contraction(M, beta):
    """|beta (M + beta I)^{-1}|_2 for a Gram M, on the clipped spectrum the control step applies.

    Assembled Grams can carry eigenvalues of order -1e-16 |M| from round-off;
    those are set to 0 exactly as in the control recursion.
    """
    lam = np.clip(np.linalg.eigvalsh(np.asarray(M)), 0.0, None)
    return float(np.max(np.abs(beta / (lam + beta))))


def low_mode_contraction_check(M, beta, alpha, N, epsilon, lattice=None, n_probes=1000, seed=0, X=None):
    """beta |P_N (beta + M)^{-1} phi| <= |phi| (alpha v sqrt(beta/eps)) on {X >= eps}, <= |phi| otherwise.

    `M` is a MalliavinGram or a (matrix, low mask) pair. Returns (ok, values).
    """
    if hasattr(M, "matrix"):
        A, mask = M.matrix, M.lattice.low_mask(N)
        region = SalphaN(N, alpha)
    else:
        A, mask = np.asarray(M[0], dtype=float), np.asarray(M[1], dtype=bool)
        region = (mask, alpha)
    if X is None:
        X = constrained_min(M if hasattr(M, "matrix") else A, region, lattice, restarts=0).value
    on_event = X >= epsilon
    D = A.shape[0]
    phi = np.random.default_rng(seed).standard_normal((n_probes, D))
    sol = np.linalg.solve(A + beta * np.eye(D), phi.T).T
    lhs = beta * np.linalg.norm(sol[:, mask], axis=1)
    pn = np.linalg.norm(phi, axis=1)
    factor = max(alpha, np.sqrt(beta / epsilon)) if on_event else 1.0
    rhs = pn * factor
    ok = bool(np.all(lhs <= rhs * (1 + 1e-10)))
    return ok, {"X": float(X), "on_event": bool(on_event), "factor": float(factor),
                "max_ratio": float(np.max(lhs / rhs)), "lhs": lhs, "rhs": rhs}


# -- mixing ----------------------------------------------------------------------

def make_observable(spec_str, lattice):
    """Built-in observables: 'mode:k1,k2', 'expnorm:eta', 'ball:radius,width'."""
    kind, _, arg = spec_str.partition(":")
    if kind == "mode":
        k = tuple(int(v) for v in arg.split(","))
        i = lattice.mode_index(k)
        return lambda a: a[..., i]
    if kind == "expnorm":
        eta = float(arg)
        return lambda a: np.exp(-eta * np.sum(a * a, axis=-1))
    if kind == "ball":
        r, h = (float(v) for v in arg.split(","))
        return lambda a: 0.5 * (1.0 - np.tanh((np.sqrt(np.sum(a * a, axis=-1)) - r) / h))
    raise ValueError(f"unknown observable {spec_str!r}")


@dataclass
class MixingEstimate:
    observables: list
    times: np.ndarray
    diff: np.ndarray  # (obs, times) |mean_a - mean_b|
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    gamma: np.ndarray  # per observable, nan without signal
    gamma_ci: list
    window: list  # per observable (first, last) time index used in the fit
    signal: list  # per observable: bool

    def summary(self):
        out = {}
        for i, o in enumerate(self.observables):
            out[o] = {"gamma": float(self.gamma[i]), "gamma_lo": self.gamma_ci[i][0],
                      "gamma_hi": self.gamma_ci[i][1], "signal": self.signal[i],
                      "window_points": int(self.window[i][1] - self.window[i][0] + 1) if self.signal[i] else 0,
                      "diff_initial": float(self.diff[i, 0]), "diff_final": float(self.diff[i, -1])}
        return out


def _signal_window(t, diff, se, z):
    """Initial contiguous run of t > 0 where the difference clears z standard errors."""
    idx = [i for i in range(len(t)) if t[i] > 0]
    run = []
    for i in idx:
        if diff[i] > z * se[i] and diff[i] > 0:
            run.append(i)
        elif run:
            break
        else:
            return None
    return (run[0], run[-1]) if len(run) >= 3 else None


def mixing_rate(w0_a, w0_b, observables, T, n_paths, spec, model, seed=0, every=100, n_boot=400,
                z=2.5, same_seeds=False):
    """Decay of |E Phi(w_t^a) - E Phi(w_t^b)| from two independently seeded ensembles."""
    lat = spec.lattice
    steps = spec.steps_for(T)
    fns = [make_observable(o, lat) for o in observables]

    def observe(m, a):
        return np.stack([f(a) for f in fns])  # (obs, paths)

    def run(a0, purpose):
        a0 = a0.coeffs if isinstance(a0, SpectralField) else np.asarray(a0, dtype=float)
        _, out = run_ensemble(a0, steps, spec, model, seed, range(n_paths), purpose, observe, every)
        return np.stack(out, axis=1)  # (obs, times, paths)

    A = run(w0_a, "mixing-a")
    B = run(w0_b, "mixing-a" if same_seeds else "mixing-b")
    times = np.arange(A.shape[1]) * every * spec.dt
    ma, sa = mean_se(A, axis=2)
    mb, sb = mean_se(B, axis=2)
    diff = np.abs(ma - mb)
    se = np.sqrt(sa ** 2 + sb ** 2)
    rng = np.random.default_rng([int(seed), 4242])
    boot = np.empty((n_boot,) + diff.shape)
    for r in range(n_boot):
        ia = rng.integers(0, n_paths, n_paths)
        ib = rng.integers(0, n_paths, n_paths)
        boot[r] = np.abs(A[:, :, ia].mean(axis=2) - B[:, :, ib].mean(axis=2))
    lo, hi = np.percentile(boot, 2.5, axis=0), np.percentile(boot, 97.5, axis=0)
    gammas, gcis, windows, signals = [], [], [], []
    for i in range(len(fns)):
        w = _signal_window(times, diff[i], se[i], z)
        if w is None:
            gammas.append(float("nan"))
            gcis.append((float("nan"), float("nan")))
            windows.append((0, 0))
            signals.append(False)
            continue
        sl = slice(w[0], w[1] + 1)
        g = loglinear_fit(times[sl], diff[i, sl])[0]
        bg = [loglinear_fit(times[sl], np.maximum(boot[r, i, sl], 1e-300))[0] for r in range(n_boot)]
        gammas.append(g)
        gcis.append(percentile_ci(bg))
        windows.append(w)
        signals.append(True)
    return MixingEstimate(list(observables), times, diff, se, lo, hi, np.array(gammas), gcis, windows, signals)


# -- irreducibility -------------------------------------------------------------

@dataclass
class IrreducibilityEstimate:
    C_radius: float
    gamma_ball: float
    times: np.ndarray
    p_hat: np.ndarray  # (initials, times)
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_paths: int

    @property
    def min_p(self):
        return self.p_hat.min(axis=0)

    @property
    def min_lo(self):
        return self.ci_lo.min(axis=0)

    def first_positive_time(self):
        ok = np.nonzero(self.min_lo > 0)[0]
        return float(self.times[ok[0]]) if ok.size else None

    def summary(self):
        T = self.first_positive_time()
        i = int(np.argmax(self.min_lo)) if T is None else int(np.nonzero(self.min_lo > 0)[0][0])
        return {"C_radius": self.C_radius, "gamma_ball": self.gamma_ball, "n_paths": self.n_paths,
                "n_initials": int(self.p_hat.shape[0]), "first_positive_T": T,
                "min_p_at_T": float(self.min_p[i]), "min_lo_at_T": float(self.min_lo[i]),
                "T_reported": float(self.times[i])}


def irreducibility_probe(C_radius, gamma_ball, T, n_initials, n_paths, spec, model, seed=0, every=100,
                         initials=None):
    """P(|w_t| <= gamma) per sampled initial with |w0| <= C, at times every*dt up to T."""
    lat = spec.lattice
    steps = spec.steps_for(T)
    if initials is None:
        initials = sample_initials(lat, C_radius, n_initials, seed, model)
    P, LO, HI = [], [], []
    for i, a0 in enumerate(initials):
        _, out = run_ensemble(a0, steps, spec, model, seed, range(i * n_paths, (i + 1) * n_paths),
                              "irreducibility", lambda m, a: np.sum(a * a, axis=-1) <= gamma_ball ** 2, every)
        hits = np.array(out).sum(axis=1)
        P.append(hits / n_paths)
        ci = np.array([wilson(h, n_paths) for h in hits])
        LO.append(ci[:, 0])
        HI.append(ci[:, 1])
    times = np.arange(len(P[0])) * every * spec.dt
    return IrreducibilityEstimate(float(C_radius), float(gamma_ball), times, np.array(P), np.array(LO),
                                  np.array(HI), n_paths)
