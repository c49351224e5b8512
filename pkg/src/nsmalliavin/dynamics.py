"""
Time integration of the stochastic vorticity equation and its linearisation.

Scheme (exponential Euler-Maruyama), per mode k:

    w+ = exp(-nu |k|^2 dt) * (w + dt B(Kw, w) + sum_j q_j(w) dW_j e_j)

The linearised flow J_{s,t} xi is advanced with the exact derivative of this
map along the same stored increments,

    J+ = exp(-nu |k|^2 dt) * (J + dt B~(w, J) + sum_j (Dq_j(w) J) dW_j e_j),

so finite differences of the discrete flow converge to J at first order in
the perturbation size.
"""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as _rng
from .spectral import SpectralField, get_lattice, linearization_matrix, b_tilde_batch

PATH_MAGIC = b"NSMG"
PATH_VERSION = 1
MATRIX_ROUTE_MAX_DIM = 800


class BlowUp(RuntimeError):
    def __init__(self, step, norm, path_index=None):
        self.step, self.norm, self.path_index = step, norm, path_index
        where = f" (path {path_index})" if path_index is not None else ""
        super().__init__(f"field norm {norm:.3g} exceeded guard at step {step}{where}; reduce dt")

    def __reduce__(self):
        return (BlowUp, (self.step, self.norm, self.path_index))


@dataclass(frozen=True)
class IntegratorSpec:
    dt: float = 1e-3
    grid: int = 64
    nu: float = 0.1
    nonlinear: bool = True
    guard: float = 1e6
    linear_method: str = "auto"
    scheme: str = "exp-euler-maruyama"

    @property
    def lattice(self):
        return get_lattice((self.grid - 1) // 3, self.grid)

    @property
    def decay(self):
        return np.exp(-self.nu * self.lattice.k2 * self.dt)

    def with_dt(self, dt):
        return replace(self, dt=dt)

    def steps_for(self, T):
        n = int(round(T / self.dt))
        if abs(n * self.dt - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"T={T} is not a multiple of dt={self.dt}")
        return n


def _advance(lattice, a, dW, spec, model, decay=None):
    """One step for a field or batch a (..., D) with increments dW (..., d)."""
    if decay is None:
        decay = spec.decay
    q = model.q(lattice, a)
    rhs = np.array(a, dtype=float, copy=True)
    if spec.nonlinear:
        rhs += spec.dt * lattice.nonlinear(a)
    rhs[..., model.indices(lattice)] += q * dW
    return decay * rhs, q


def _guard(a, spec, m, path_index=None):
    n = np.sqrt(np.sum(a * a, axis=-1))
    if not np.all(np.isfinite(n)) or np.any(n > spec.guard):
        bad = int(np.argmax(np.where(np.isfinite(n), n, np.inf)))
        pid = path_index[bad] if path_index is not None and np.ndim(n) else path_index
        raise BlowUp(m, float(np.max(np.where(np.isfinite(n), n, np.inf))), pid)


def step(w, dW, spec, model):
    out, _ = _advance(w.lattice, w.coeffs, np.asarray(dW, dtype=float), spec, model)
    _guard(out, spec, 1)
    return SpectralField(w.lattice, out)


@dataclass(eq=False)
class PathRecord:
    """A realised trajectory and the increments that produced it."""

    dt: float
    steps: int
    seed: int
    path_index: int
    increments: np.ndarray  # (steps, d)
    stride: int
    snapshots: np.ndarray  # (steps // stride + 1, D); snapshots[i] = state at step i*stride
    qvalues: np.ndarray  # (steps, d), q(w_m) used in step m
    spec: IntegratorSpec = field(repr=False)
    model: object = field(repr=False)

    @property
    def lattice(self):
        return self.spec.lattice

    @property
    def T(self):
        return self.steps * self.dt

    def state(self, m):
        """Coefficients of w at step m; re-simulated from the last snapshot if needed."""
        if not 0 <= m <= self.steps:
            raise IndexError(f"step {m} outside [0, {self.steps}]")
        i, r = divmod(m, self.stride)
        a = self.snapshots[i]
        decay = self.spec.decay
        for n in range(i * self.stride, m):
            a, _ = _advance(self.lattice, a, self.increments[n], self.spec, self.model, decay)
        return a

    def trajectory(self, s, t):
        """States at steps s..t inclusive, shape (t - s + 1, D)."""
        if self.stride == 1:
            if not 0 <= s <= t <= self.steps:
                raise IndexError(f"steps [{s}, {t}] outside [0, {self.steps}]")
            return self.snapshots[s : t + 1]
        out = np.empty((t - s + 1, self.lattice.dim))
        a = self.state(s)
        out[0] = a
        decay = self.spec.decay
        for n in range(s, t):
            a, _ = _advance(self.lattice, a, self.increments[n], self.spec, self.model, decay)
            out[n - s + 1] = a
        return out

    def field(self, m):
        return SpectralField(self.lattice, self.state(m))


def simulate(w0, T, spec, model, seed, path_index=0, stride=1, increments=None, purpose="path"):
    steps = spec.steps_for(T)
    lat = spec.lattice
    if w0.lattice.kmax != lat.kmax:
        raise ValueError(f"initial field on {w0.lattice} but integrator uses {lat}")
    if increments is None:
        increments = _rng.brownian_increments(seed, path_index, steps, model.d, spec.dt, purpose)
    increments = np.asarray(increments, dtype=float)
    if increments.shape != (steps, model.d):
        raise ValueError(f"increments shape {increments.shape} != {(steps, model.d)}")
    snaps = np.empty((steps // stride + 1, lat.dim))
    qvals = np.empty((steps, model.d))
    a = np.array(w0.coeffs)
    snaps[0] = a
    decay = spec.decay
    for m in range(steps):
        a, qvals[m] = _advance(lat, a, increments[m], spec, model, decay)
        _guard(a, spec, m + 1, path_index)
        if (m + 1) % stride == 0:
            snaps[(m + 1) // stride] = a
    return PathRecord(spec.dt, steps, seed, path_index, increments, stride, snaps, qvals, spec, model)


def run_ensemble(a0, steps, spec, model, seed, path_ids, purpose="path", observe=None, every=1):
    """Advance a batch of independent paths; path p uses stream (seed, purpose, path_ids[p]).

    `observe(m, a)` is called at m = 0 and every `every` steps with the batch
    state (P, D); its return values are collected in a list.
    """
    lat = spec.lattice
    path_ids = list(path_ids)
    P = len(path_ids)
    a = np.broadcast_to(np.asarray(a0, dtype=float), (P, lat.dim)).copy()
    dW = np.stack([_rng.brownian_increments(seed, i, steps, model.d, spec.dt, purpose) for i in path_ids])
    decay = spec.decay
    out = []
    if observe is not None:
        out.append(observe(0, a))
    for m in range(steps):
        a, _ = _advance(lat, a, dW[:, m], spec, model, decay)
        _guard(a, spec, m + 1, path_ids)
        if observe is not None and (m + 1) % every == 0:
            out.append(observe(m + 1, a))
    return a, out


# -- linearised flow ----------------------------------------------------------

def _use_matrix(spec, lattice):
    if spec.linear_method == "matrix":
        return True
    if spec.linear_method == "fft":
        return False
    return lattice.dim <= MATRIX_ROUTE_MAX_DIM


def linear_step(lattice, a, V, dW, spec, model, L=None, decay=None):
    """Apply the step-m linear map to directions V (n, D), given the base state a."""
    if decay is None:
        decay = spec.decay
    out = np.array(V, dtype=float, copy=True)
    if spec.nonlinear:
        if L is not None:
            out += spec.dt * (V @ L.T)
        else:
            out += spec.dt * b_tilde_batch(lattice, a, V)
    if model.kind != "constant":
        coef = (V @ model.grad(lattice, a).T) * dW  # (n, d)
        out[..., model.indices(lattice)] += coef
    return decay * out


class Linearization:
    """Step maps A_m of the discrete flow along a stored path."""

    def __init__(self, path, s, t):
        self.path = path
        self.s, self.t = s, t
        self.states = path.trajectory(s, t)
        self.lattice = path.lattice
        self.matrix = _use_matrix(path.spec, self.lattice) and path.spec.nonlinear
        self.decay = path.spec.decay

    def apply(self, m, V):
        a = self.states[m - self.s]
        L = linearization_matrix(self.lattice, a) if self.matrix else None
        return linear_step(self.lattice, a, V, self.path.increments[m], self.path.spec,
                           self.path.model, L, self.decay)

    def propagate(self, V, start=None, stop=None):
        start = self.s if start is None else start
        stop = self.t if stop is None else stop
        V = np.atleast_2d(np.asarray(V, dtype=float))
        for m in range(start, stop):
            V = self.apply(m, V)
        return V

    def matrix_at(self, m):
        """Dense A_m (D x D); small lattices only."""
        D = self.lattice.dim
        return self.apply(m, np.eye(D)).T


def linearized_flow(path, s_step, t_step, xi):
    if not 0 <= s_step <= t_step <= path.steps:
        raise IndexError(f"interval [{s_step}, {t_step}] outside path of {path.steps} steps")
    if xi.lattice.kmax != path.lattice.kmax:
        raise ValueError("direction and path live on different lattices")
    V = Linearization(path, s_step, t_step).propagate(xi.coeffs)
    return SpectralField(path.lattice, V[0])


@dataclass
class FDCheck:
    eps: list
    errors: list
    jnorm: float
    order: float

    def rows(self):
        return [{"eps": e, "error": r} for e, r in zip(self.eps, self.errors)]


def _loglog_slope(x, y):
    x, y = np.log(np.asarray(x)), np.log(np.asarray(y))
    return float(np.polyfit(x, y, 1)[0])


def jacobian_fd_check(w0, xi, eps_list, T, spec, model, seed, path_index=0):
    """Compare (Phi_T(w0 + eps xi) - Phi_T(w0)) / eps with J_{0,T} xi on one path."""
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list) or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be positive and decreasing")
    base = simulate(w0, T, spec, model, seed, path_index)
    J = linearized_flow(base, 0, base.steps, xi).coeffs
    end = base.snapshots[-1]
    errors = []
    for e in eps_list:
        pert = simulate(w0 + e * xi, T, spec, model, seed, path_index, increments=base.increments)
        errors.append(float(np.linalg.norm((pert.snapshots[-1] - end) / e - J)))
    if all(err == 0.0 for err in errors):
        order = float("nan")
    else:
        good = [(e, r) for e, r in zip(eps_list, errors) if r > 0]
        order = _loglog_slope(*zip(*good)) if len(good) >= 2 else float("nan")
    return FDCheck(eps_list, errors, float(np.linalg.norm(J)), order)


def self_convergence(w0, T, spec, model, seed, path_index=0, levels=3):
    """Endpoint differences between successive Levy-refined time steps on one path.

    Returns (dts, diffs, order) where diffs[i] = |w_T(dt_i) - w_T(dt_{i+1})|.
    """
    steps = spec.steps_for(T)
    incr = _rng.brownian_increments(seed, path_index, steps, model.d, spec.dt)
    ends, dts = [], []
    s, dt = spec, spec.dt
    for lev in range(levels + 1):
        ends.append(simulate(w0, T, s, model, seed, path_index, increments=incr).snapshots[-1])
        dts.append(dt)
        incr = _rng.refine_increments(incr, dt, seed, path_index, level=lev + 1)
        dt /= 2.0
        s = spec.with_dt(dt)
    diffs = [float(np.linalg.norm(a - b)) for a, b in zip(ends, ends[1:])]
    order = _loglog_slope(dts[:-1], diffs)
    return dts, diffs, order


def energy_balance(w0, T, spec, model, seed, n_paths, path_offset=0):
    """E|w_T|^2 - |w_0|^2 + 2 nu int_0^T E|w|_1^2 ds and sum_j int E q_j^2 ds.

    The two agree (Ito identity; the advection term is energy neutral) up to
    time-discretisation bias and Monte-Carlo error. Returns per-path values of
    both sides.
    """
    lat = spec.lattice
    steps = spec.steps_for(T)
    a0 = np.asarray(w0.coeffs)
    k2 = lat.k2
    acc = {"diss": np.zeros(n_paths), "inj": np.zeros(n_paths)}

    def observe(m, a):
        if m < steps:
            acc["diss"] += spec.dt * np.sum(k2 * a * a, axis=-1)
            acc["inj"] += spec.dt * np.sum(model.q(lat, a) ** 2, axis=-1)

    a, _ = run_ensemble(a0, steps, spec, model, seed, range(path_offset, path_offset + n_paths),
                        purpose="energy", observe=observe)
    lhs = np.sum(a * a, axis=-1) - float(a0 @ a0) + 2.0 * spec.nu * acc["diss"]
    return lhs, acc["inj"]


# -- checkpoint files -----------------------------------------------------

def write_path(fh, path):
    """NSMG checkpoint: header, increments, stride, snapshots, q-values (little-endian)."""
    lat = path.lattice
    fh.write(PATH_MAGIC)
    fh.write(struct.pack("<Iiiii", PATH_VERSION, lat.kmax, lat.grid, lat.dim, path.model.d))
    fh.write(struct.pack("<dQQq", path.dt, path.seed & 0xFFFFFFFFFFFFFFFF, path.path_index, path.steps))
    fh.write(np.ascontiguousarray(path.increments, dtype="<f8").tobytes())
    fh.write(struct.pack("<qq", path.stride, len(path.snapshots)))
    fh.write(np.ascontiguousarray(path.snapshots, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(path.qvalues, dtype="<f8").tobytes())


def save_path(fname, path):
    with open(fname, "wb") as fh:
        write_path(fh, path)


def load_path(fname, spec, model):
    with open(fname, "rb") as fh:
        if fh.read(4) != PATH_MAGIC:
            raise ValueError("not an NSMG checkpoint")
        version, kmax, grid, D, d = struct.unpack("<Iiiii", fh.read(20))
        if version != PATH_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dt, seed, index, steps = struct.unpack("<dQQq", fh.read(32))
        incr = np.frombuffer(fh.read(8 * steps * d), dtype="<f8").reshape(steps, d)
        stride, nsnap = struct.unpack("<qq", fh.read(16))
        snaps = np.frombuffer(fh.read(8 * nsnap * D), dtype="<f8").reshape(nsnap, D)
        qv = np.frombuffer(fh.read(8 * steps * d), dtype="<f8").reshape(steps, d)
    if (spec.grid, model.d) != (grid, d) or not math.isclose(spec.dt, dt):
        raise ValueError("checkpoint does not match the integrator/noise configuration")
    return PathRecord(dt, steps, seed, index, incr.copy(), stride, snaps.copy(), qv.copy(), spec, model)
