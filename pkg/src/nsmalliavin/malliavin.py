"""
Malliavin Gram on a Galerkin space, its constrained minimum over
S_{alpha,N} = {|xi| = 1, |P_N xi| >= alpha}, and the non-degeneracy
probability P(X < eps).

The Gram over [s, t] is assembled from forward solves of the linearised flow
started at quadrature nodes r_m,

    M = sum_m wt_m sum_j q_j(w_{r_m})^2 g_{j,m} g_{j,m}^T,   g_{j,m} = J_{r_m,t} e_j,

with left-endpoint weights wt_m = (node spacing) * dt.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .dynamics import Linearization, simulate
from .spectral import SpectralField, get_lattice
from .stats import wilson


class NonConvergence(RuntimeError):
    pass


def galerkin_lattice(lattice, radius):
    if radius is None or radius >= lattice.kmax:
        return lattice
    return get_lattice(int(radius))


@dataclass
class MalliavinGram:
    matrix: np.ndarray
    lattice: object
    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple
    path_id: int = 0
    node_vectors: np.ndarray | None = field(default=None, repr=False)  # (nodes, d, D)
    node_q2: np.ndarray | None = field(default=None, repr=False)  # (nodes, d)

    @property
    def dim(self):
        return self.matrix.shape[0]

    def eigenvalues(self):
        return np.linalg.eigvalsh(self.matrix)

    def diagnostics(self):
        M = self.matrix
        ev = self.eigenvalues()
        nrm = float(np.max(np.abs(ev))) if ev.size else 0.0
        return {
            "asymmetry": float(np.max(np.abs(M - M.T))) if M.size else 0.0,
            "lambda_min": float(ev[0]),
            "lambda_max": float(ev[-1]),
            "trace": float(np.trace(M)),
            "psd": bool(ev[0] >= -1e-10 * nrm),
            "rank_bound": int(len(self.nodes) * (self.node_q2.shape[1] if self.node_q2 is not None else 0)),
        }


def _nodes(s, t, stride, dt):
    nodes = np.arange(s, t, stride)
    weights = np.minimum(stride, t - nodes) * dt
    return nodes, weights


def assemble_gram(path, s_step, t_step, node_stride=10, model=None, radius=None, keep_nodes=False):
    """Gram of the noise-to-state map over steps [s_step, t_step] of a stored path."""
    if not 0 <= s_step < t_step <= path.steps:
        raise ValueError(f"need 0 <= s < t <= {path.steps}, got [{s_step}, {t_step}]")
    if node_stride < 1:
        raise ValueError("node_stride must be >= 1")
    model = path.model if model is None else model
    lat = path.lattice
    glat = galerkin_lattice(lat, radius)
    nodes, weights = _nodes(s_step, t_step, node_stride, path.dt)
    idx = model.indices(lat)
    d = model.d
    lin = Linearization(path, s_step, t_step)
    V = np.zeros((len(nodes) * d, lat.dim))
    n_active = 0
    node_set = {int(m): i for i, m in enumerate(nodes)}
    for m in range(s_step, t_step):
        i = node_set.get(m)
        if i is not None:
            V[n_active + np.arange(d), idx] = 1.0
            n_active += d
        V[:n_active] = lin.apply(m, V[:n_active])
    G = lat.restrict(V, glat) if glat is not lat else V
    q2 = path.qvalues[nodes] ** 2
    wq = (weights[:, None] * q2).ravel()
    M = (G.T * wq) @ G
    M = 0.5 * (M + M.T)
    gram = MalliavinGram(M, glat, nodes, weights, (s_step, t_step), path.path_index)
    gram.node_q2 = q2
    if keep_nodes:
        gram.node_vectors = G.reshape(len(nodes), d, glat.dim)
    return gram


def assemble_gram_fundamental(path, s_step, t_step, node_stride=1, model=None):
    """Gram via J_{r,t} = Phi_t Phi_r^{-1} with Phi the fundamental matrix from s.

    Needs the full lattice (no Galerkin cut) and is meant for tiny lattices.
    """
    model = path.model if model is None else model
    lat = path.lattice
    D = lat.dim
    nodes, weights = _nodes(s_step, t_step, node_stride, path.dt)
    lin = Linearization(path, s_step, t_step)
    rows = np.eye(D)  # rows[i] = J_{s,m} e_i, i.e. rows = Phi_m^T
    phis = {}
    node_set = set(int(m) for m in nodes)
    for m in range(s_step, t_step):
        if m in node_set:
            phis[m] = rows.T.copy()
        rows = lin.apply(m, rows)
    phi_t = rows.T
    idx = model.indices(lat)
    E = np.zeros((D, model.d))
    E[idx, np.arange(model.d)] = 1.0
    G = np.stack([(phi_t @ np.linalg.solve(phis[int(m)], E)).T for m in nodes])  # (nodes, d, D)
    q2 = path.qvalues[nodes] ** 2
    M = np.einsum("m,mj,mja,mjb->ab", weights, q2, G, G)
    return MalliavinGram(0.5 * (M + M.T), lat, nodes, weights, (s_step, t_step), path.path_index, G, q2)


def quadratic_form(M, xi):
    M = M.matrix if isinstance(M, MalliavinGram) else np.asarray(M)
    x = xi.coeffs if isinstance(xi, SpectralField) else np.asarray(xi, dtype=float)
    if x.shape != (M.shape[0],):
        raise ValueError(f"dimension mismatch: Gram is {M.shape[0]}, vector is {x.shape}")
    return float(x @ M @ x)


def quadratic_form_from_nodes(gram, xi):
    """sum_m wt_m sum_j q_j^2 <g_{j,m}, xi>^2 straight from the node data."""
    x = xi.coeffs if isinstance(xi, SpectralField) else np.asarray(xi, dtype=float)
    proj = gram.node_vectors @ x  # (nodes, d)
    return float(np.sum(gram.weights[:, None] * gram.node_q2 * proj ** 2))


# -- constrained minimum ----------------------------------------------------

@dataclass(frozen=True)
class SalphaN:
    N: int
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0,1]")
        if self.N < 1:
            raise ValueError("N must be >= 1")

    def mask(self, lattice):
        return lattice.low_mask(self.N)


@dataclass
class ConstrainedMin:
    value: float
    xi: np.ndarray
    method: str
    mu: float
    lower_bound: float
    low_mass: float
    pgd_value: float = float("nan")
    agree: bool = True


def _bottom(A):
    w, v = sla.eigh(A, subset_by_index=[0, 0])
    return w[0], v[:, 0]


def _project_feasible(Y, mask, alpha, rng):
    """Nearest points of {|x| = 1, |P x| >= alpha} to the columns of Y."""
    YL = np.where(mask[:, None], Y, 0.0)
    YH = Y - YL
    nL = np.linalg.norm(YL, axis=0)
    nH = np.linalg.norm(YH, axis=0)
    tiny = 1e-300
    if np.any(nL < tiny):
        fill = np.where(mask[:, None], rng.standard_normal(Y.shape), 0.0)
        YL = np.where(nL < tiny, fill, YL)
        nL = np.linalg.norm(YL, axis=0)
    h = np.hypot(nL, nH)
    a = np.where(h > 0, nL / np.where(h > 0, h, 1.0), 1.0)
    a = np.maximum(a, alpha)
    b = np.sqrt(np.clip(1.0 - a * a, 0.0, None))
    if np.any((nH < tiny) & (b > 0)):
        fill = np.where(mask[:, None], 0.0, rng.standard_normal(Y.shape))
        YH = np.where((nH < tiny) & (b > 0), fill, YH)
        nH = np.linalg.norm(YH, axis=0)
    return a * YL / nL + b * YH / np.where(nH > 0, nH, 1.0)


def projected_gradient_min(M, mask, alpha, restarts=16, iters=400, seed=0):
    rng = np.random.default_rng(seed)
    D = M.shape[0]
    lmax = max(float(np.linalg.eigvalsh(M)[-1]), 1e-300)
    X = _project_feasible(rng.standard_normal((D, restarts)), mask, alpha, rng)
    for _ in range(iters):
        X = _project_feasible(X - (M @ X) / lmax, mask, alpha, rng)
    vals = np.einsum("ir,ij,jr->r", X, M, X)
    best = int(np.argmin(vals))
    return float(vals[best]), X[:, best]


def _circle_solution(M, P, u1, u2, alpha):
    """Unit x in span{u1, u2} with |P x| = alpha minimising x^T M x."""
    u2 = u2 - (u1 @ u2) * u1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-12:
        return None
    u2 /= n2
    a, b, c = u1 @ P @ u1, u1 @ P @ u2, u2 @ P @ u2
    # a cos^2 + 2b cos sin + c sin^2 = alpha^2, in double-angle form
    A, B, C = (a - c) / 2.0, b, (a + c) / 2.0 - alpha ** 2
    R = np.hypot(A, B)
    if R < abs(C) or R == 0.0:
        return None
    phi = np.arctan2(B, A)
    best = None
    for s in (1, -1):
        th = (phi + s * np.arccos(-C / R)) / 2.0
        x = np.cos(th) * u1 + np.sin(th) * u2
        v = x @ M @ x
        if best is None or v < best[0]:
            best = (v, x)
    return best[1]


def constrained_min(M, region, lattice=None, restarts=16, pgd_iters=400, seed=0, rtol=1e-6):
    """Minimise xi^T M xi over |xi| = 1, |P_N xi| >= alpha.

    Returns the KKT/bisection solution unless projected-gradient restarts find
    a smaller value. Raises NonConvergence if they beat it by more than rtol.
    """
    gram = M if isinstance(M, MalliavinGram) else None
    A = np.asarray(gram.matrix if gram else M, dtype=float)
    if isinstance(region, SalphaN):
        lattice = gram.lattice if gram else lattice
        mask = region.mask(lattice)
        alpha = region.alpha
    else:
        mask, alpha = region
        mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("the low-mode projection is empty on this space")
    P = np.diag(mask.astype(float))
    scale = max(float(np.max(np.abs(A))), 1e-300)

    lam, vec = np.linalg.eigh(A)
    near = lam <= lam[0] + 1e-12 * max(abs(lam[-1]), 1e-300)
    VE = vec[:, near]
    U, sv, Wt = np.linalg.svd(VE[mask], full_matrices=False)
    if sv[0] >= alpha:
        xi = VE @ Wt[0]
        res = ConstrainedMin(float(xi @ A @ xi), xi, "eigen", 0.0, float(lam[0]), float(sv[0]))
    else:
        def g(mu):
            _, v = _bottom(A - mu * P)
            return float(np.sum(v[mask] ** 2)) - alpha ** 2

        hi = scale
        while g(hi) < 0:
            hi *= 4.0
            if hi > 1e30 * scale:
                raise NonConvergence("could not bracket the KKT multiplier")
        lo = 0.0
        mu = brentq(g, lo, hi, xtol=1e-14 * hi, rtol=1e-15, maxiter=500)
        # tight bracket around mu: bottom vector jumps across an eigenvalue crossing
        d = max(1e-12 * hi, 1e-300)
        _, v_lo = _bottom(A - max(mu - d, 0.0) * P)
        lmu, v_hi = _bottom(A - (mu + d) * P)
        xi = v_hi
        if abs(np.sqrt(np.sum(v_hi[mask] ** 2)) - alpha) > 1e-9:
            x = _circle_solution(A, P, v_hi, v_lo, alpha)
            if x is not None:
                xi = x
        lbound = float(_bottom(A - mu * P)[0] + mu * alpha ** 2)
        res = ConstrainedMin(float(xi @ A @ xi), xi, "kkt", float(mu), lbound,
                             float(np.linalg.norm(xi[mask])))

    if restarts:
        pv, px = projected_gradient_min(A, mask, alpha, restarts, pgd_iters, seed)
        res.pgd_value = pv
        tol = max(rtol * abs(res.value), 1e-12 * scale)
        res.agree = abs(pv - res.value) <= tol
        if pv < res.value - tol:
            raise NonConvergence(
                f"projected gradient found {pv:.6g} below the KKT value {res.value:.6g}"
            )
        if pv < res.value:
            res.value, res.xi, res.method = pv, px, res.method + "+pgd"
    return res


# -- non-degeneracy probability -----------------------------------------------

def sample_initials(lattice, radius, n_initials, seed, model=None, smooth_radius=4):
    """Initial fields with |w0| <= radius: zero, a forced-mode field, then random on the sphere."""
    rng = np.random.default_rng([int(seed), 7919])
    out = []
    if n_initials >= 1:
        out.append(np.zeros(lattice.dim))
    if n_initials >= 2:
        a = np.zeros(lattice.dim)
        k = model.modes[0] if model is not None else (1, 0)
        a[lattice.mode_index(k)] = radius
        out.append(a)
    while len(out) < n_initials:
        f = SpectralField.random(lattice, rng, norm=radius, radius=smooth_radius)
        out.append(np.array(f.coeffs))
    return np.array(out[:n_initials])


def x_sample(task):
    """X = inf over S_{alpha,N} of <M_{0,T} xi, xi> for one (initial, path) pair."""
    (a0, T, spec, model, seed, index, node_stride, radius, alpha, N, restarts) = task
    lat = spec.lattice
    path = simulate(SpectralField(lat, a0), T, spec, model, seed, index, purpose="nondegeneracy")
    gram = assemble_gram(path, 0, path.steps, node_stride, model, radius)
    cm = constrained_min(gram, SalphaN(N, alpha), restarts=restarts, seed=index)
    diag = gram.diagnostics()
    return {"X": cm.value, "lambda_min": diag["lambda_min"], "trace": diag["trace"],
            "low_mass": cm.low_mass, "agree": cm.agree, "psd": diag["psd"]}


@dataclass
class NondegeneracyEstimate:
    eps: list
    alpha: float
    N: int
    R: float
    n_paths: int
    n_initials: int
    X: np.ndarray  # (n_initials, n_paths)
    pooled: list  # per eps: (p, lo, hi)
    worst_initial: list  # per eps: (p, lo, hi) of the initial with the largest estimate
    samples: list = field(default_factory=list, repr=False)

    def monotone(self):
        """Estimates non-increasing as eps decreases, up to CI overlap."""
        order = np.argsort(self.eps)[::-1]
        ps = [self.pooled[i] for i in order]
        return all(b[0] <= a[2] for a, b in zip(ps, ps[1:]))

    def summary(self):
        return {
            "eps": list(self.eps),
            "p_pooled": [p[0] for p in self.pooled],
            "ci_lo": [p[1] for p in self.pooled],
            "ci_hi": [p[2] for p in self.pooled],
            "p_sup_initial": [p[0] for p in self.worst_initial],
            "n_samples": int(self.X.size),
            "X_median": float(np.median(self.X)),
            "X_min": float(np.min(self.X)),
            "monotone": self.monotone(),
        }


def estimate_r(eps_grid, alpha, N, R, n_paths, n_initials, spec, model, seed=0, T=1.0,
               node_stride=10, radius=8, restarts=16, mapper=map):
    """Monte-Carlo estimate of sup_{|w0| <= R} P(X < eps) on a grid of eps.

    The supremum is approximated by the maximum over the sampled initials.
    `mapper` distributes per-sample tasks (builtin map by default).
    """
    eps_grid = [float(e) for e in eps_grid]
    if any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps grid must be decreasing")
    region = SalphaN(int(N), float(alpha))
    lat = spec.lattice
    inits = sample_initials(lat, R, n_initials, seed, model)
    tasks = [
        (inits[i], T, spec, model, seed, i * n_paths + p, node_stride, radius, region.alpha, region.N, restarts)
        for i in range(n_initials) for p in range(n_paths)
    ]
    samples = list(mapper(x_sample, tasks))
    X = np.array([s["X"] for s in samples]).reshape(n_initials, n_paths)
    pooled, worst = [], []
    for e in eps_grid:
        hits = X < e
        k = int(hits.sum())
        pooled.append((k / X.size,) + wilson(k, X.size))
        per = hits.sum(axis=1)
        i = int(np.argmax(per))
        worst.append((per[i] / n_paths,) + wilson(per[i], n_paths))
    return NondegeneracyEstimate(eps_grid, region.alpha, region.N, float(R), n_paths, n_initials,
                                 X, pooled, worst, samples)
