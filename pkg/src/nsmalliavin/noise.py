"""
State-dependent noise coefficients q_k(w) on a finite forced mode set.

The forcing is sum_j q_j(w) dW_j e_j with e_j the orthonormal basis of
`spectral`. Three families are supported:

* ``constant``:            q_j(w) = f_j(0) (the profile is evaluated at zero)
* ``spectral_coordinate``: q_j(w) = f_j(<w, e_{i(j)}>) for a probe mode i(j)
* ``norm_based``:          q_j(w) = f_j(||w||)
"""

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("constant", "spectral_coordinate", "norm_based")


class BoundViolation(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    """Scalar profile f with first and second derivatives.

    `bounds` holds analytic constants (sup|f|, inf|f|, sup|f'|, sup|f''|,
    sup|f'(x)|/min(|x|,1)); None where no closed form is shipped.
    """

    name: str
    params: tuple
    f: callable = field(repr=False)
    df: callable = field(repr=False)
    d2f: callable = field(repr=False)
    bounds: dict = field(default_factory=dict, repr=False)

    def __reduce__(self):
        # the callables are closures; rebuild from the factory instead
        return (make_profile, (self.name, self.params))


def constant_profile(c):
    c = float(c)
    return Profile(
        "constant",
        (c,),
        lambda x: np.full(np.shape(x), c),
        lambda x: np.zeros(np.shape(x)),
        lambda x: np.zeros(np.shape(x)),
        {"sup": abs(c), "inf": abs(c), "d1": 0.0, "d2": 0.0, "growth": 0.0},
    )


def sigmoid_profile(c0, c1):
    """f(x) = c0 + c1 / (1 + x^2)."""
    c0, c1 = float(c0), float(c1)
    lo, hi = sorted((c0, c0 + c1))
    inf = 0.0 if lo < 0 < hi else min(abs(lo), abs(hi))
    return Profile(
        "sigmoid",
        (c0, c1),
        lambda x: c0 + c1 / (1.0 + np.square(x)),
        lambda x: -2.0 * c1 * x / (1.0 + np.square(x)) ** 2,
        lambda x: c1 * (6.0 * np.square(x) - 2.0) / (1.0 + np.square(x)) ** 3,
        # max |x|/(1+x^2)^2 = 3 sqrt(3) / 16 at x = 1/sqrt(3); max |6x^2-2|/(1+x^2)^3 = 2 at 0
        {"sup": max(abs(lo), abs(hi)), "inf": inf, "d1": abs(c1) * 3.0 * math.sqrt(3.0) / 8.0,
         "d2": 2.0 * abs(c1), "growth": None},
    )


def bump_profile(c0, c1):
    """f(x) = c0 + c1 x^2 exp(-x^2); f'(0) = 0 so |f'(x)| <= 2|c1| min(|x|, 1)."""
    c0, c1 = float(c0), float(c1)
    top = c0 + c1 / math.e
    lo, hi = sorted((c0, top))
    inf = 0.0 if lo < 0 < hi else min(abs(lo), abs(hi))
    return Profile(
        "bump",
        (c0, c1),
        lambda x: c0 + c1 * np.square(x) * np.exp(-np.square(x)),
        lambda x: 2.0 * c1 * x * (1.0 - np.square(x)) * np.exp(-np.square(x)),
        lambda x: c1 * (2.0 - 10.0 * np.square(x) + 4.0 * np.square(x) ** 2) * np.exp(-np.square(x)),
        {"sup": max(abs(lo), abs(hi)), "inf": inf, "d1": 2.0 * abs(c1), "d2": 2.0 * abs(c1),
         "growth": 2.0 * abs(c1)},
    )


PROFILES = {"constant": constant_profile, "sigmoid": sigmoid_profile, "bump": bump_profile}


def make_profile(name, params):
    try:
        factory = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    return factory(*params)


class NoiseModel:
    """Forced modes Z0 (ordered; defines the canonical basis of R^d) plus q-family."""

    def __init__(self, modes, kind="constant", profile=None, aleph=1.0, probes=None):
        modes = tuple((int(a), int(b)) for a, b in modes)
        if not modes:
            raise ValueError("the forced mode set must be nonempty")
        if len(set(modes)) != len(modes):
            raise ValueError("forced modes must be distinct")
        if (0, 0) in modes:
            raise ValueError("the zero mode cannot be forced")
        if kind not in KINDS:
            raise ValueError(f"unknown noise kind {kind!r}")
        if profile is None:
            profile = constant_profile(aleph)
        if isinstance(profile, Profile):
            profile = (profile,) * len(modes)
        profile = tuple(profile)
        if len(profile) != len(modes):
            raise ValueError("need one profile per forced mode")
        if probes is None:
            probes = modes
        probes = tuple((int(a), int(b)) for a, b in probes)
        if len(probes) != len(modes):
            raise ValueError("need one probe mode per forced mode")
        self.modes = modes
        self.kind = kind
        self.profiles = profile
        self.aleph = float(aleph)
        self.probes = probes
        self._cache = {}

    @property
    def d(self):
        return len(self.modes)

    def __repr__(self):
        return f"NoiseModel(modes={self.modes}, kind={self.kind!r}, aleph={self.aleph})"

    def indices(self, lattice):
        key = (lattice.kmax, "modes")
        if key not in self._cache:
            self._cache[key] = np.array([lattice.mode_index(k) for k in self.modes])
            self._cache[(lattice.kmax, "probes")] = np.array([lattice.mode_index(k) for k in self.probes])
        return self._cache[key]

    def _probe_indices(self, lattice):
        self.indices(lattice)
        return self._cache[(lattice.kmax, "probes")]

    def _argument(self, lattice, a):
        """Scalar argument of each profile, shape (..., d)."""
        a = np.asarray(a, dtype=float)
        if self.kind == "constant":
            return np.zeros(a.shape[:-1] + (self.d,))
        if self.kind == "spectral_coordinate":
            return a[..., self._probe_indices(lattice)]
        r = np.sqrt(np.sum(a * a, axis=-1))
        return np.repeat(r[..., None], self.d, axis=-1)

    def _apply(self, which, x):
        out = np.empty_like(x)
        for j, prof in enumerate(self.profiles):
            out[..., j] = getattr(prof, which)(x[..., j])
        return out

    # -- raw array versions (batched, unchecked) ---------------------------

    def q(self, lattice, a):
        return self._apply("f", self._argument(lattice, a))

    def grad(self, lattice, a):
        """Rows of Dq_j(w) as vectors in coefficient space, shape (..., d, D)."""
        a = np.asarray(a, dtype=float)
        G = np.zeros(a.shape[:-1] + (self.d, lattice.dim))
        if self.kind == "constant":
            return G
        x = self._argument(lattice, a)
        fp = self._apply("df", x)
        if self.kind == "spectral_coordinate":
            for j, p in enumerate(self._probe_indices(lattice)):
                G[..., j, p] = fp[..., j]
            return G
        r = x[..., 0]
        safe = np.where(r > 0, r, 1.0)
        unit = np.where((r > 0)[..., None], a / safe[..., None], 0.0)
        return fp[..., :, None] * unit[..., None, :]

    def dq(self, lattice, a, v):
        """Dq_j(w) v, shape (..., d) for v (..., D)."""
        return np.einsum("...jk,...k->...j", self.grad(lattice, a), np.asarray(v, dtype=float))

    def d2q(self, lattice, a, u, v):
        """D^2 q_j(w)(u, v), shape (d,); single field only."""
        a, u, v = (np.asarray(t, dtype=float) for t in (a, u, v))
        if self.kind == "constant":
            return np.zeros(self.d)
        x = self._argument(lattice, a)
        fpp = self._apply("d2f", x)
        if self.kind == "spectral_coordinate":
            p = self._probe_indices(lattice)
            return fpp * u[p] * v[p]
        r = x[0]
        if r == 0.0:
            # second derivative of f(|w|) at 0 with f'(0) = 0
            return fpp * float(u @ v)
        fp = self._apply("df", x)
        wu, wv = float(a @ u) / r, float(a @ v) / r
        return fpp * wu * wv + fp * (float(u @ v) * r * r - float(a @ u) * float(a @ v)) / r ** 3


# -- public operations on SpectralField ------------------------------------

def q_eval(model, w):
    q = model.q(w.lattice, w.coeffs)
    bad = (np.abs(q) > model.aleph * (1.0 + 1e-12)) | (q == 0.0)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise BoundViolation(
            f"|q_{model.modes[j]}(w)| = {abs(q[j]):.6g} outside (0, aleph={model.aleph}]"
        )
    return q


def dq_apply(model, w, v):
    if w.lattice != v.lattice:
        from .spectral import LatticeMismatch
        raise LatticeMismatch(f"{w.lattice} vs {v.lattice}")
    return model.dq(w.lattice, w.coeffs, v.coeffs)


def apply_Q(model, w, z):
    from .spectral import SpectralField

    z = np.asarray(z, dtype=float)
    c = np.zeros(w.lattice.dim)
    np.add.at(c, model.indices(w.lattice), model.q(w.lattice, w.coeffs) * z)
    return SpectralField(w.lattice, c)


def apply_Qstar(model, w, xi):
    return model.q(w.lattice, w.coeffs) * xi.coeffs[model.indices(w.lattice)]


@dataclass
class ValidationReport:
    passed: bool
    aleph: float
    max_abs_q: float
    min_abs_q: float
    max_dq_ratio: float
    max_d2q_ratio: float
    max_growth_ratio: float = 0.0
    failures: list = field(default_factory=list)

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def validate_condition2(model, sample_fields, n_directions=8, seed=0, scalar_grid=None):
    """Probe |q| in (0, aleph], |Dq v| <= aleph |v|, |D^2 q(u, v)| <= aleph |u||v|.

    Besides the fields, each profile is scanned on a scalar grid (which is
    where a norm-based profile's growth condition |f'(x)| <= aleph min(|x|, 1)
    is checked). Failures carry a witness.
    """
    rng = np.random.default_rng(seed)
    aleph = model.aleph
    tol = aleph * 1e-9
    failures = []
    qs, dq_ratio, d2_ratio, growth = [], 0.0, 0.0, 0.0
    for w in sample_fields:
        lat = w.lattice
        q = model.q(lat, w.coeffs)
        qs.append(np.abs(q))
        for _ in range(n_directions):
            u = rng.standard_normal(lat.dim)
            v = rng.standard_normal(lat.dim)
            # include the direction of w itself, where norm-based terms peak
            if w.norm() > 0 and _ == 0:
                v = w.coeffs.copy()
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            r1 = np.max(np.abs(model.dq(lat, w.coeffs, v))) / nv
            r2 = np.max(np.abs(model.d2q(lat, w.coeffs, u, v))) / (nu * nv)
            dq_ratio, d2_ratio = max(dq_ratio, r1), max(d2_ratio, r2)
    qs = np.array(qs) if qs else np.zeros((0, model.d))
    if qs.size:
        if qs.max() > aleph + tol:
            failures.append(f"max |q| = {qs.max():.6g} exceeds aleph")
        if qs.min() <= 0.0:
            failures.append("q vanishes on a probe field")
    if dq_ratio > aleph + tol:
        failures.append(f"|Dq v|/|v| = {dq_ratio:.6g} exceeds aleph")
    if d2_ratio > aleph + tol:
        failures.append(f"|D2q(u,v)|/(|u||v|) = {d2_ratio:.6g} exceeds aleph")

    xs = np.linspace(-6.0, 6.0, 2401) if scalar_grid is None else np.asarray(scalar_grid, dtype=float)
    if model.kind == "norm_based":
        xs = np.abs(xs)
    for j, prof in enumerate(model.profiles):
        x = np.zeros(1) if model.kind == "constant" else xs
        f, fp, fpp = prof.f(x), prof.df(x), prof.d2f(x)
        if np.any(np.abs(f) > aleph + tol) or np.any(f == 0.0):
            i = int(np.argmax(np.abs(f) > aleph + tol) if np.any(np.abs(f) > aleph + tol) else np.argmax(f == 0.0))
            failures.append(f"profile {j}: |f({x[i]:.6g})| = {abs(f[i]):.6g} outside (0, aleph]")
        if model.kind == "constant":
            continue
        if np.any(np.abs(fp) > aleph + tol):
            i = int(np.argmax(np.abs(fp)))
            failures.append(f"profile {j}: |f'({x[i]:.6g})| = {abs(fp[i]):.6g} exceeds aleph")
        if np.any(np.abs(fpp) > aleph + tol):
            i = int(np.argmax(np.abs(fpp)))
            failures.append(f"profile {j}: |f''({x[i]:.6g})| = {abs(fpp[i]):.6g} exceeds aleph")
        if model.kind == "norm_based":
            cap = aleph * np.minimum(np.abs(x), 1.0)
            excess = np.abs(fp) - cap
            growth = max(growth, float(np.max(np.abs(fp) / np.maximum(np.minimum(np.abs(x), 1.0), 1e-300))))
            if np.any(excess > tol):
                i = int(np.argmax(excess))
                failures.append(
                    f"profile {j}: |f'(x)| = {abs(fp[i]):.6g} > aleph min(|x|,1) at witness x = {x[i]:.6g}"
                )
    return ValidationReport(
        passed=not failures,
        aleph=aleph,
        max_abs_q=float(qs.max()) if qs.size else 0.0,
        min_abs_q=float(qs.min()) if qs.size else 0.0,
        max_dq_ratio=float(dq_ratio),
        max_d2q_ratio=float(d2_ratio),
        max_growth_ratio=growth,
        failures=failures,
    )
