"""
Fourier-space representation of mean-zero vorticity fields on the torus [-pi, pi]^2.

Fields are stored as real coefficients in the orthonormal sin/cos basis

    e_k(x) = sin(k.x) / (sqrt(2) pi)   if k1 > 0 or (k1 == 0 and k2 > 0)
    e_k(x) = cos(k.x) / (sqrt(2) pi)   otherwise

over the square lattice max(|k1|, |k2|) <= kmax. A field with real
coefficients a is mapped to the complex exponential coefficients c_k of
exp(i k.x) by, for every positive mode p,

    c_p = (a_{-p} - i a_p) / (2 sqrt(2) pi),    c_{-p} = conj(c_p)

which is the bijection used to move between the real storage and the
half-complex FFT layout.

Products are formed on a physical grid of size n with 3 * kmax < n, so that
the quadratic term truncated back to the lattice is alias free (2/3 rule).
"""

import functools
import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp

SQRT2PI = math.sqrt(2.0) * math.pi

FIELD_MAGIC = b"NSSF"
FIELD_VERSION = 1


class LatticeMismatch(ValueError):
    pass


def is_sin_type(k):
    """True for the sin half of the basis: k1 > 0 or (k1 == 0 and k2 > 0)."""
    k1, k2 = k
    return k1 > 0 or (k1 == 0 and k2 > 0)


def perp(k):
    return (-k[1], k[0])


class Lattice:
    """Truncated mode set max(|k1|,|k2|) <= kmax with its FFT grid.

    Modes are sorted lexicographically; this ordering is the coordinate
    system of every coefficient array in the package.
    """

    def __init__(self, kmax, grid=None):
        kmax = int(kmax)
        if kmax < 1:
            raise ValueError("kmax must be >= 1")
        if grid is None:
            grid = 3 * kmax + 1
        grid = int(grid)
        if 3 * kmax >= grid:
            raise ValueError(f"grid {grid} too small for alias-free products at kmax={kmax}")
        self.kmax = kmax
        self.grid = grid

        r = np.arange(-kmax, kmax + 1)
        k1, k2 = np.meshgrid(r, r, indexing="ij")
        modes = np.stack([k1.ravel(), k2.ravel()], axis=1)
        modes = modes[(modes[:, 0] != 0) | (modes[:, 1] != 0)]
        self.modes = modes
        self.dim = len(modes)
        self.index = {(int(a), int(b)): i for i, (a, b) in enumerate(modes)}
        self.k2 = (modes ** 2).sum(axis=1).astype(float)
        self.knorm = np.sqrt(self.k2)

        sin_mask = (modes[:, 0] > 0) | ((modes[:, 0] == 0) & (modes[:, 1] > 0))
        self.sin_mask = sin_mask
        self.pos = np.flatnonzero(sin_mask)
        self.neg = np.array([self.index[(-int(a), -int(b))] for a, b in modes[self.pos]])
        p = modes[self.pos]
        self._p = p.astype(float)
        self._pperp = np.stack([-p[:, 1], p[:, 0]], axis=1).astype(float)
        self._pk2 = self.k2[self.pos]

        # half-complex locations (row, col) holding c_p or its conjugate
        n = grid
        flip = p[:, 1] < 0
        rows = np.where(flip, -p[:, 0], p[:, 0]) % n
        cols = np.where(flip, -p[:, 1], p[:, 1])
        self._rows, self._cols, self._flip = rows, cols, flip
        # k2 == 0 column needs both (k1, 0) and (-k1, 0)
        axis = np.flatnonzero(p[:, 1] == 0)
        self._axis = axis
        self._axis_rows = (-p[axis, 0]) % n

    def __repr__(self):
        return f"Lattice(kmax={self.kmax}, grid={self.grid})"

    def __eq__(self, other):
        return isinstance(other, Lattice) and (self.kmax, self.grid) == (other.kmax, other.grid)

    def __hash__(self):
        return hash((self.kmax, self.grid))

    @classmethod
    def from_grid(cls, grid):
        return get_lattice((int(grid) - 1) // 3, grid)

    def mode_index(self, k):
        try:
            return self.index[(int(k[0]), int(k[1]))]
        except KeyError:
            raise KeyError(f"mode {tuple(k)} not on {self}") from None

    def low_mask(self, N):
        """Modes with Euclidean |k| <= N (range of the projection P_N)."""
        return self.k2 <= N * N + 1e-9

    # -- real basis <-> complex exponentials -------------------------------

    def complex_coefficients(self, a):
        """c_p for every positive mode p (ordered as self.pos)."""
        a = np.asarray(a, dtype=float)
        return (a[..., self.neg] - 1j * a[..., self.pos]) / (2.0 * SQRT2PI)

    def real_from_complex(self, c):
        out = np.empty(c.shape[:-1] + (self.dim,))
        out[..., self.pos] = -2.0 * SQRT2PI * c.imag
        out[..., self.neg] = 2.0 * SQRT2PI * c.real
        return out

    def to_grid(self, a):
        a = np.asarray(a, dtype=float)
        c = self.complex_coefficients(a)
        n = self.grid
        H = np.zeros(a.shape[:-1] + (n, n // 2 + 1), dtype=complex)
        H[..., self._rows, self._cols] = np.where(self._flip, c.conj(), c)
        H[..., self._axis_rows, 0] = c[..., self._axis].conj()
        return sfft.irfft2(H, s=(n, n), norm="forward", overwrite_x=True)

    def from_grid(self, g):
        H = sfft.rfft2(g, norm="forward")
        c = H[..., self._rows, self._cols]
        c = np.where(self._flip, c.conj(), c)
        return self.real_from_complex(c)

    def grid_points(self):
        x = 2.0 * np.pi * np.arange(self.grid) / self.grid
        return np.meshgrid(x, x, indexing="ij")

    # -- linear mode-wise operators on raw arrays ---------------------------

    def biot_savart_arrays(self, a):
        """Real-basis coefficients of the two velocity components of K a."""
        a = np.asarray(a, dtype=float)
        s, c = a[..., self.pos], a[..., self.neg]
        u = np.empty((2,) + a.shape)
        for i in range(2):
            f = self._pperp[:, i] / self._pk2
            u[i][..., self.pos] = c * f
            u[i][..., self.neg] = -s * f
        return u

    def gradient_arrays(self, a):
        a = np.asarray(a, dtype=float)
        s, c = a[..., self.pos], a[..., self.neg]
        g = np.empty((2,) + a.shape)
        for i in range(2):
            g[i][..., self.pos] = -c * self._p[:, i]
            g[i][..., self.neg] = s * self._p[:, i]
        return g

    def advect(self, u, a):
        """-(u.grad) a for velocity coefficients u (2, ..., D); pseudo-spectral."""
        ug = self.to_grid(u)
        gg = self.to_grid(self.gradient_arrays(a))
        return self.from_grid(-(ug[0] * gg[0] + ug[1] * gg[1]))

    def nonlinear(self, a):
        """B(K a, a) for a single field or a batch (..., D)."""
        return self.advect(self.biot_savart_arrays(a), a)

    def restrict(self, a, other):
        """Coefficients of a on the (smaller) lattice `other`."""
        if other.kmax > self.kmax:
            raise LatticeMismatch(f"cannot restrict {self} to larger {other}")
        idx = np.array([self.index[(int(p), int(q))] for p, q in other.modes])
        return np.asarray(a)[..., idx]

    def embed(self, a, other):
        """Coefficients of a (given on smaller lattice `other`) zero-padded to self."""
        idx = np.array([self.index[(int(p), int(q))] for p, q in other.modes])
        a = np.asarray(a)
        out = np.zeros(a.shape[:-1] + (self.dim,))
        out[..., idx] = a
        return out


@functools.lru_cache(maxsize=None)
def get_lattice(kmax, grid=None):
    return Lattice(kmax, grid)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable mean-zero field: coefficients on `lattice.modes`."""

    lattice: Lattice
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.lattice.dim,):
            raise ValueError(f"expected {self.lattice.dim} coefficients, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, lattice):
        return cls(lattice, np.zeros(lattice.dim))

    @classmethod
    def basis(cls, lattice, k):
        c = np.zeros(lattice.dim)
        c[lattice.mode_index(k)] = 1.0
        return cls(lattice, c)

    @classmethod
    def from_modes(cls, lattice, amplitudes):
        c = np.zeros(lattice.dim)
        for k, v in amplitudes.items():
            if tuple(k) == (0, 0):
                raise ValueError("the zero mode is not part of H")
            c[lattice.mode_index(k)] = v
        return cls(lattice, c)

    @classmethod
    def random(cls, lattice, rng, norm=1.0, radius=None, decay=0.0):
        """Gaussian coefficients on |k| <= radius, scaled to the given L2 norm."""
        c = rng.standard_normal(lattice.dim)
        if radius is not None:
            c[~lattice.low_mask(radius)] = 0.0
        if decay:
            c *= lattice.k2 ** (-decay / 2.0)
        c *= norm / np.linalg.norm(c)
        return cls(lattice, c)

    def as_dict(self):
        return {tuple(int(x) for x in k): float(v) for k, v in zip(self.lattice.modes, self.coeffs)}

    def norm(self, alpha=0.0):
        return sobolev_norm(self, alpha)

    def inner(self, other):
        _check_same(self, other)
        return float(np.dot(self.coeffs, other.coeffs))

    def to_grid(self):
        return self.lattice.to_grid(self.coeffs)

    def __add__(self, other):
        _check_same(self, other)
        return SpectralField(self.lattice, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same(self, other)
        return SpectralField(self.lattice, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return SpectralField(self.lattice, float(s) * self.coeffs)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.lattice, -self.coeffs)


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Two real component fields on one lattice (real-basis coefficients)."""

    lattice: Lattice
    components: np.ndarray  # shape (2, D)

    def norm(self, alpha=0.0):
        w = self.lattice.k2 ** alpha
        return math.sqrt(math.fsum((w * self.components ** 2).ravel()))

    def divergence(self):
        g0 = self.lattice.gradient_arrays(self.components[0])[0]
        g1 = self.lattice.gradient_arrays(self.components[1])[1]
        return SpectralField(self.lattice, g0 + g1)

    def to_grid(self):
        return self.lattice.to_grid(self.components)


def _check_same(a, b):
    if a.lattice != b.lattice:
        raise LatticeMismatch(f"{a.lattice} vs {b.lattice}")


def biot_savart(w):
    """Velocity K w with (K w)_k = -i w_k k_perp / |k|^2, k_perp = (-k2, k1)."""
    return VelocityField(w.lattice, w.lattice.biot_savart_arrays(w.coeffs))


def bilinear_B(u, w):
    """B(u, w) = -(u . grad) w, dealiased and truncated to the lattice."""
    _check_same(u, w)
    return SpectralField(w.lattice, w.lattice.advect(u.components, w.coeffs))


def b_tilde(w, v):
    """B(K w, v) + B(K v, w): the linearisation of B(K w, w) at w in direction v."""
    return bilinear_B(biot_savart(w), v) + bilinear_B(biot_savart(v), w)


def sobolev_norm(w, alpha=0.0):
    weights = w.lattice.k2 ** alpha
    return math.sqrt(math.fsum(weights * w.coeffs ** 2))


def project(w, N, part="low"):
    if N < 1:
        raise ValueError("N must be >= 1")
    mask = w.lattice.low_mask(N)
    if part == "high":
        mask = ~mask
    elif part != "low":
        raise ValueError(f"part must be 'low' or 'high', got {part!r}")
    return SpectralField(w.lattice, np.where(mask, w.coeffs, 0.0))


def b_tilde_batch(lattice, w, V):
    """B~(w, v) for a fixed field w (D,) and a batch of directions V (..., D)."""
    uw = lattice.to_grid(lattice.biot_savart_arrays(w))
    gw = lattice.to_grid(lattice.gradient_arrays(w))
    uv = lattice.to_grid(lattice.biot_savart_arrays(V))
    gv = lattice.to_grid(lattice.gradient_arrays(V))
    prod = uw[0] * gv[0] + uw[1] * gv[1] + uv[0] * gw[0] + uv[1] * gw[1]
    return lattice.from_grid(-prod)


@functools.lru_cache(maxsize=8)
def interaction_tensor(lattice):
    """Sparse S with (S @ w).reshape(D, D) @ v == B~(w, v), from trig identities.

    Uses B(K exp(iP.x), exp(iQ.x)) = -(P x Q) / |P|^2 exp(i(P+Q).x) on the
    complex expansion of each real basis function; no FFT is involved.
    """
    D = lattice.dim
    modes = lattice.modes
    sin = lattice.sin_mask
    prep = np.where(sin[:, None], modes, -modes)  # positive representative
    a_idx, b_idx = np.meshgrid(np.arange(D), np.arange(D), indexing="ij")
    a_idx, b_idx = a_idx.ravel(), b_idx.ravel()
    pa, pb = prep[a_idx], prep[b_idx]
    cross = (pa[:, 0] * pb[:, 1] - pa[:, 1] * pb[:, 0]).astype(float)
    pa2 = (pa ** 2).sum(axis=1).astype(float)

    def gamma(is_sin, s):
        # coefficient of exp(i s p.x) in e_a
        return np.where(is_sin, s / (2j * SQRT2PI), 1.0 / (2.0 * SQRT2PI))

    rows, cols, vals = [], [], []
    K = lattice.kmax
    for s in (1, -1):
        for t in (1, -1):
            kap = s * pa + t * pb
            ok = (np.abs(kap).max(axis=1) <= K) & ((kap[:, 0] > 0) | ((kap[:, 0] == 0) & (kap[:, 1] > 0)))
            coef = gamma(sin[a_idx], s) * gamma(sin[b_idx], t) * (-(s * t) * cross / pa2)
            coef, k_ok = coef[ok], kap[ok]
            ia, ib = a_idx[ok], b_idx[ok]
            ksin = np.array([lattice.index[(int(x), int(y))] for x, y in k_ok], dtype=int)
            kcos = np.array([lattice.index[(-int(x), -int(y))] for x, y in k_ok], dtype=int)
            for kk, v in ((ksin, -2.0 * SQRT2PI * coef.imag), (kcos, 2.0 * SQRT2PI * coef.real)):
                nz = v != 0.0
                # B(K e_a, e_b) enters L(w)[k, l] with (m, l) = (a, b) and (l, m) = (a, b)
                rows.append(kk[nz] * D + ib[nz])
                cols.append(ia[nz])
                vals.append(v[nz])
                rows.append(kk[nz] * D + ia[nz])
                cols.append(ib[nz])
                vals.append(v[nz])
    S = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(D * D, D)
    )
    S.sum_duplicates()
    return S


def linearization_matrix(lattice, w):
    """Dense D x D matrix of v -> B~(w, v)."""
    D = lattice.dim
    return (interaction_tensor(lattice) @ np.asarray(w, dtype=float)).reshape(D, D)


# -- snapshot files ---------------------------------------------------------

_TRIPLE = np.dtype([("k1", "<i4"), ("k2", "<i4"), ("amp", "<f8")])


def write_field(fh, w):
    """Write one NSSF record to a binary file handle."""
    recs = np.zeros(w.lattice.dim, dtype=_TRIPLE)
    recs["k1"], recs["k2"] = w.lattice.modes[:, 0], w.lattice.modes[:, 1]
    recs["amp"] = w.coeffs
    fh.write(FIELD_MAGIC)
    fh.write(struct.pack("<Iii", FIELD_VERSION, w.lattice.kmax, len(recs)))
    fh.write(recs.tobytes())


def read_field(fh, grid=None):
    """Read one NSSF record; returns None at end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != FIELD_MAGIC:
        raise ValueError(f"bad field magic {magic!r}")
    version, kmax, count = struct.unpack("<Iii", fh.read(12))
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field file version {version}")
    recs = np.frombuffer(fh.read(count * _TRIPLE.itemsize), dtype=_TRIPLE)
    lat = get_lattice(kmax, grid)
    return SpectralField.from_modes(lat, {(int(r["k1"]), int(r["k2"])): float(r["amp"]) for r in recs})


def save_field(path, w):
    with open(path, "wb") as fh:
        write_field(fh, w)


def load_field(path, grid=None):
    with open(path, "rb") as fh:
        return read_field(fh, grid)
