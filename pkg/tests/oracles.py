"""Independent reference computations used by the tests."""

import itertools

import numpy as np

SQRT2PI = np.sqrt(2.0) * np.pi


def basis_on_grid(k, n):
    """e_k(x) sampled directly: sin for k1 > 0 or (k1 = 0, k2 > 0), cos otherwise."""
    x = 2.0 * np.pi * np.arange(n) / n
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    ph = k[0] * X1 + k[1] * X2
    sin = k[0] > 0 or (k[0] == 0 and k[1] > 0)
    return (np.sin(ph) if sin else np.cos(ph)) / SQRT2PI


def synth(lattice, a, n):
    """Field on an n x n grid by explicit summation over the basis."""
    return sum(c * basis_on_grid(tuple(k), n) for k, c in zip(lattice.modes, a) if c != 0.0)


def analyse(lattice, g):
    """Real-basis coefficients by quadrature of <g, e_k> (exact for low-degree trig polynomials)."""
    n = g.shape[0]
    h = (2.0 * np.pi / n) ** 2
    return np.array([h * np.sum(g * basis_on_grid(tuple(k), n)) for k in lattice.modes])


def wavenumbers(n):
    k = np.fft.fftfreq(n, 1.0 / n)
    return np.meshgrid(k, k, indexing="ij")


def velocity_fft(g):
    """u = grad-perp psi with Laplacian psi = w, by full complex FFT."""
    n = g.shape[0]
    K1, K2 = wavenumbers(n)
    k2 = K1 ** 2 + K2 ** 2
    W = np.fft.fft2(g)
    psi = np.where(k2 > 0, -W / np.where(k2 > 0, k2, 1.0), 0.0)
    u1 = np.real(np.fft.ifft2(-1j * K2 * psi))
    u2 = np.real(np.fft.ifft2(1j * K1 * psi))
    return u1, u2


def grad_fft(g):
    K1, K2 = wavenumbers(g.shape[0])
    W = np.fft.fft2(g)
    return np.real(np.fft.ifft2(1j * K1 * W)), np.real(np.fft.ifft2(1j * K2 * W))


def B_reference(lattice, a, b, n=None):
    """Coefficients of -(K a . grad) b computed on an oversampled grid with complex FFTs."""
    n = n or 4 * lattice.kmax + 4
    ga, gb = synth(lattice, a, n), synth(lattice, b, n)
    u1, u2 = velocity_fft(ga)
    d1, d2 = grad_fft(gb)
    return analyse(lattice, -(u1 * d1 + u2 * d2))


def _hyper(angles):
    """Unit vector from hyperspherical angles, shape (..., n-1) -> (..., n)."""
    m = angles.shape[-1]
    out = np.ones(angles.shape[:-1] + (m + 1,))
    s = np.ones(angles.shape[:-1])
    for i in range(m):
        out[..., i] = s * np.cos(angles[..., i])
        s = s * np.sin(angles[..., i])
    out[..., m] = s
    return out


def sphere_grid_min(M, mask, alpha, coarse=250_000, keep=24, iters=80):
    """Grid search over xi = (cos(phi) u, sin(phi) v), |phi| <= arccos(alpha), zoomed around the best points.

    u and v are unit vectors on the low and high blocks in hyperspherical angles.
    """
    M = np.asarray(M, dtype=float)
    D = M.shape[0]
    lo_idx, hi_idx = np.flatnonzero(mask), np.flatnonzero(~mask)
    a, b = len(lo_idx), len(hi_idx)
    pmax = np.arccos(alpha)

    lead = 1 if b else 0

    def vecs(theta):
        phi = np.clip(theta[:, 0], -pmax, pmax) if b else np.zeros(len(theta))
        u = _hyper(theta[:, lead:lead + a - 1]) if a > 1 else np.ones((len(theta), 1))
        v = _hyper(theta[:, lead + a - 1:]) if b > 1 else np.ones((len(theta), 1))
        X = np.zeros((len(theta), D))
        X[:, lo_idx] = np.cos(phi)[:, None] * u
        if b:
            X[:, hi_idx] = np.sin(phi)[:, None] * v
        return X

    def quad(theta):
        X = vecs(theta)
        return np.einsum("ij,jk,ik->i", X, M, X)

    dim = lead + max(a - 1, 0) + max(b - 1, 0)
    if dim == 0:
        return float(M[lo_idx[0], lo_idx[0]])
    per = max(3, int(round(coarse ** (1.0 / dim))))
    axes = [np.linspace(0, 2 * np.pi, per, endpoint=False)] * dim
    if b:
        axes[0] = np.linspace(-pmax, pmax, per)
    theta = np.array(list(itertools.product(*axes)))
    vals = quad(theta)
    order = np.argsort(vals)[:keep]
    best, fbest = theta[order], vals[order]
    h = np.full(len(best), 2 * np.pi / per)
    offsets = np.array([o for o in itertools.product((-1.0, 0.0, 1.0), repeat=dim) if any(o)])
    for _ in range(iters):
        cand = best[:, None, :] + h[:, None, None] * offsets[None]
        if b:
            cand[..., 0] = np.clip(cand[..., 0], -pmax, pmax)
        f = quad(cand.reshape(-1, dim)).reshape(len(best), -1)
        j = np.argmin(f, axis=1)
        fj = f[np.arange(len(best)), j]
        moved = fj < fbest
        best = np.where(moved[:, None], cand[np.arange(len(best)), j], best)
        fbest = np.where(moved, fj, fbest)
        h = np.where(moved, h, h / 2)
    return float(np.min(fbest))
