"""Spanning condition on the forced mode set and the mode-reachability layers."""

import itertools
import math
from dataclasses import dataclass, field


@dataclass
class SpanningReport:
    is_symmetric: bool
    is_generator: bool
    determinant_gcd: int
    nonparallel_unequal_pair: tuple | None
    layers: list = field(default_factory=list)
    coverage_radius_achieved: int = 0
    radius: int = 0
    covered: bool = False
    generator_bruteforce: bool | None = None

    def as_dict(self):
        return {
            "is_symmetric": self.is_symmetric,
            "is_generator": self.is_generator,
            "determinant_gcd": self.determinant_gcd,
            "generator_bruteforce": self.generator_bruteforce,
            "nonparallel_unequal_pair": [list(p) for p in self.nonparallel_unequal_pair]
            if self.nonparallel_unequal_pair else None,
            "layer_sizes": [len(z) for z in self.layers],
            "layers": [[list(k) for k in z] for z in self.layers],
            "radius": self.radius,
            "covered": self.covered,
            "coverage_radius_achieved": self.coverage_radius_achieved,
        }


def _modes(Z0):
    modes = sorted({(int(a), int(b)) for a, b in Z0})
    if not modes:
        raise ValueError("mode set must be nonempty")
    if (0, 0) in modes:
        raise ValueError("the zero mode is not allowed")
    return modes


def _det(m, n):
    return m[0] * n[1] - m[1] * n[0]


def determinant_gcd(Z0):
    """gcd of all 2x2 determinants; the index of the generated sublattice (0 if rank < 2)."""
    g = 0
    for m, n in itertools.combinations(_modes(Z0), 2):
        g = math.gcd(g, abs(_det(m, n)))
    return g


def generates_bruteforce(Z0, box=6, coeff=4):
    """Oracle: does walking along +-Z0 inside a box reach every point of a smaller box?"""
    modes = _modes(Z0)
    lim = box * coeff + max(max(abs(a), abs(b)) for a, b in modes)
    reached = {(0, 0)}
    frontier = [(0, 0)]
    while frontier:
        new = []
        for p in frontier:
            for m in modes:
                for s in (1, -1):
                    q = (p[0] + s * m[0], p[1] + s * m[1])
                    if max(abs(q[0]), abs(q[1])) <= lim and q not in reached:
                        reached.add(q)
                        new.append(q)
        frontier = new
    return all((i, j) in reached for i in range(-box, box + 1) for j in range(-box, box + 1))


def _nonparallel_unequal(modes):
    for m, n in itertools.combinations(modes, 2):
        if _det(m, n) != 0 and m[0] ** 2 + m[1] ** 2 != n[0] ** 2 + n[1] ** 2:
            return (m, n)
    return None


def check_condition1(Z0):
    """Symmetric, integer generator of Z^2, with a non-parallel pair of distinct norms."""
    modes = _modes(Z0)
    sym = all((-a, -b) in set(modes) for a, b in modes)
    g = determinant_gcd(modes)
    pair = _nonparallel_unequal(modes)
    report = SpanningReport(
        is_symmetric=sym,
        is_generator=g == 1,
        determinant_gcd=g,
        nonparallel_unequal_pair=pair,
        layers=[modes],
        generator_bruteforce=generates_bruteforce(modes),
    )
    return sym and g == 1 and pair is not None, report


def _next_layer(prev, Z0, clip2):
    out = set()
    for k in prev:
        k2 = k[0] ** 2 + k[1] ** 2
        for j in Z0:
            # <k_perp, j> != 0 is det(k, j) != 0 up to sign
            if _det(k, j) != 0 and k2 != j[0] ** 2 + j[1] ** 2:
                s = (k[0] + j[0], k[1] + j[1])
                if s != (0, 0) and s[0] ** 2 + s[1] ** 2 <= clip2:
                    out.add(s)
    return sorted(out)


def _disc(R):
    return [(i, j) for i in range(-R, R + 1) for j in range(-R, R + 1) if 0 < i * i + j * j <= R * R]


def coverage_radius(union, R):
    r = 0
    for rr in range(1, R + 1):
        if all(k in union for k in _disc(rr)):
            r = rr
        else:
            break
    return r


def reachable_modes(Z0, R, max_iter=50):
    """Layers Z_n = {k + j : j in Z0, k in Z_{n-1}, <k_perp, j> != 0, |k| != |j|}.

    Layers are clipped to |k| <= R + max|j| and iterated until the layer is
    empty, repeats an earlier layer, the R-disc is covered, or max_iter.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    modes = _modes(Z0)
    ok, report = check_condition1(modes)
    jmax = max(math.sqrt(a * a + b * b) for a, b in modes)
    clip2 = (R + jmax) ** 2 + 1e-9
    layers = [modes]
    seen = {tuple(modes)}
    union = set(modes)
    target = set(_disc(R))
    for _ in range(max_iter):
        if target <= union:
            break
        nxt = _next_layer(layers[-1], modes, clip2)
        if not nxt or tuple(nxt) in seen:
            break
        seen.add(tuple(nxt))
        layers.append(nxt)
        union |= set(nxt)
    report.layers = layers
    report.radius = int(R)
    report.covered = target <= union
    report.coverage_radius_achieved = coverage_radius(union, R)
    return report
