import itertools
import json
import math

import pytest

from nsmalliavin import check_condition1, reachable_modes
from nsmalliavin.spanning import determinant_gcd, generates_bruteforce

from conftest import PAPER_Z0

SQUARE = [(1, 0), (-1, 0), (0, 1), (0, -1)]
DOUBLED = [(2, 0), (-2, 0), (2, 2), (-2, -2)]


def layers_by_hand(Z0, R, n_layers):
    """Plain re-implementation of the layer recursion, no clipping tricks."""
    clip = R + max(math.hypot(*j) for j in Z0)
    layers = [set(Z0)]
    for _ in range(n_layers):
        nxt = set()
        for k in layers[-1]:
            for j in Z0:
                perp_dot = -k[1] * j[0] + k[0] * j[1]
                if perp_dot != 0 and k[0] ** 2 + k[1] ** 2 != j[0] ** 2 + j[1] ** 2:
                    s = (k[0] + j[0], k[1] + j[1])
                    if s != (0, 0) and math.hypot(*s) <= clip + 1e-9:
                        nxt.add(s)
        layers.append(nxt)
    return layers


def test_paper_example_yes():
    ok, rep = check_condition1(PAPER_Z0)
    assert ok
    assert rep.is_symmetric and rep.is_generator and rep.determinant_gcd == 1
    m, n = rep.nonparallel_unequal_pair
    assert m[0] * n[1] - m[1] * n[0] != 0 and m[0] ** 2 + m[1] ** 2 != n[0] ** 2 + n[1] ** 2


def test_equal_norms_fail():
    ok, rep = check_condition1(SQUARE)
    assert not ok
    assert rep.is_symmetric and rep.is_generator
    assert rep.nonparallel_unequal_pair is None


def test_sublattice_fails():
    ok, rep = check_condition1(DOUBLED)
    assert not ok and not rep.is_generator
    assert rep.determinant_gcd == 4
    assert generates_bruteforce(DOUBLED) is False


def test_not_symmetric():
    ok, rep = check_condition1([(1, 0), (1, 1)])
    assert not ok and not rep.is_symmetric


@pytest.mark.parametrize("Z0", [
    PAPER_Z0, SQUARE, DOUBLED, [(1, 0), (-1, 0)], [(1, 2), (-1, -2), (3, 1), (-3, -1)],
    [(2, 1), (-2, -1), (1, 1), (-1, -1)], [(3, 0), (-3, 0), (0, 2), (0, -2), (1, 1), (-1, -1)],
])
def test_gcd_agrees_with_bruteforce(Z0):
    assert (determinant_gcd(Z0) == 1) == generates_bruteforce(Z0)


def test_paper_coverage_radius_6():
    rep = reachable_modes(PAPER_Z0, 6)
    assert rep.covered and rep.coverage_radius_achieved == 6


def test_layers_match_hand_recursion():
    rep = reachable_modes(PAPER_Z0, 6)
    ref = layers_by_hand(PAPER_Z0, 6, len(rep.layers) - 1)
    assert [set(z) for z in rep.layers] == ref
    union = set().union(*ref)
    assert all((i, j) in union for i in range(-6, 7) for j in range(-6, 7) if 0 < i * i + j * j <= 36)


def test_first_layer_step():
    rep = reachable_modes(PAPER_Z0, 6)
    assert (2, 1) in rep.layers[1]


def test_degenerate_set_stalls():
    rep = reachable_modes([(1, 0), (-1, 0)], 3)
    assert rep.layers == [[(-1, 0), (1, 0)]]
    assert not rep.covered and rep.coverage_radius_achieved == 0


def test_square_set_fails_coverage():
    rep = reachable_modes(SQUARE, 6)
    assert not rep.covered


def test_layers_symmetric():
    for z in reachable_modes(PAPER_Z0, 8).layers:
        s = set(z)
        assert all((-a, -b) in s for a, b in s)


def test_coverage_monotone_in_iterations():
    radii = [reachable_modes(PAPER_Z0, 8, it).coverage_radius_achieved for it in range(0, 10)]
    assert radii == sorted(radii)


def test_order_independent():
    ref = reachable_modes(PAPER_Z0, 6).as_dict()
    for perm in itertools.permutations(PAPER_Z0):
        assert reachable_modes(list(perm), 6).as_dict() == ref


def test_report_is_json():
    json.dumps(reachable_modes(PAPER_Z0, 4).as_dict())


def test_bad_radius():
    with pytest.raises(ValueError):
        reachable_modes(PAPER_Z0, 0)
