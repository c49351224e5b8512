import numpy as np
import pytest

from nsmalliavin import (
    BlowUp, IntegratorSpec, SpectralField, jacobian_fd_check, linearized_flow, load_path, save_path, simulate,
    step,
)
from nsmalliavin.dynamics import Linearization, energy_balance, run_ensemble, self_convergence
from nsmalliavin.rng import brownian_increments, refine_increments

from conftest import paper_model


def test_single_mode_heat_decay(small_spec, model):
    lat = small_spec.lattice
    w = SpectralField.basis(lat, (2, 1))
    expect = np.exp(-0.1 * 5 * 1e-2) * w.coeffs
    off = IntegratorSpec(dt=1e-2, grid=16, nu=0.1, nonlinear=False)
    assert np.allclose(step(w, np.zeros(4), off, model).coeffs, expect, rtol=1e-15)
    # a single mode does not advect itself
    assert np.allclose(step(w, np.zeros(4), small_spec, model).coeffs, expect, atol=1e-15)


def test_linear_contraction(model, rng):
    spec = IntegratorSpec(dt=1e-2, grid=16, nu=0.1, nonlinear=False)
    w = SpectralField.random(spec.lattice, rng, norm=3.0)
    assert step(w, np.zeros(4), spec, model).norm() < w.norm()


def test_zero_horizon(small_spec, model, rng):
    w0 = SpectralField.random(small_spec.lattice, rng)
    p = simulate(w0, 0.0, small_spec, model, seed=1)
    assert p.steps == 0 and p.snapshots.shape == (1, small_spec.lattice.dim)
    assert np.array_equal(p.snapshots[0], w0.coeffs)


def test_determinism(small_spec, model, rng):
    w0 = SpectralField.random(small_spec.lattice, rng)
    a = simulate(w0, 0.5, small_spec, model, seed=9, path_index=3)
    b = simulate(w0, 0.5, small_spec, model, seed=9, path_index=3)
    assert a.snapshots.tobytes() == b.snapshots.tobytes()
    c = simulate(w0, 0.5, small_spec, model, seed=9, path_index=4)
    assert not np.array_equal(a.increments, c.increments)


def test_increments_reproducible_and_scaled():
    a = brownian_increments(5, 2, 20000, 4, 1e-2)
    assert np.array_equal(a, brownian_increments(5, 2, 20000, 4, 1e-2))
    assert a.var() == pytest.approx(1e-2, rel=0.03)
    assert not np.array_equal(a, brownian_increments(5, 2, 20000, 4, 1e-2, purpose="other"))


def test_refinement_sums():
    c = brownian_increments(1, 0, 100, 4, 1e-2)
    f = refine_increments(c, 1e-2, 1, 0)
    assert f.shape == (200, 4)
    assert np.allclose(f[0::2] + f[1::2], c, atol=1e-15)
    assert f.var() == pytest.approx(5e-3, rel=0.2)


def test_strided_snapshots_resimulate(small_spec, model, rng):
    w0 = SpectralField.random(small_spec.lattice, rng)
    full = simulate(w0, 0.3, small_spec, model, seed=2)
    coarse = simulate(w0, 0.3, small_spec, model, seed=2, stride=7)
    for m in (0, 5, 7, 13, 30):
        assert np.array_equal(coarse.state(m), full.snapshots[m])
    assert np.array_equal(coarse.trajectory(3, 20), full.trajectory(3, 20))


def test_ensemble_matches_single_paths(small_spec, model, rng):
    w0 = SpectralField.random(small_spec.lattice, rng)
    a, _ = run_ensemble(w0.coeffs, 20, small_spec, model, 4, [0, 1, 2], purpose="path")
    for i in range(3):
        p = simulate(w0, 0.2, small_spec, model, 4, path_index=i)
        assert np.allclose(a[i], p.snapshots[-1], rtol=1e-13, atol=1e-15)


def test_blowup(model):
    spec = IntegratorSpec(dt=1e-2, grid=16, nu=0.1, guard=10.0)
    w0 = SpectralField.from_modes(spec.lattice, {(1, 0): 20.0})
    with pytest.raises(BlowUp) as err:
        simulate(w0, 0.1, spec, model, seed=0, path_index=5)
    assert err.value.step == 1 and err.value.path_index == 5


def test_J_identity_and_linearity(small_spec, model, rng):
    lat = small_spec.lattice
    path = simulate(SpectralField.random(lat, rng), 0.3, small_spec, model, seed=3)
    xi, zeta = SpectralField.random(lat, rng), SpectralField.random(lat, rng)
    assert np.array_equal(linearized_flow(path, 10, 10, xi).coeffs, xi.coeffs)
    lhs = linearized_flow(path, 0, 30, 2.0 * xi - 0.5 * zeta).coeffs
    rhs = 2.0 * linearized_flow(path, 0, 30, xi).coeffs - 0.5 * linearized_flow(path, 0, 30, zeta).coeffs
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)
    with pytest.raises(IndexError):
        linearized_flow(path, 20, 10, xi)


def test_J_cocycle(small_spec, model, rng):
    lat = small_spec.lattice
    path = simulate(SpectralField.random(lat, rng, norm=2.0), 0.5, small_spec, model, seed=3)
    xi = SpectralField.random(lat, rng)
    one = linearized_flow(path, 5, 50, xi)
    two = linearized_flow(path, 20, 50, linearized_flow(path, 5, 20, xi))
    assert np.linalg.norm((one - two).coeffs) <= 1e-12 * one.norm()


def test_fft_and_matrix_routes_agree(model, rng):
    lat = IntegratorSpec(grid=16).lattice
    w0 = SpectralField.random(lat, rng, norm=2.0)
    xi = SpectralField.random(lat, rng)
    out = []
    for method in ("fft", "matrix"):
        spec = IntegratorSpec(dt=1e-2, grid=16, nu=0.1, linear_method=method)
        out.append(linearized_flow(simulate(w0, 0.2, spec, model, seed=1), 0, 20, xi).coeffs)
    assert np.allclose(out[0], out[1], rtol=1e-11, atol=1e-13)


def test_fd_zero_direction(small_spec, model, rng):
    lat = small_spec.lattice
    chk = jacobian_fd_check(SpectralField.random(lat, rng), SpectralField.zeros(lat), [1e-2, 1e-3], 0.2,
                            small_spec, model, seed=1)
    assert chk.errors == [0.0, 0.0]


@pytest.mark.parametrize("kind", ["spectral_coordinate", "norm_based", "constant"])
def test_fd_first_order(small_spec, rng, kind):
    lat = small_spec.lattice
    w0 = SpectralField.random(lat, rng, norm=1.0, radius=4)
    xi = SpectralField.random(lat, rng, radius=4)
    chk = jacobian_fd_check(w0, xi, [1e-2, 5e-3, 2.5e-3, 1.25e-3], 0.5, small_spec, paper_model(kind), seed=3)
    assert abs(chk.order - 1.0) <= 0.2
    assert chk.errors[-1] <= 1e-3 * chk.jnorm


def test_fd_eps_validation(small_spec, model, rng):
    w0 = SpectralField.random(small_spec.lattice, rng)
    with pytest.raises(ValueError):
        jacobian_fd_check(w0, w0, [1e-3, 1e-2], 0.1, small_spec, model, 0)


def test_constant_q_has_no_noise_term_in_J(small_spec, rng):
    # with Dq = 0 the step map of J does not see the increments
    lat = small_spec.lattice
    m = paper_model("constant")
    path = simulate(SpectralField.random(lat, rng), 0.1, small_spec, m, seed=1)
    lin = Linearization(path, 0, 10)
    V = rng.standard_normal((2, lat.dim))
    a = lin.apply(3, V)
    path.increments[3] *= 50.0
    assert np.array_equal(lin.apply(3, V), a)


def test_strong_self_convergence(model):
    lat = IntegratorSpec(grid=16).lattice
    diffs = []
    for p in range(8):
        spec = IntegratorSpec(dt=1e-2, grid=16, nu=0.1)
        w0 = SpectralField.random(lat, np.random.default_rng(p), norm=2.0, radius=4)
        dts, d, _ = self_convergence(w0, 0.5, spec, model, 1, path_index=p, levels=3)
        diffs.append(d)
    rms = np.sqrt(np.mean(np.square(diffs), axis=0))
    order = np.polyfit(np.log(dts[:-1]), np.log(rms), 1)[0]
    assert 0.35 <= order <= 1.3
    assert rms[-1] < rms[0]


def test_energy_balance_constant_q(small_spec):
    # E|w_T|^2 - |w_0|^2 + 2 nu int E|w|_1^2 = d q^2 T, after a Richardson step in dt
    m = paper_model("constant")
    w0 = SpectralField.basis(small_spec.lattice, (1, 0))
    res = []
    for dt in (1e-2, 5e-3):
        lhs, inj = energy_balance(w0, 1.0, small_spec.with_dt(dt), m, 0, 400)
        assert np.allclose(inj, 4 * 0.25 * 1.0)
        res.append(((lhs - inj).mean(), (lhs - inj).std(ddof=1) / 20))
    extrap = 2 * res[1][0] - res[0][0]
    se = np.hypot(2 * res[1][1], res[0][1])
    assert abs(extrap) <= 3 * se


def test_path_file_roundtrip(small_spec, model, rng, tmp_path):
    p = simulate(SpectralField.random(small_spec.lattice, rng), 0.2, small_spec, model, seed=7, stride=4)
    save_path(tmp_path / "p.nsmg", p)
    assert (tmp_path / "p.nsmg").read_bytes()[:4] == b"NSMG"
    q = load_path(tmp_path / "p.nsmg", small_spec, model)
    for name in ("increments", "snapshots", "qvalues"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert (q.seed, q.steps, q.stride, q.dt) == (7, 20, 4, small_spec.dt)
    assert np.array_equal(q.state(19), p.state(19))
    with pytest.raises(ValueError):
        load_path(tmp_path / "p.nsmg", small_spec.with_dt(5e-3), model)


def test_jacobian_moments_stable(small_spec, model):
    # sup_t |J_{0,t} xi| over unit xi: moments of an ensemble and its doubling agree
    lat = small_spec.lattice
    xi = SpectralField.basis(lat, (1, 0))
    sups = []
    for p in range(40):
        path = simulate(SpectralField.basis(lat, (1, 1)), 0.5, small_spec, model, seed=11, path_index=p)
        V = xi.coeffs[None]
        lin = Linearization(path, 0, path.steps)
        best = 1.0
        for m in range(path.steps):
            V = lin.apply(m, V)
            best = max(best, float(np.linalg.norm(V)))
        sups.append(best)
    sups = np.array(sups)
    for k in (2, 4):
        a, b = np.mean(sups[:20] ** k), np.mean(sups ** k)
        assert np.isfinite(b) and abs(a - b) <= 0.5 * b
