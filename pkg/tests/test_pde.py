import json

import numpy as np
import pytest
import sympy as sp

from hyperlora import autodiff as ad
from hyperlora import pde


def jet(value, grad, hess):
    return ad.Jet2(np.asarray(value, float), {k: np.asarray(v, float) for k, v in grad.items()},
                   {k: np.asarray(v, float) for k, v in hess.items()})


def const_jet(c, n, dims):
    z = np.zeros(n)
    return jet(np.full(n, c), {i: z for i in range(dims)},
               {(i, j): z for i in range(dims) for j in range(i, dims)})


# --------------------------------------------------------------------------
# residual operators on hand-built jets

def test_burgers1d_residual_hand_cases():
    assert np.all(pde.residual_burgers1d(const_jet(2.5, 4, 2), 0.3) == 0)
    x = np.linspace(0, 1, 5)
    z = np.zeros_like(x)
    j = jet(x, {0: np.ones_like(x), 1: z}, {(0, 0): z, (0, 1): z, (1, 1): z})
    np.testing.assert_allclose(pde.residual_burgers1d(j, 0.7), x)


def test_burgers2d_residual_hand_cases():
    ru, rv = pde.residual_burgers2d(const_jet(1.0, 3, 3), const_jet(-2.0, 3, 3), 1e-3)
    assert np.all(ru == 0) and np.all(rv == 0)
    x, y = np.array([0.1, 0.5, 0.9]), np.array([0.3, 0.2, 0.7])
    one, z = np.ones(3), np.zeros(3)
    hz = {(i, j): z for i in range(3) for j in range(i, 3)}
    ju = jet(y, {0: z, 1: one, 2: z}, hz)          # u = y
    jv = jet(-x, {0: -one, 1: z, 2: z}, hz)        # v = -x
    ru, rv = pde.residual_burgers2d(ju, jv, 0.01)
    np.testing.assert_allclose(ru, -x)
    np.testing.assert_allclose(rv, -y)


def test_kovasznay_residual_hand_cases():
    r = pde.residual_kovasznay(const_jet(0, 2, 2), const_jet(0, 2, 2), const_jet(3.0, 2, 2), 40.0)
    assert all(np.all(c == 0) for c in r)
    x, y = np.array([0.2, 0.6]), np.array([0.4, 0.9])
    one, z = np.ones(2), np.zeros(2)
    hz = {(0, 0): z, (0, 1): z, (1, 1): z}
    cont, mx, my = pde.residual_kovasznay(jet(y, {0: z, 1: one}, hz), jet(x, {0: one, 1: z}, hz),
                                          const_jet(0, 2, 2), 40.0)
    np.testing.assert_allclose(cont, 0)
    np.testing.assert_allclose(mx, x)
    np.testing.assert_allclose(my, y)


# --------------------------------------------------------------------------
# analytic solutions

def test_kovasznay_lambda_and_special_points():
    assert pde.kovasznay_lambda(40) == pytest.approx(-0.963740544, abs=1e-9)
    u, v, p = pde.analytic_kovasznay(0.0, 0.0, 77.0)
    assert (u, v, p) == (0.0, 0.0, 0.0)
    x = np.linspace(0, 1, 7)
    u, _, _ = pde.analytic_kovasznay(x, 0.5, 40.0)
    np.testing.assert_allclose(u, 1 + np.exp(pde.kovasznay_lambda(40) * x))


def _sympy_kovasznay():
    x, y, re = sp.symbols("x y re", real=True)
    lam = re / 2 - sp.sqrt(re ** 2 / 4 + 4 * sp.pi ** 2)
    u = 1 - sp.exp(lam * x) * sp.cos(2 * sp.pi * y)
    v = lam / (2 * sp.pi) * sp.exp(lam * x) * sp.sin(2 * sp.pi * y)
    p = (1 - sp.exp(2 * lam * x)) / 2
    fns = []
    for f in (u, v, p):
        parts = [f, f.diff(x), f.diff(y), f.diff(x, 2), f.diff(y, 2), f.diff(x, y)]
        fns.append(sp.lambdify((x, y, re), parts, "numpy"))
    return fns


@pytest.mark.parametrize("re", [20.0, 40.0, 100.0])
def test_kovasznay_jets_match_symbolic_derivatives(re):
    pts = np.random.default_rng(0).uniform(0, 1, (64, 2))
    jets = pde.kovasznay_jets(pts, re)
    for j, f in zip(jets, _sympy_kovasznay()):
        ref = [np.broadcast_to(np.asarray(v, float), (64,)) for v in f(pts[:, 0], pts[:, 1], re)]
        got = [j.value, j.d(0), j.d(1), j.dd(0), j.dd(1), j.dd(0, 1)]
        for a, b in zip(got, ref):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_kovasznay_residual_vanishes_on_64_probes():
    pts = np.random.default_rng(1).uniform(0, 1, (64, 2))
    for r in pde.residual_kovasznay(*pde.kovasznay_jets(pts, 40.0), 40.0):
        assert np.abs(r).max() <= 1e-8


def test_burgers2d_printed_sign_does_not_solve_the_pde():
    # symbolic check of both sign conventions: only u = 3/4 - s/4 is a solution
    x, y, t, nu = sp.symbols("x y t nu", positive=True)
    s = 1 / (1 + sp.exp((-4 * x + 4 * y - t) / (32 * nu)))

    def residual(u, v):
        return u.diff(t) + u * u.diff(x) + v * u.diff(y) - nu * (u.diff(x, 2) + u.diff(y, 2))

    vals = {x: sp.Rational(3, 10), y: sp.Rational(1, 2), t: sp.Rational(1, 5), nu: sp.Rational(1, 100)}
    used = float(residual(sp.Rational(3, 4) - s / 4, sp.Rational(3, 4) + s / 4).subs(vals).evalf(30))
    printed = float(residual(sp.Rational(3, 4) + s / 4, sp.Rational(3, 4) - s / 4).subs(vals).evalf(30))
    assert abs(used) < 1e-25
    assert abs(printed) > 1e-2


def test_burgers2d_analytic_properties():
    rng = np.random.default_rng(2)
    x, y, t = rng.uniform(0, 1, (3, 500))
    for nu in (1e-4, 5e-4, 1e-3):
        u, v = pde.analytic_burgers2d(x, y, t, nu)
        np.testing.assert_allclose(u + v, 1.5, atol=1e-15)
        assert np.all(np.isfinite(u)) and np.all((u >= 0.5) & (u <= 0.75))
        assert np.all((v >= 0.75) & (v <= 1.0))
    # exponent zero: s = 1/2
    u, v = pde.analytic_burgers2d(0.25, 0.5, 1.0, 1e-3)
    assert (u, v) == (pytest.approx(5 / 8), pytest.approx(7 / 8))
    # huge exponents stay finite and reach the limits
    u, v = pde.analytic_burgers2d(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.0, 1e-7)
    np.testing.assert_allclose(u, [0.75, 0.5])
    np.testing.assert_allclose(v, [0.75, 1.0])


def test_burgers2d_jets_match_finite_differences():
    nu = 1e-3
    pts = np.random.default_rng(3).uniform(0, 1, (50, 3))
    h = 1e-6
    for c, j in enumerate(pde.burgers2d_jets(pts, nu)):
        f = lambda p: pde.analytic_burgers2d(p[:, 0], p[:, 1], p[:, 2], nu)[c]
        np.testing.assert_allclose(j.value, f(pts), rtol=1e-14)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            np.testing.assert_allclose(j.d(i), (f(pts + e) - f(pts - e)) / (2 * h), rtol=1e-4, atol=1e-6)


# --------------------------------------------------------------------------
# Gaussian random fields

def test_grf_mode_std_values():
    assert pde.grf_mode_std(0) == 1.0
    assert pde.grf_mode_std(1) == pytest.approx(0.3877, abs=5e-5)


def test_grf_basis_is_orthonormal_on_the_grid():
    basis, std = pde.grf_basis(128)
    gram = basis @ basis.T / 128
    expect = np.eye(129)
    expect[128, 128] = 0.0       # sine at the Nyquist mode vanishes on the grid
    np.testing.assert_allclose(gram, expect, atol=1e-12)
    assert std.size == 129


def test_grf_sampler_deterministic_and_mean_zero():
    np.testing.assert_array_equal(pde.sample_grf_u0(4), pde.sample_grf_u0(4))
    u = pde.sample_grf_batch(np.random.default_rng(0), 20000)
    se = u.std(axis=0) / np.sqrt(len(u))
    assert np.all(np.abs(u.mean(axis=0)) <= 4 * se)


# --------------------------------------------------------------------------
# spectral reference solver

def test_solver_fixed_points():
    times = np.linspace(0, 0.2, 11)
    assert np.all(pde.solve_burgers1d_reference(np.zeros(128), times=times).u == 0)
    sol = pde.solve_burgers1d_reference(np.full(128, 0.7), times=times)
    np.testing.assert_allclose(sol.u, 0.7, atol=1e-14)


def test_solver_self_convergence_single_mode():
    x = np.arange(128) / 128
    times = np.linspace(0, 0.5, 51)
    a = pde.solve_burgers1d_reference(np.sin(2 * np.pi * x), 0.01, times)
    b = pde.solve_burgers1d_reference(np.sin(2 * np.pi * x), 0.01, times, refine=4)
    assert np.abs(a.u[-1] - b.u[-1]).max() <= 1e-6


def test_solver_conserves_mean():
    u0 = pde.sample_grf_u0(1)
    sol = pde.solve_burgers1d_reference(u0, 0.01, np.linspace(0, 1, 101))
    # drift of the mean over one output interval bounds the per-step drift
    assert np.abs(np.diff(sol.u.mean(axis=1))).max() <= 1e-8


def test_reference_residual_small_in_resolved_regime():
    x = np.arange(128) / 128
    sol = pde.solve_burgers1d_reference(0.2 * np.sin(2 * np.pi * x), 0.01)
    rng = np.random.default_rng(0)
    r = pde.spectral_residual(sol, rng.uniform(0, 1, 200), rng.uniform(0.05, 0.95, 200))
    assert np.abs(r).max() <= 1e-4


def test_solver_rejects_bad_input():
    with pytest.raises(ValueError):
        pde.solve_burgers1d_reference(np.zeros(8), nu=0.0)
    with pytest.raises(pde.SolverError) as info:
        pde.solve_burgers1d_reference(np.full(8, np.nan), times=np.linspace(0, 0.1, 3))
    assert info.value.t_reached == 0.0


# --------------------------------------------------------------------------
# point sets and tasks

def test_kovasznay_point_budget():
    sys_ = pde.Kovasznay(40.0)
    pts = pde.make_point_sets(sys_, 0)
    assert pts.collocation.shape == (2601, 2)
    assert pts.bc_points.shape == (320, 2)
    assert sys_.domain.contains(pts.all_points())
    lattice = np.round(pts.collocation * 100)
    np.testing.assert_allclose(lattice / 100, pts.collocation, atol=1e-12)
    np.testing.assert_allclose(pts.bc_values, sys_.reference(pts.bc_points))


def test_burgers_point_budgets():
    b2 = pde.make_point_sets(pde.Burgers2D(5e-4), 0)
    assert (len(b2.collocation), len(b2.ic_points), len(b2.bc_points)) == (10000, 500, 400)
    assert np.all(b2.ic_points[:, 2] == 0)
    b1sys = pde.Burgers1D(pde.sample_grf_u0(0))
    b1 = pde.make_point_sets(b1sys, 0)
    assert (len(b1.collocation), len(b1.ic_points)) == (10000, 128)
    left, right = b1.bc_pairs
    assert len(left) == len(right) == 100
    np.testing.assert_array_equal(left[:, 1], right[:, 1])
    np.testing.assert_array_equal(b1.ic_values[:, 0], b1sys.u0)
    for s, p in ((pde.Burgers2D(5e-4), b2), (b1sys, b1)):
        assert s.domain.contains(p.all_points())


def test_point_sets_are_seeded():
    s = pde.Kovasznay(60.0)
    a, b = pde.make_point_sets(s, 3), pde.make_point_sets(s, 3)
    np.testing.assert_array_equal(a.collocation, b.collocation)
    assert not np.array_equal(a.collocation, pde.make_point_sets(s, 4).collocation)


def test_embeddings_normalized():
    assert pde.Kovasznay(60.0).embedding() == pytest.approx([0.0])
    assert pde.Burgers2D(1e-3).embedding() == pytest.approx([1.0])
    u0 = pde.sample_grf_u0(0)
    np.testing.assert_array_equal(pde.Burgers1D(u0).embedding(), u0)


def test_task_files_roundtrip(tmp_path):
    tasks = pde.sample_tasks("kovasznay", 3, 0) + [pde.Burgers1D(pde.sample_grf_u0(2))]
    path = pde.write_tasks(tmp_path / "tasks.jsonl", tasks, [0, 1, 2, 3])
    back = pde.read_tasks(path)
    assert [s for _, s in back] == [0, 1, 2, 3]
    for a, (b, _) in zip(tasks, back):
        assert a.system_id == b.system_id
        assert json.dumps(a.params_dict()) == json.dumps(b.params_dict())


def test_sampled_tasks_in_range():
    for s in pde.sample_tasks("kovasznay", 50, 1):
        assert 20 <= s.re <= 100
    for s in pde.sample_tasks("burgers2d", 50, 1):
        assert 1e-4 <= s.nu <= 1e-3
