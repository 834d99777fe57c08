import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parahom.pde_solvers import Interval, IntervalSpace, Rectangle
from parahom.smoothing import (BoundaryLayer, CutoffError, Mollifier, apply_S, apply_S2, apply_S_direct,
                               apply_Stilde, build_cutoffs, default_mollifier, empirical_smoothing_bounds,
                               smoothing_multiplier, space_smoothing_matrix, time_smoothing_matrix)


def wave(x, t):
    return np.sin(2 * np.pi * x[:, 0]) * np.cos(2 * np.pi * t)


@pytest.mark.parametrize("d", [1, 2])
def test_mollifier_tables(d):
    mol = Mollifier(d)
    assert max(mol.mass_defects()) <= 1e-12
    assert np.all(mol.y_weights >= 0) and np.all(mol.t_weights >= 0)
    assert mol.phi1(np.array([-0.5, 0.5, 0.7])).max() == 0
    assert np.all(np.linalg.norm(mol.y_nodes, axis=1) < 0.5)


def test_stilde_constants_and_linears():
    x = np.linspace(0.2, 0.8, 7)
    assert np.allclose(apply_Stilde(lambda x, t: np.ones(len(x)), 0.05, x, [0.0]).values, 1.0, atol=1e-13)
    assert np.allclose(apply_Stilde(lambda x, t: x[:, 0], 0.05, x, [0.0]).values, x, atol=1e-13)
    pts = np.array([[0.3, 0.4], [0.5, 0.5]])
    lin = apply_Stilde(lambda x, t: 2 * x[:, 0] - x[:, 1], 0.05, pts, [0.0]).values
    assert np.allclose(lin, 2 * pts[:, 0] - pts[:, 1], atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.sampled_from([1 / 8, 1 / 16, 1 / 32]))
def test_stilde_fourier_multiplier(k, eps):
    x = np.linspace(0, 1, 9)
    got = apply_Stilde(lambda x, t: np.cos(2 * np.pi * k * x[:, 0]), eps, x, [0.0]).values[0]
    mult = smoothing_multiplier(eps, k)
    assert abs(mult) <= 1.0
    assert np.allclose(got, mult * np.cos(2 * np.pi * k * x), atol=1e-12)


def test_S_two_quadratures_agree():
    x = np.linspace(0.2, 0.8, 5)
    a = apply_S(wave, 0.1, 1, x, [0.3]).values
    b = apply_S_direct(wave, 0.1, 1, x, [0.3]).values
    assert np.max(np.abs(a - b)) <= 1e-8
    c = apply_S(lambda x, t: np.full(len(x), 3.0), 0.1, 2, x, [0.3]).values
    assert np.allclose(c, 3.0, atol=1e-12)


def test_S_contracts_in_l2():
    # one full period in x and t, so the sampled mean square is exact
    x = (np.arange(64) + 0.5) / 64
    t = (np.arange(16) + 0.5) / 16
    f = lambda x, t: np.sin(2 * np.pi * x[:, 0]) * np.cos(2 * np.pi * t) + 0.5 * np.cos(6 * np.pi * x[:, 0])
    raw = np.stack([f(x[:, None], tt) for tt in t])
    for eps in (1 / 4, 1 / 8):
        sm = apply_S(f, eps, 1, x, t).values
        assert np.sqrt(np.mean(sm ** 2)) <= np.sqrt(np.mean(raw ** 2)) * (1 + 1e-10)


def test_S_support():
    bump = lambda x, t: np.where(np.abs(x[:, 0] - 0.5) < 0.1, 1.0, 0.0)
    eps = 0.05
    out = apply_S(bump, eps, 1, np.array([0.3, 0.37, 0.5]), [0.2]).values[0]
    assert out[0] == 0 and out[1] == 0 and out[2] == pytest.approx(1.0, abs=1e-12)


def test_zero_extension_recorded():
    res = apply_S(wave, 0.1, 1, np.array([0.0]), [0.0], domain=Interval(), T=1.0)
    assert res.meta["extension"] == "zero"


def test_S2_matches_squared_multiplier():
    eps = 0.1
    x = np.linspace(0.2, 0.8, 5)
    mx, mt = smoothing_multiplier(eps, 1), smoothing_multiplier(eps ** 2, 1)
    base = apply_S2(wave, eps, 1, x, [0.3], nq=64).values[0]
    assert np.allclose(base, (mx * mt) ** 2 * wave(x[:, None], 0.3), atol=1e-8)
    dx = apply_S2(wave, eps, 1, x, [0.3], nq=64, space_order=1).values[0]
    assert np.allclose(dx, (mx * mt) ** 2 * 2 * np.pi * np.cos(2 * np.pi * x) * np.cos(0.6 * np.pi), atol=1e-7)


@pytest.mark.parametrize("source_order, out_order", [(0, 0), (1, 0), (0, 1), (1, 1), (0, 2)])
def test_space_matrix_against_multiplier(source_order, out_order):
    space = IntervalSpace(np.linspace(0, 1, 257), "hermite")
    dofs = np.zeros(space.n_dofs)
    dofs[0::2], dofs[1::2] = np.sin(np.pi * space.nodes), np.pi * np.cos(np.pi * space.nodes)
    eps = 1 / 32
    tg = np.linspace(0.2, 0.8, 7)
    got = space_smoothing_matrix(space, tg, eps, source_order, out_order) @ dofs
    total = source_order + out_order
    exact = smoothing_multiplier(eps, 0.5) ** 2 * np.pi ** total * np.sin(np.pi * tg + total * np.pi / 2)
    assert np.max(np.abs(got - exact)) <= 1e-8 * np.pi ** total


@pytest.mark.parametrize("order", [0, 1])
def test_time_matrix_against_multiplier(order):
    times = np.linspace(0, 1, 1001)
    tau = 0.016
    M = time_smoothing_matrix(times, times[100:900], tau, order)
    exact = smoothing_multiplier(tau, 1) ** 2 * (2 * np.pi) ** order * np.cos(2 * np.pi * times[100:900] + order * np.pi / 2)
    assert np.max(np.abs(M @ np.cos(2 * np.pi * times) - exact)) <= 1e-5 * (2 * np.pi) ** order


@pytest.mark.parametrize("m", [1, 2])
def test_smoothing_bound_ratios(m, tmp_path):
    rows = empirical_smoothing_bounds([1 / 8, 1 / 16, 1 / 32, 1 / 64], m, path=tmp_path / "bounds.csv")
    assert all(0 < r["ratio"] <= 10 for r in rows)
    for check in ("dt_S", "grad_S", "S_grad_minus_grad"):
        ratios = [r["ratio"] for r in rows if r["check"] == check and r["ell"] == (0 if check == "dt_S" else 1)]
        assert max(ratios) <= 10 * min(ratios) or ratios == sorted(ratios, reverse=True)
    assert (tmp_path / "bounds.csv").read_text().startswith("eps,check")


def test_smoothed_constant_has_no_gradient():
    x = np.linspace(0.3, 0.7, 5)
    vals = apply_S2(lambda x, t: np.full(len(x), 2.0), 0.05, 1, x, [0.5], space_order=1, time_order=1).values
    assert np.max(np.abs(vals)) <= 1e-9


# cutoffs -----------------------------------------------------------------------------

def test_cutoff_center_and_boundary():
    cut = build_cutoffs(Interval(), 0.5, 1 / 32, 1)
    assert cut.rho(np.array([0.5]))[0] == 1.0
    assert np.all(cut.rho(np.array([0.0, 1.0])) == 0.0)
    assert cut.varrho(np.array([0.25]))[0] == 1.0 and cut.varrho(np.array([0.0, 0.5])).max() == 0.0
    assert cut.bounds["sandwich"] and cut.bounds["time_sandwich"]


def test_cutoff_gradient_scaling():
    scaled = [build_cutoffs(Interval(), 0.5, eps, 2).bounds for eps in (1 / 32, 1 / 64, 1 / 128)]
    for key in ("rho_D1_scaled", "rho_D2_scaled"):
        vals = [b[key] for b in scaled]
        assert max(vals) <= 1.01 * min(vals)


def test_cutoff_rectangle():
    cut = build_cutoffs(Rectangle(), 0.5, 1 / 32, 1)
    assert cut.bounds["sandwich"]
    assert cut.rho(np.array([[0.5, 0.5]]))[0] == 1.0 and cut.rho(np.array([[0.5, 0.0]]))[0] == 0.0


def test_cutoff_derivative_matches_finite_difference():
    cut = build_cutoffs(Interval(), 0.5, 1 / 16, 1, 1.0, 2.0)
    x = np.linspace(0.05, 0.2, 31)
    h = 1e-6
    fd = (cut.rho(x + h) - cut.rho(x - h)) / (2 * h)
    assert np.allclose(cut.rho(x, (1,)), fd, atol=1e-4)


@pytest.mark.parametrize("eps, T", [(1 / 8, 0.5), (1 / 32, 1e-3)])
def test_infeasible_cutoffs(eps, T):
    with pytest.raises(CutoffError):
        build_cutoffs(Interval(), T, eps, 1)


@given(st.floats(0.5, 8.0), st.floats(0.0, 4.0))
def test_boundary_layers_nest(k, extra):
    x = np.linspace(0, 1, 101)[:, None]
    t = np.linspace(0, 0.5, 51)
    small = BoundaryLayer(Interval(), 0.5, 1 / 32, 1, k).cylinder(x, t)
    large = BoundaryLayer(Interval(), 0.5, 1 / 32, 1, k + extra).cylinder(x, t)
    assert np.all(large[small])
