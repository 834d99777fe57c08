import math

import numpy as np
import pytest

from parahom.cell_solver import TorusGrid, solve_corrector
from parahom.effective_tensor import compute_abar
from parahom.expansion import (LAYERS, RescaledField, build_Phi, build_varpi, build_w, error_functionals,
                               verify_error_equation)
from parahom.flux_correctors import build_flux_data
from parahom.pde_solvers import CylinderMesh, Interval, ProblemSpec, solve_adjoint, solve_parabolic
from parahom.smoothing import apply_S2, build_cutoffs
from parahom.tensor_algebra import CoefficientField

from conftest import static, travelling

T_SHORT = 0.1
T_PHI = 0.125  # whole number of periods at eps = 1/16


def _pair(A, abar, eps, T=T_SHORT, h="sin(pi*x)", elements="hermite"):
    mesh = CylinderMesh.for_epsilon(Interval(), T, eps, A.m, elements=elements, scheme="radau3")
    ue = solve_parabolic(ProblemSpec(A, eps, "dirichlet", None, h), mesh)
    u0 = solve_parabolic(ProblemSpec(abar, None, "dirichlet", None, h), mesh)
    return ue, u0


def phi_factory(T):
    def phi(x, t, j, k):
        X = [np.sin(np.pi * x), np.pi * np.cos(np.pi * x)][j]
        Tt = [np.sin(np.pi * t / T) ** 2, np.pi / T * np.sin(2 * np.pi * t / T)][k]
        return X * Tt
    return phi


@pytest.fixture(scope="module")
def sweep(travelling_data):
    A, chi, abar, fd = travelling_data
    out = {}
    for eps in (1 / 8, 1 / 16, 1 / 32):
        ue, u0 = _pair(A, abar, eps)
        cut = build_cutoffs(Interval(), T_SHORT, eps, 1, 1.0, 2.0)
        out[eps] = (ue, u0, build_w(ue, u0, chi, fd, eps, cut), build_varpi(ue, u0, chi, eps, cut))
    return out


def test_rescaled_field_direct_sum(travelling_data):
    chi = travelling_data[1]
    eps = 1 / 8
    field = RescaledField(chi.modes[0, 0, 0], eps, 1)
    x = np.array([0.1, 0.37])
    t = np.array([0.0, 0.013, 0.5])
    N, M = chi.grid.N, chi.grid.M
    ky, ks = np.fft.fftfreq(N, 1 / N), np.fft.fftfreq(M, 1 / M)
    phase = np.exp(2j * np.pi * (ky[None, :, None, None] * x[None, None, None, :] / eps
                                 + ks[None, None, :, None] * t[:, None, None, None] / eps ** 2))
    direct = np.einsum("ab,tabp->tp", chi.modes[0, 0, 0], phase).real
    assert np.allclose(field.evaluate(x, t), direct, atol=1e-13)


def test_constant_coefficient_reduces_to_difference():
    A = CoefficientField.constant([[1.7]], 1, 1, 0.5)
    grid = TorusGrid(1, 8, 8)
    chi = solve_corrector(A, grid)
    abar = compute_abar(A, chi)
    fd = build_flux_data(A, chi, abar)
    eps = 1 / 8
    ue, u0 = _pair(A, abar, eps)
    cut = build_cutoffs(Interval(), T_SHORT, eps, 1, 1.0, 2.0)
    w = build_w(ue, u0, chi, fd, eps, cut)
    for lo, hi in w.chunks():
        L = w.layers(lo, hi, 1)
        assert all(np.all(L[k] == 0) for k in ("chi", "flux", "curlyB"))
        assert np.all(L["u_diff"] == 0)
    rep = verify_error_equation(w, A, abar, phi_factory(T_SHORT))
    assert rep.lhs == 0 and rep.rhs == 0


def test_varpi_vanishes_on_boundary(sweep):
    assert sweep[1 / 16][3].boundary_trace() <= 1e-14


def test_corrector_term_bounded_by_eps(sweep, travelling_data):
    # |eps chi K| <= eps max|chi| |grad u0|, with |grad u0| known in closed form
    chi, abar = travelling_data[1], travelling_data[2].abar[0, 0, 0, 0].real
    chi_max = np.max(np.abs(np.fft.ifftn(chi.modes[0, 0, 0]) * chi.modes[0, 0, 0].size))
    lam = abar * np.pi ** 2
    grad_u0 = np.pi * math.sqrt(0.5 * (1 - math.exp(-2 * lam * T_SHORT)) / (2 * lam))
    for eps, (_, _, _, varpi) in sweep.items():
        n = varpi.norms()
        assert n["chi_D0"] <= 1.05 * eps * chi_max * grad_u0


def test_added_terms_scale_like_eps(sweep):
    # w - varpi is the flux layer here (curlyB vanishes for a travelling wave)
    eps = sorted(sweep)
    flux = [sweep[e][2].norms()["flux_D0"] for e in eps]
    slope = np.polyfit(np.log(eps), np.log(flux), 1)[0]
    assert slope >= 0.8


def _hand_assembled_w(ue, u0, chi, fd, eps, cut, x, t):
    """m = 1 expansion at single points, built from the quadrature smoothing route."""
    tau = eps ** 2

    def du0(xx, tt):
        if tt < 0 or tt > u0.times[-1]:
            return np.zeros(len(xx))
        k = min(np.searchsorted(u0.times, tt, side="right") - 1, len(u0.times) - 2)
        th = (tt - u0.times[k]) / (u0.times[k + 1] - u0.times[k])
        v = u0.evaluate(xx, (1,), levels=[k, k + 1])
        return (1 - th) * v[0] + th * v[1]

    S0 = apply_S2(du0, eps, 1, x, [t], nq=64).values[0]
    S1 = apply_S2(du0, eps, 1, x, [t], nq=64, space_order=1).values[0]
    rho, rho1 = cut.rho(x), cut.rho(x, (1,))
    vr = cut.varrho(np.array([t]))[0]
    K0, K1 = vr * rho * S0, vr * (rho1 * S0 + rho * S1)

    def torus(modes, nu=0):
        N, M = modes.shape
        ky, ks = np.fft.fftfreq(N, 1 / N), np.fft.fftfreq(M, 1 / M)
        ph = np.exp(2j * np.pi * (np.outer(x, ky)[:, :, None] / eps + ks[None, None, :] * t / tau))
        return np.einsum("ab,pab->p", modes * (2j * np.pi * ky[:, None]) ** nu, ph).real

    P = fd.P
    cB = np.sum(fd.curlyB[0, 0, 0, 0] * np.exp(2j * np.pi * np.fft.fftfreq(fd.grid.M, 1 / fd.grid.M) * t / tau)).real
    diff = ue.evaluate(x[:, None]) - u0.evaluate(x[:, None])
    k = int(np.argmin(np.abs(ue.times - t)))
    return (diff[k] - eps * torus(chi.modes[0, 0, 0]) * K0
            + eps ** 2 * torus(fd.flux[0, P, 0, 0, 0]) * K1 - eps ** 2 * cB * K1)


def test_w_matches_hand_assembled_m1(sweep, travelling_data):
    A, chi, abar, fd = travelling_data
    eps = 1 / 16
    ue, u0, w, _ = sweep[eps]
    cut = w.cutoffs
    x = np.array([0.2, 0.45, 0.71])
    level = len(w.times) // 2
    t = w.times[level]
    # pointwise evaluation of the assembled field at the same x
    from parahom.smoothing import space_smoothing_matrix
    saved = (w.points, w._E, w._X, w._rho)
    w.points = x
    w._E = [w.space.eval_matrix(x, (j,)) for j in range(2)]
    w._X = [space_smoothing_matrix(w.space, x, eps, 1, j) for j in range(4)]
    w._rho = [cut.rho(x[:, None], (j,)) for j in range(4)]
    got = w.values(level, level + 1, 0)[0]
    w.points, w._E, w._X, w._rho = saved
    ref = _hand_assembled_w(ue, u0, chi, fd, eps, cut, x, t)
    assert np.allclose(got, ref, rtol=1e-5, atol=1e-9)


def test_error_equation_mismatch_decreases(travelling_data):
    A, chi, abar, fd = travelling_data
    T, eps = 0.5, 1 / 8
    cut = build_cutoffs(Interval(), T, eps, 1, 1.0, 2.0)
    mismatch = []
    for hf, df in ((1 / 8, 1 / 16), (1 / 16, 1 / 32)):
        mesh = CylinderMesh.for_epsilon(Interval(), T, eps, 1, hf, df, "hermite", "radau3")
        ue = solve_parabolic(ProblemSpec(A, eps, "dirichlet", None, "sin(pi*x)"), mesh)
        u0 = solve_parabolic(ProblemSpec(abar, None, "dirichlet", None, "sin(pi*x)"), mesh)
        rep = verify_error_equation(build_w(ue, u0, chi, fd, eps, cut), A, abar, phi_factory(T))
        assert set(rep.terms) == {"I1", "I2", "I3", "I4", "I5"}
        mismatch.append(rep.mismatch)
    assert mismatch[0] <= 0.05 and mismatch[1] < mismatch[0]


def test_phi_support_and_constant_case():
    A = CoefficientField.constant([[1.2]], 1, 1, 0.5)
    grid = TorusGrid(1, 8, 8)
    B = A.adjoint().reflected_time(0.0)
    chiB = solve_corrector(B, grid)
    abar = compute_abar(B, chiB)
    fd = build_flux_data(B, chiB, abar)
    eps = 1 / 16
    mesh = CylinderMesh.for_epsilon(Interval(), T_PHI, eps, 1, elements="hermite", scheme="radau3")
    ve = solve_adjoint(ProblemSpec(A, eps, "dirichlet", "sin(pi*x)", None, adjoint=True), mesh)
    v0 = solve_adjoint(ProblemSpec(compute_abar(A, solve_corrector(A, grid)), None, "dirichlet", "sin(pi*x)", None,
                                   adjoint=True), mesh)
    cut = build_cutoffs(Interval(), T_PHI, eps, 1, 2.0, 4.0)
    Phi = build_Phi(ve, v0, chiB, fd, eps, cut, A=A)
    assert np.array_equal(Phi.u_eps.values, ve.values[::-1])
    norms = Phi.norms()
    assert norms["total_D0"] == norms["u_diff_D0"] == 0.0


def test_phi_corrector_terms_supported_inside(travelling_data):
    A = travelling(1)
    B = A.adjoint().reflected_time(0.0)
    chiB = solve_corrector(B, TorusGrid(1, 16, 16))
    fdB = build_flux_data(B, chiB, compute_abar(B, chiB))
    eps = 1 / 16
    mesh = CylinderMesh.for_epsilon(Interval(), T_PHI, eps, 1, elements="hermite", scheme="radau3")
    abar = travelling_data[2]
    ve = solve_adjoint(ProblemSpec(A, eps, "dirichlet", "1", None, adjoint=True), mesh)
    v0 = solve_adjoint(ProblemSpec(abar, None, "dirichlet", "1", None, adjoint=True), mesh)
    cut = build_cutoffs(Interval(), T_PHI, eps, 1, 2.0, 4.0)
    Phi = build_Phi(ve, v0, chiB, fdB, eps, cut, A=A)
    tau = eps ** 2
    early = np.flatnonzero(Phi.times <= 2 * tau)
    L = Phi.layers(0, early[-1] + 1, 1)
    assert all(np.all(L[k] == 0) for k in ("chi", "flux", "curlyB"))
    near = Phi.space.quad_points.reshape(-1) <= 2 * eps
    L = Phi.layers(len(Phi.times) // 2, len(Phi.times) // 2 + 1, 0)
    assert np.all(L["chi"][:, near] == 0)
    with pytest.raises(ValueError):
        build_Phi(ve, v0, chiB, fdB, eps, cut, A=static(1))


def test_error_functionals_identical_fields(sweep, tmp_path):
    ue = sweep[1 / 8][0]
    out = error_functionals(ue, ue, path=tmp_path / "f.csv")
    assert out["err_Hm1"] == 0 and out["err_L2"] == 0
    assert (tmp_path / "f.csv").exists()


def test_harmonic_mean_halving_ratio():
    A = static(1)
    chi = solve_corrector(A, TorusGrid(1, 64, 8))
    abar = compute_abar(A, chi)
    errs = []
    for eps in (1 / 8, 1 / 16):
        ue, u0 = _pair(A, abar, eps, T=0.5)
        errs.append(error_functionals(ue, u0)["err_Hm1"])
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.3)


def test_layer_names_fixed():
    assert LAYERS == ("u_diff", "chi", "flux", "curlyB")


def test_layers_sum_to_field_bitwise(sweep):
    w = sweep[1 / 16][2]
    L = w.layers(10, 20, 1)
    manual = ((L["u_diff"] + L["chi"]) + L["flux"]) + L["curlyB"]
    assert np.array_equal(w.values(10, 20, 1), manual)


def test_w_vanishes_on_boundary(sweep):
    assert sweep[1 / 16][2].boundary_trace() <= 1e-12


def test_w_minus_varpi_bounded_by_added_layers(sweep):
    for _, _, w, varpi in sweep.values():
        a, b = w.norms(), varpi.norms()
        gap = 0.0
        for lo, hi in w.chunks():
            d = w.values(lo, hi, 1) - varpi.values(lo, hi, 1)
            gap += float(np.sum(w.tw[lo:hi, None] * w.weights[None] * d ** 2))
        assert math.sqrt(gap) <= (a["flux_D1"] + a["curlyB_D1"]) * (1 + 1e-9)
