import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from parahom.cell_solver import (TorusGrid, assemble_cell_rhs, corrector_pair_identity, energy_identity_defect,
                                 export_correctors, import_correctors, solve_corrector, to_values)
from parahom.tensor_algebra import CoefficientField

from conftest import STATIC, static, suite, travelling

SQRT3 = np.sqrt(3.0)


def _modes_strategy(d):
    k = st.tuples(*[st.integers(-2, 2)] * (d + 1))
    c = st.complex_numbers(max_magnitude=0.3, allow_nan=False, allow_infinity=False)
    return st.lists(st.tuples(k, c), min_size=1, max_size=4)


def _scalar(d, m, extra):
    modes = {tuple([0] * (d + 1)): 2.0}
    for k, c in extra:
        if any(k) and tuple(-x for x in k) not in modes:
            modes[k] = c
    modes = list(modes.items())
    return CoefficientField.isotropic(d, m, 0.1, modes)


def test_rhs_constant_is_zero(grid1):
    A = CoefficientField.constant([[2.0]], 1, 1, 0.5)
    assert np.all(assemble_cell_rhs(A, (1,), 0, grid1) == 0)


def test_rhs_matches_symbolic_derivative(grid1):
    y = sympy.symbols("y")
    expected = sympy.lambdify(y, sympy.diff(sympy.sin(2 * sympy.pi * y), y))
    A = CoefficientField.isotropic(1, 1, 0.5, [((0, 0), 1.0), ((1, 0), -0.5j)])
    rhs = to_values(assemble_cell_rhs(A, (1,), 0, grid1), 2).real[0]
    nodes = np.arange(grid1.N) / grid1.N
    # (-1)^{m+1} D^a A^{a g} with m = 1
    assert np.allclose(rhs, expected(nodes)[:, None], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(_modes_strategy(1), st.integers(1, 2))
def test_rhs_has_zero_mean(extra, m):
    A = _scalar(1, m, extra)
    rhs = assemble_cell_rhs(A, (m,), 0, TorusGrid(1, 16, 16))
    assert rhs[0, 0, 0] == 0


def test_constant_coefficient_gives_zero_corrector():
    A = CoefficientField.constant(np.array([[2.0, 0.3], [0.3, 1.5]]), 2, 1, 0.5)
    chi = solve_corrector(A, TorusGrid(2, 8, 8))
    assert chi.l2_norm() <= 1e-12


def test_harmonic_mean_corrector_closed_form():
    grid = TorusGrid(1, 64, 8)
    chi = solve_corrector(static(1), grid)
    y = np.arange(64) / 64
    closed = SQRT3 / (2 + np.sin(2 * np.pi * y)) - 1.0
    d_chi = to_values(chi.derivative_modes((1,)), 2).real[0, 0, 0]
    assert np.allclose(d_chi, closed[:, None], atol=1e-9)


def _independent_residual(A, chi, j=0):
    """Cell residual computed with plain FFTs on a grid fine enough to hold every product exactly."""
    N, M = chi.grid.N, chi.grid.M
    L = (4 * N, 4 * M)
    pad = np.zeros(L, dtype=complex)
    src = chi.modes[0, 0, j]
    for a in range(N):
        for b in range(M):
            ka = a if a < N // 2 else a - N
            kb = b if b < M // 2 else b - M
            pad[ka % L[0], kb % L[1]] = src[a, b]
    ky = np.fft.fftfreq(L[0], 1 / L[0])[:, None]
    ks = np.fft.fftfreq(L[1], 1 / L[1])[None, :]
    dchi = np.fft.ifftn(2j * np.pi * ky * pad) * pad.size
    y = np.arange(L[0])[:, None] / L[0]
    s = np.arange(L[1])[None, :] / L[1]
    a = 2 + np.sin(2 * np.pi * (y + s))
    flux = np.fft.fftn(a * (dchi.real + 1)) / pad.size
    res = 2j * np.pi * ks * pad - 2j * np.pi * ky * flux
    res[0, 0] = 0
    # Galerkin residual: test against the retained modes only
    res *= (np.abs(ky) < N // 2) & (np.abs(ks) < M // 2)
    rhs = 2j * np.pi * ky * np.fft.fftn(a) / pad.size
    return float(np.sqrt(np.sum(np.abs(res) ** 2))), float(np.sqrt(np.sum(np.abs(rhs) ** 2)))


def test_residual_oracle(travelling_data):
    A, chi, _, _ = travelling_data
    res, scale = _independent_residual(A, chi)
    assert res <= chi.tol * scale


def test_solver_invariants(travelling_data):
    A, chi, _, _ = travelling_data
    assert chi.modes[..., 0, 0].max() == 0 and chi.modes[..., 0, 0].min() == 0
    full = to_values(chi.modes, 2)
    assert np.max(np.abs(full.imag)) <= 1e-13 * np.max(np.abs(full.real))
    assert chi.residual_norm <= chi.tol
    assert energy_identity_defect(chi) <= 1e-9


def test_spectral_self_convergence():
    A = travelling(1)
    fine = solve_corrector(A, TorusGrid(1, 64, 64)).values()[0, 0, 0]

    def gap(N):
        c = solve_corrector(A, TorusGrid(1, N, N)).values()[0, 0, 0]
        return np.sqrt(np.mean((c - fine[:: 64 // N, :: 64 // N]) ** 2))

    g8, g16 = gap(8), gap(16)
    assert g16 / g8 < 0.1


@pytest.mark.parametrize("M", [16, 32])
def test_pair_identity(M):
    A = travelling(1)
    grid = TorusGrid(1, 16, M)
    chi = solve_corrector(A, grid)
    chi_star = solve_corrector(A, grid, adjoint=True)
    assert corrector_pair_identity(chi, chi_star, A) <= 10 * chi.tol


def test_pair_identity_constant():
    A = CoefficientField.constant([[1.5]], 1, 1, 0.5)
    grid = TorusGrid(1, 8, 8)
    assert corrector_pair_identity(solve_corrector(A, grid), solve_corrector(A, grid, adjoint=True), A) == 0


@pytest.mark.parametrize("A", suite(), ids=["tw1", "tw2", "d2", "system"])
def test_suite_residuals(A):
    grid = TorusGrid(A.d, 16, 16)
    chi = solve_corrector(A, grid)
    assert chi.residual_norm <= chi.tol
    assert np.all(chi.modes[(Ellipsis,) + (0,) * (A.d + 1)] == 0)


def test_export_roundtrip(tmp_path, travelling_data):
    _, chi, _, _ = travelling_data
    export_correctors(chi, tmp_path / "chi")
    back = import_correctors(tmp_path / "chi")
    assert np.allclose(back.modes, chi.modes, atol=1e-15)
    assert back.time_sign == chi.time_sign
