"""Flux discrepancy, its slice means, flux correctors and the time primitive.

Index slot ``P`` (one past the degree-``m`` multi-indices) stands for the time
direction.  With ``sigma`` the time sign of the cell problem,

* ``B^{ab} = A^{ab} + sum_g A^{ag} D^g chi^b - Abar^{ab}``
* ``B^{time, b} = sigma (-1)^m chi^b``

so that ``sum_a D^a B^{ab} + d/ds B^{time, b} = 0`` restates the cell problem.
Potentials solve ``Lap f = B - Bhat`` slice by slice where ``Lap`` has symbol
``sum_{|g|=m} (2 pi i k)^{2g}``; this is the polyharmonic operator whenever
``d = 1`` or ``m = 1`` and makes the divergence identity exact otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cell_solver import (CorrectorSet, TorusGrid, coefficient_modes, derivative_symbols, pad_modes, to_modes,
                          to_values, truncate_modes)
from .effective_tensor import EffectiveTensor, _same_field
from .tensor_algebra import CoefficientField, enumerate_multiindices, monomial_symbol


class FluxDataError(ValueError):
    pass


@dataclass(frozen=True)
class FluxData:
    """Fourier data on the torus grid; every array keeps the grid axes last.

    ``B`` has shape ``(P+1, P, n, n, *grid)`` (slot ``P`` is time), ``Bhat``
    ``(P+1, P, n, n, M)``, ``f`` like ``B``, ``flux`` ``(P+1, P+1, P, n, n, *grid)``
    and ``curlyB`` ``(P, P, n, n, M)`` (temporal modes).
    """

    grid: TorusGrid
    m: int
    n: int
    time_sign: int
    tol: float
    rhs_scale: float
    B: np.ndarray
    Bhat: np.ndarray | None = None
    f: np.ndarray | None = None
    flux: np.ndarray | None = None
    curlyB: np.ndarray | None = None

    @property
    def d(self):
        return self.grid.d

    @property
    def P(self):
        return self.B.shape[1]

    @property
    def TIME(self):
        return self.P


def _spatial_k(grid):
    return grid.wavenumbers()[: grid.d]


def _poly_symbol(grid, index_set):
    k = _spatial_k(grid)
    return sum(monomial_symbol(k, a) ** 2 for a in index_set)


def compute_B(A: CoefficientField, chi: CorrectorSet, abar: EffectiveTensor) -> FluxData:
    """Flux discrepancy ``B`` on the corrector grid (Galerkin-truncated products)."""
    if not _same_field(A, chi.coefficient):
        raise FluxDataError("correctors were not solved for this coefficient")
    grid = chi.grid
    grid.check_resolves(A)
    P, n, m = A.P, A.n, A.m
    sym = derivative_symbols(grid, A.index_set)
    pshape = grid.padded_shape(A.bandwidth())
    A_pad = A.sample(pshape)
    Dchi = sym[:, None, None, None] * chi.modes[None]        # (g, b, l, j)
    phys = to_values(pad_modes(Dchi, pshape), grid.d + 1).real
    prod = np.einsum("agil...,gblj...->abij...", A_pad, phys)
    corrected = truncate_modes(to_modes(prod, grid.d + 1), grid.shape)
    B = np.zeros((P + 1, P, n, n) + grid.shape, dtype=complex)
    B[:P] = coefficient_modes(A, grid) + corrected
    zero = (0,) * (grid.d + 1)
    B[(slice(0, P), Ellipsis) + zero] -= abar.abar
    B[P] = chi.time_sign * (-1) ** m * chi.modes
    rhs = np.einsum("a...,abij...->bij...", sym, coefficient_modes(A, grid))
    scale = float(np.sqrt(np.sum(np.abs(rhs) ** 2)))
    return FluxData(grid, m, n, chi.time_sign, chi.tol, scale, B)


def compute_Bhat(fd: FluxData) -> FluxData:
    """Spatial zero mode of ``B`` as temporal Fourier data."""
    spatial_zero = (0,) * fd.d
    Bhat = fd.B[(Ellipsis,) + spatial_zero + (slice(None),)].copy()
    return replace(fd, Bhat=Bhat)


def _broadcast_slice_mean(fd: FluxData, arr):
    out = np.zeros(arr.shape[:-1] + fd.grid.shape, dtype=complex)
    out[(Ellipsis,) + (0,) * fd.d + (slice(None),)] = arr
    return out


def solve_flux_potentials(fd: FluxData) -> FluxData:
    """Per-slice potentials with zero spatial mean, one spectral division for all slices."""
    if fd.Bhat is None:
        raise FluxDataError("slice means missing")
    lap = _poly_symbol(fd.grid, enumerate_multiindices(fd.d, fd.m))
    spatial_nonzero = np.any(_spatial_k(fd.grid) != 0, axis=0)
    safe = np.where(spatial_nonzero, lap, 1.0)
    f = np.where(spatial_nonzero, (fd.B - _broadcast_slice_mean(fd, fd.Bhat)) / safe, 0.0)
    return replace(fd, f=f)


def assemble_flux_correctors(fd: FluxData) -> FluxData:
    """Antisymmetric flux correctors from the potentials.

    Spatial pairs use ``D^g f^{ab} - D^a f^{gb}``, mixed pairs ``+-D^a f^{time, b}``
    and the time-time entry is zero.  Lower entries are exact negations.
    """
    if fd.f is None:
        raise FluxDataError("potentials missing")
    iset = enumerate_multiindices(fd.d, fd.m)
    sym = derivative_symbols(fd.grid, iset)
    P, T = fd.P, fd.TIME
    flux = np.zeros((P + 1, P + 1) + fd.f.shape[1:], dtype=complex)
    for g in range(P):
        for a in range(g + 1, P):
            upper = sym[g] * fd.f[a] - sym[a] * fd.f[g]
            flux[g, a] = upper
            flux[a, g] = -upper
        upper = sym[g] * fd.f[T]
        flux[g, T] = upper
        flux[T, g] = -upper
    return replace(fd, flux=flux)


def verify_flux_conservation(fd: FluxData) -> float:
    """``L^2`` norm of ``sum_a D^a B^{ab} + d/ds B^{time, b}`` relative to the cell right-hand side.

    Returns the absolute norm when the right-hand side vanishes.
    """
    iset = enumerate_multiindices(fd.d, fd.m)
    sym = derivative_symbols(fd.grid, iset)
    ks = fd.grid.wavenumbers()[fd.d]
    P = fd.P
    lhs = np.einsum("a...,abij...->bij...", sym, fd.B[:P]) + 2j * np.pi * ks * fd.B[P]
    num = float(np.sqrt(np.sum(np.abs(lhs) ** 2)))
    return num / fd.rhs_scale if fd.rhs_scale > 0 else num


def divergence_identity_residual(fd: FluxData) -> float:
    """Relative residual of ``sum_g D^g flux^{g j b} + d/ds flux^{time j b} = B^{jb} - Bhat^{jb}``."""
    iset = enumerate_multiindices(fd.d, fd.m)
    sym = derivative_symbols(fd.grid, iset)
    ks = fd.grid.wavenumbers()[fd.d]
    P = fd.P
    lhs = np.einsum("g...,gjbkl...->jbkl...", sym, fd.flux[:P]) + 2j * np.pi * ks * fd.flux[P]
    target = fd.B - _broadcast_slice_mean(fd, fd.Bhat)
    den = np.sqrt(np.sum(np.abs(target) ** 2))
    num = np.sqrt(np.sum(np.abs(lhs - target) ** 2))
    return float(num / den) if den > 0 else float(num)


def antisymmetry_defect(fd: FluxData) -> float:
    return float(np.max(np.abs(fd.flux + np.swapaxes(fd.flux, 0, 1))))


def compute_curlyB(fd: FluxData, mean_tol: float | None = None) -> FluxData:
    """Temporal primitive of the spatial slice means with value 0 at ``s = 0``."""
    if fd.Bhat is None:
        raise FluxDataError("slice means missing")
    P = fd.P
    Bh = fd.Bhat[:P]
    M = Bh.shape[-1]
    scale = max(1.0, float(np.max(np.abs(fd.B[:P]))))
    tol = mean_tol if mean_tol is not None else max(1e-10, 100 * fd.tol) * scale
    mean = np.abs(Bh[..., 0]).max()
    if mean > tol:
        raise FluxDataError(f"slice means have temporal mean {mean:.3e}; the effective tensor is inconsistent")
    ks = np.fft.fftfreq(M, 1.0 / M).round()
    nz = ks != 0
    cB = np.zeros_like(Bh)
    cB[..., nz] = Bh[..., nz] / (2j * np.pi * ks[nz])
    cB[..., 0] = -cB[..., nz].sum(axis=-1)
    return replace(fd, curlyB=cB)


def temporal_series(modes, s):
    """Evaluate temporal Fourier data (last axis, FFT order) at points ``s``."""
    M = modes.shape[-1]
    ks = np.fft.fftfreq(M, 1.0 / M).round()
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return (modes @ np.exp(2j * np.pi * np.outer(ks, s))).real


def curlyB_periodicity_defect(fd: FluxData) -> float:
    vals = temporal_series(fd.curlyB, [-0.5, 0.5])
    return float(np.max(np.abs(vals[..., 1] - vals[..., 0])))


def build_flux_data(A: CoefficientField, chi: CorrectorSet, abar: EffectiveTensor) -> FluxData:
    fd = compute_B(A, chi, abar)
    fd = compute_Bhat(fd)
    fd = solve_flux_potentials(fd)
    fd = assemble_flux_correctors(fd)
    return compute_curlyB(fd)


def flux_corrector_norms(fd: FluxData) -> dict:
    """``L^2(H^m)`` norm of spatial flux correctors and ``L^2(H^{2m})`` of the time ones."""
    k = _spatial_k(fd.grid)
    k2 = (4 * np.pi ** 2) * np.sum(k.astype(float) ** 2, axis=0)
    P = fd.P

    def sob(arr, order):
        weight = sum(k2 ** r for r in range(order + 1))
        return float(np.sqrt(np.sum(np.abs(arr) ** 2 * weight)))

    return dict(spatial=sob(fd.flux[:P, :P], fd.m), time=sob(fd.flux[P], 2 * fd.m))


def verification_report(fd: FluxData) -> dict:
    bt = temporal_series(fd.Bhat[fd.P], np.arange(fd.grid.M) / fd.grid.M)
    return dict(
        antisymmetry_defect=antisymmetry_defect(fd),
        time_time_zero=bool(np.all(fd.flux[fd.P, fd.P] == 0)),
        divergence_identity_relative=divergence_identity_residual(fd),
        conservation_relative=verify_flux_conservation(fd),
        bhat_time_sup=float(np.max(np.abs(bt))),
        curlyB_periodicity_defect=curlyB_periodicity_defect(fd),
        cell_tol=fd.tol,
    )


def save_report(fd: FluxData, path):
    Path(path).write_text(json.dumps(verification_report(fd), indent=1))
