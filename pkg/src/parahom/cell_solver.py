"""Periodic parabolic cell problems on the unit space-time torus.

For every degree-``m`` multi-index ``g`` and column ``j`` the corrector solves

.. math::

    \\sigma \\partial_s \\chi^{g}_j + (-1)^m \\sum D^a (A^{ab} D^b \\chi^{g}_j)
        = (-1)^{m+1} \\sum_a D^a A^{a g}_{\\cdot j},
    \\qquad \\int \\chi^g_j = 0,

with ``sigma = +1`` for the forward problem and ``sigma = -1`` for the
adjoint one (where ``A`` is replaced by its adjoint).  The discretisation is
Fourier-Galerkin on an ``N^d x M`` mode grid.  Products with the coefficient
are evaluated on a padded grid, so the spatial form is integrated exactly and
the Nyquist modes are excluded from the trial space.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .tensor_algebra import CoefficientField, monomial_symbol

log = logging.getLogger(__name__)


class CellSolveError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class TorusGrid:
    d: int
    N: int
    M: int

    def __post_init__(self):
        if self.N < 2 or self.M < 2 or self.N % 2 or self.M % 2:
            raise ValueError("N and M must be even and >= 2")

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.d + (self.M,)

    @property
    def size(self) -> int:
        return self.N ** self.d * self.M

    @property
    def axes(self) -> tuple:
        return tuple(range(-(self.d + 1), 0))

    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, shape ``(d+1, *shape)``."""
        ks = [np.fft.fftfreq(n, 1.0 / n).round().astype(int) for n in self.shape]
        return np.stack(np.meshgrid(*ks, indexing="ij"))

    def trial_mask(self) -> np.ndarray:
        """True on the retained modes: not the zero mode, no Nyquist component."""
        k = self.wavenumbers()
        keep = np.ones(self.shape, dtype=bool)
        for ax, n in enumerate(self.shape):
            keep &= np.abs(k[ax]) < n // 2
        keep &= np.any(k != 0, axis=0)
        return keep

    def padded_shape(self, bandwidth) -> tuple:
        out = []
        for n, b in zip(self.shape, bandwidth):
            L = n + b
            out.append(L + (L % 2))
        return tuple(out)

    def check_resolves(self, A: CoefficientField):
        bw = A.bandwidth()
        for n, b in zip(self.shape, bw):
            if n < 2 * b + 2:
                raise ValueError(f"grid {self.shape} does not resolve coefficient bandwidth {bw}")

    def nodes(self) -> list:
        return [np.arange(n) / n for n in self.shape]


# spectral helpers -----------------------------------------------------------

def to_modes(values, ndim):
    axes = tuple(range(-ndim, 0))
    size = np.prod(values.shape[-ndim:])
    return np.fft.fftn(values, axes=axes) / size


def to_values(modes, ndim):
    axes = tuple(range(-ndim, 0))
    size = np.prod(modes.shape[-ndim:])
    return np.fft.ifftn(modes, axes=axes) * size


def _embed_index(n, L):
    h = n // 2 - 1
    src = np.r_[0:h + 1, n - h:n]
    dst = np.r_[0:h + 1, L - h:L]
    return src, dst


def pad_modes(modes, shape):
    """Embed Nyquist-free modes into a larger FFT-ordered array."""
    ndim = len(shape)
    small = modes.shape[-ndim:]
    out = np.zeros(modes.shape[:-ndim] + tuple(shape), dtype=complex)
    idx = [_embed_index(n, L) for n, L in zip(small, shape)]
    src = np.ix_(*[i[0] for i in idx])
    dst = np.ix_(*[i[1] for i in idx])
    out[(Ellipsis,) + dst] = modes[(Ellipsis,) + src]
    return out


def truncate_modes(modes, shape):
    ndim = len(shape)
    big = modes.shape[-ndim:]
    out = np.zeros(modes.shape[:-ndim] + tuple(shape), dtype=complex)
    idx = [_embed_index(n, L) for n, L in zip(shape, big)]
    src = np.ix_(*[i[1] for i in idx])
    dst = np.ix_(*[i[0] for i in idx])
    out[(Ellipsis,) + dst] = modes[(Ellipsis,) + src]
    return out


def coefficient_modes(A: CoefficientField, grid: TorusGrid) -> np.ndarray:
    """Fourier data of ``A`` placed on the grid, shape ``(P, P, n, n, *shape)``."""
    grid.check_resolves(A)
    out = np.zeros(A.coefficients.shape[1:] + grid.shape, dtype=complex)
    for k, c in zip(A.wavenumbers, A.coefficients):
        pos = tuple(int(x) % n for x, n in zip(k, grid.shape))
        out[(Ellipsis,) + pos] += c
    return out


def derivative_symbols(grid: TorusGrid, index_set) -> np.ndarray:
    k = grid.wavenumbers()[: grid.d]
    return np.stack([monomial_symbol(k, a) for a in index_set])


class CellOperator:
    """``sigma d/ds + (-1)^m sum D^a (A^{ab} D^b .)`` on Nyquist-free Fourier data."""

    def __init__(self, A: CoefficientField, grid: TorusGrid, time_sign: int = 1):
        grid.check_resolves(A)
        self.A, self.grid, self.time_sign = A, grid, int(time_sign)
        self.ndim = grid.d + 1
        self.pshape = grid.padded_shape(A.bandwidth())
        self.A_pad = A.sample(self.pshape)
        self.sym = derivative_symbols(grid, A.index_set)
        self.ks = grid.wavenumbers()[grid.d]
        self.mask = grid.trial_mask()
        self.sign = (-1) ** A.m
        n = A.n
        S = self.sign * np.einsum("a...,b...,abij->...ij", self.sym, self.sym, A.mean().astype(complex))
        S = S + self.time_sign * 2j * np.pi * self.ks[..., None, None] * np.eye(n)
        S[~self.mask] = np.eye(n)
        Sinv = np.linalg.inv(S)
        Sinv[~self.mask] = 0.0
        self.Sinv = np.moveaxis(Sinv, (-2, -1), (0, 1))

    def flux(self, v):
        """Galerkin-projected ``A^{ab} D^b v``, shape ``(P, n, *shape)``."""
        Dv = self.sym[:, None] * v[None]
        phys = to_values(pad_modes(Dv, self.pshape), self.ndim).real
        prod = np.einsum("abik...,bk...->ai...", self.A_pad, phys)
        return truncate_modes(to_modes(prod, self.ndim), self.grid.shape)

    def apply(self, v):
        out = self.sign * np.einsum("a...,ai...->i...", self.sym, self.flux(v))
        out = out + self.time_sign * 2j * np.pi * self.ks * v
        return out * self.mask

    def precondition(self, v):
        return np.einsum("ij...,j...->i...", self.Sinv, v * self.mask)

    def rhs(self, gamma_index: int, j: int):
        Am = coefficient_modes(self.A, self.grid)[:, gamma_index, :, j]
        out = -self.sign * np.einsum("a...,ai...->i...", self.sym, Am)
        return out * self.mask


def assemble_cell_rhs(A: CoefficientField, gamma, j: int, grid: TorusGrid) -> np.ndarray:
    """Fourier data of ``(-1)^{m+1} sum_a D^a A^{a gamma}_{. j}``, shape ``(n, *shape)``."""
    op = CellOperator(A, grid)
    return op.rhs(A.index_set.index(gamma), j)


def apply_cell_operator(A: CoefficientField, grid: TorusGrid, modes, time_sign: int = 1):
    return CellOperator(A, grid, time_sign).apply(modes)


@dataclass(frozen=True)
class CorrectorSet:
    """Solved correctors ``chi[g, k, j]``: multi-index ``g``, component ``k``, column ``j``.

    ``coefficient`` and ``time_sign`` describe the cell problem actually solved.
    """

    grid: TorusGrid
    modes: np.ndarray
    coefficient: CoefficientField
    time_sign: int
    adjoint: bool
    reverse_time: bool
    tol: float
    residual_norm: float
    residual_history: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def d(self):
        return self.grid.d

    @property
    def m(self):
        return self.coefficient.m

    @property
    def n(self):
        return self.coefficient.n

    def values(self) -> np.ndarray:
        return to_values(self.modes, self.grid.d + 1).real

    def derivative_modes(self, nu) -> np.ndarray:
        k = self.grid.wavenumbers()[: self.d]
        return monomial_symbol(k, nu) * self.modes

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.modes) ** 2)))


def _gmres_column(op: CellOperator, b, tol, maxiter, restart):
    shape = (op.A.n,) + op.grid.shape
    ndim = op.ndim

    def real_to_modes(x):
        return to_modes(x.reshape(shape), ndim)

    def matvec(y):
        return to_values(op.apply(op.precondition(real_to_modes(y))), ndim).real.ravel()

    bvec = to_values(b, ndim).real.ravel()
    bnorm = np.linalg.norm(bvec)
    history = []
    if bnorm == 0.0:
        return np.zeros(shape, dtype=complex), 0.0, history
    L = LinearOperator((bvec.size, bvec.size), matvec=matvec, dtype=float)
    x = np.zeros_like(bvec)
    r = bvec.copy()
    rel = 1.0
    for _ in range(6):
        target = min(0.5, 0.5 * tol * bnorm / np.linalg.norm(r))
        y, info = gmres(L, r, rtol=target, atol=0.0, restart=restart, maxiter=maxiter,
                        callback=lambda res: history.append(float(res)), callback_type="pr_norm")
        x = x + to_values(op.precondition(real_to_modes(y)), ndim).real.ravel()
        r = bvec - to_values(op.apply(real_to_modes(x)), ndim).real.ravel()
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            break
    if rel > tol:
        raise CellSolveError(f"cell solve stalled at relative residual {rel:.3e}", history)
    modes = real_to_modes(x) * op.mask
    return modes, float(rel), history


def solve_corrector(A: CoefficientField, grid: TorusGrid, tol: float = 1e-10, adjoint: bool = False,
                    reverse_time: bool = False, time_shift: float = 0.0, maxiter: int = 200,
                    restart: int = 60, workers: int = 1) -> CorrectorSet:
    """Solve every column of the (adjoint) cell problem.

    ``adjoint`` replaces ``A`` by ``A*`` and the time derivative by ``-d/ds``.
    ``reverse_time`` applies the reflection ``s -> time_shift - s`` to the
    problem, which flips the time derivative and reflects the coefficient; the
    solution is the reflected solution of the unreflected problem.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    coef = A.adjoint() if adjoint else A
    sign = -1 if adjoint else 1
    if reverse_time:
        coef = coef.reflected_time(time_shift)
        sign = -sign
    op = CellOperator(coef, grid, sign)
    P, n = coef.P, coef.n
    modes = np.zeros((P, n, n) + grid.shape, dtype=complex)
    cols = [(g, j) for g in range(P) for j in range(n)]

    def work(col):
        g, j = col
        return _gmres_column(op, op.rhs(g, j), tol, maxiter, restart)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, cols))
    else:
        results = [work(c) for c in cols]
    worst, history = 0.0, {}
    for (g, j), (sol, rel, hist) in zip(cols, results):
        modes[g, :, j] = sol
        worst = max(worst, rel)
        history[(g, j)] = hist
    log.debug("cell solve: grid %s, worst residual %.2e", grid.shape, worst)
    return CorrectorSet(grid, modes, coef, sign, adjoint, reverse_time, tol, worst, history)


def mean_of_product(A_modes_list, field_modes, grid: TorusGrid):
    """Exact ``int A * F`` for band-limited ``A`` given as ``[(k, C_k)]``.

    ``field_modes`` has the grid axes last; returns ``sum_k C_k F(-k)`` with
    the leading axes of both broadcast together.
    """
    total = 0.0
    for k, c in A_modes_list:
        pos = tuple(int(-x) % n for x, n in zip(k, grid.shape))
        total = total + c * field_modes[(Ellipsis,) + pos]
    return total


def corrector_pair_identity(chi: CorrectorSet, chi_star: CorrectorSet, A: CoefficientField) -> float:
    """Largest gap between the two pairings obtained by cross-testing the cell problems.

    Compares ``sum_e int A^{a e}_{il} D^e chi^g_{lj}`` with
    ``sum_e int A^{e g}_{lj} D^e chi*^a_{li}`` over all ``(a, i, g, j)``.
    """
    if chi.grid != chi_star.grid:
        raise ValueError("correctors live on different grids")
    grid = chi.grid
    Ak = list(zip(A.wavenumbers, A.coefficients))
    sym = derivative_symbols(grid, A.index_set)
    Dchi = sym[:, None, None, None] * chi.modes[None]          # (e, g, l, j, ...)
    Dstar = sym[:, None, None, None] * chi_star.modes[None]    # (e, a, l, i, ...)
    # lhs[a,i,g,j] = sum_{e,l} int A[a,e,i,l] * Dchi[e,g,l,j]
    lhs = 0.0
    rhs = 0.0
    for k, c in Ak:
        pos = tuple(int(-x) % n for x, n in zip(k, grid.shape))
        lhs = lhs + np.einsum("aeil,eglj->aigj", c, Dchi[(Ellipsis,) + pos])
        rhs = rhs + np.einsum("eglj,eali->aigj", c, Dstar[(Ellipsis,) + pos])
    return float(np.max(np.abs(lhs - rhs)))


def energy_identity_defect(chi: CorrectorSet) -> float:
    """Gap in ``sum int A D chi . D chi = - sum int A^{.g}_{.j} . D chi`` (max over columns)."""
    op = CellOperator(chi.coefficient, chi.grid, chi.time_sign)
    Am = coefficient_modes(chi.coefficient, chi.grid)
    worst = 0.0
    for g in range(chi.coefficient.P):
        for j in range(chi.n):
            v = chi.modes[g, :, j]
            Dv = op.sym[:, None] * v[None]
            flux = op.flux(v)
            lhs = np.sum(flux * np.conj(Dv)).real
            rhs = -np.sum(Am[:, g, :, j] * np.conj(Dv)).real
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst


def export_correctors(chi: CorrectorSet, prefix) -> tuple:
    """Write ``prefix.bin`` (row-major float64 samples) and ``prefix.json``."""
    prefix = Path(prefix)
    values = np.ascontiguousarray(chi.values(), dtype="<f8")
    values.tofile(prefix.with_suffix(".bin"))
    meta = dict(d=chi.d, m=chi.m, n=chi.n, N=chi.grid.N, M=chi.grid.M,
                ordering="multiindex, component, column, y_1..y_d, s (row-major, nodes l/N)",
                residual_norm=chi.residual_norm, adjoint=chi.adjoint, reverse_time=chi.reverse_time,
                time_sign=chi.time_sign, tol=chi.tol, coefficient=chi.coefficient.to_json())
    prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return prefix.with_suffix(".bin"), prefix.with_suffix(".json")


def import_correctors(prefix) -> CorrectorSet:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    grid = TorusGrid(meta["d"], meta["N"], meta["M"])
    coef = CoefficientField.from_json(meta["coefficient"])
    shape = (coef.P, meta["n"], meta["n"]) + grid.shape
    values = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8").reshape(shape)
    modes = to_modes(values, grid.d + 1) * grid.trial_mask()
    return CorrectorSet(grid, modes, coef, meta["time_sign"], meta["adjoint"], meta["reverse_time"],
                        meta["tol"], meta["residual_norm"])
