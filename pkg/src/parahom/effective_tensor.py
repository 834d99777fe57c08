"""Homogenized tensor from primal or adjoint correctors.

For degree-``m`` multi-indices the polynomial test functions ``y^b / b!`` have
``D^e (y^b / b!) = delta_{eb}``, so both formulas reduce to cell averages of
corrector-gradient contractions.  Averages of products with the band-limited
coefficient are read off exactly from Fourier data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cell_solver import CorrectorSet, derivative_symbols
from .tensor_algebra import CoefficientField, EllipticityCertificate, _legendre_scan, enumerate_multiindices


@dataclass(frozen=True)
class EffectiveTensor:
    d: int
    m: int
    n: int
    abar: np.ndarray
    mu0: float
    provenance: str

    @property
    def index_set(self):
        return enumerate_multiindices(self.d, self.m)

    @property
    def P(self):
        return self.index_set.count

    def matrix(self) -> np.ndarray:
        P, n = self.P, self.n
        return self.abar.transpose(0, 2, 1, 3).reshape(P * n, P * n)

    def transpose(self) -> "EffectiveTensor":
        return EffectiveTensor(self.d, self.m, self.n, self.abar.transpose(1, 0, 3, 2).copy(), self.mu0,
                               self.provenance + "+transpose")

    def as_coefficient(self, mu: float) -> CoefficientField:
        return CoefficientField.constant(self.abar, self.d, self.m, mu)

    def to_json(self) -> dict:
        entries = []
        iset = self.index_set.entries
        for a, b, i, j in np.ndindex(self.abar.shape):
            entries.append(dict(alpha=list(iset[a]), beta=list(iset[b]), i=i, j=j, value=float(self.abar[a, b, i, j])))
        return dict(d=self.d, m=self.m, n=self.n, entries=entries, mu0=self.mu0, provenance=self.provenance)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, source) -> "EffectiveTensor":
        if isinstance(source, (str, Path)):
            source = json.loads(Path(source).read_text())
        d, m, n = source["d"], source["m"], source["n"]
        iset = enumerate_multiindices(d, m)
        abar = np.zeros((iset.count, iset.count, n, n))
        for e in source["entries"]:
            abar[iset.index(e["alpha"]), iset.index(e["beta"]), e["i"], e["j"]] = e["value"]
        return cls(d, m, n, abar, source["mu0"], source["provenance"])


def _same_field(a: CoefficientField, b: CoefficientField) -> bool:
    if a.wavenumbers.shape != b.wavenumbers.shape:
        return False
    ia = np.lexsort(a.wavenumbers.T[::-1])
    ib = np.lexsort(b.wavenumbers.T[::-1])
    return (np.array_equal(a.wavenumbers[ia], b.wavenumbers[ib])
            and np.allclose(a.coefficients[ia], b.coefficients[ib], rtol=0, atol=1e-15))


def _corrected_average(A: CoefficientField, chi: CorrectorSet) -> np.ndarray:
    grid = chi.grid
    grid.check_resolves(A)
    sym = derivative_symbols(grid, A.index_set)
    Dchi = sym[:, None, None, None] * chi.modes[None]   # (e, b, l, j, ...)
    total = A.mean().astype(complex)
    for k, c in zip(A.wavenumbers, A.coefficients):
        pos = tuple(int(-x) % n for x, n in zip(k, grid.shape))
        total = total + np.einsum("aeil,eblj->abij", c, Dchi[(Ellipsis,) + pos])
    return total.real


def _upper_bound(abar) -> float:
    P, n = abar.shape[0], abar.shape[2]
    return float(np.linalg.norm(abar.transpose(0, 2, 1, 3).reshape(P * n, P * n), 2))


def compute_abar(A: CoefficientField, chi: CorrectorSet) -> EffectiveTensor:
    """``int A^{ab}_{ij} + sum_g A^{ag}_{il} D^g chi^b_{lj}`` from the zero Fourier mode."""
    if not _same_field(A, chi.coefficient):
        raise ValueError("correctors were not solved for this coefficient")
    abar = _corrected_average(A, chi)
    return EffectiveTensor(A.d, A.m, A.n, abar, _upper_bound(abar), "primal")


def compute_abar_dual(A: CoefficientField, chi_star: CorrectorSet) -> EffectiveTensor:
    """Effective tensor from adjoint correctors.

    Testing the adjoint cell problem against polynomials gives
    ``Abar^{ag}_{ij} = int A*^{ga}_{ji} + sum_e A*^{ge}_{jl} D^e chi*^a_{li}``,
    i.e. the transpose of the primal average built from ``(A*, chi*)``.
    """
    if not chi_star.adjoint or chi_star.reverse_time:
        raise ValueError("expected correctors of the adjoint cell problem")
    Astar = A.adjoint()
    if not _same_field(Astar, chi_star.coefficient):
        raise ValueError("adjoint correctors were not solved for this coefficient")
    abar = _corrected_average(Astar, chi_star).transpose(1, 0, 3, 2)
    return EffectiveTensor(A.d, A.m, A.n, np.ascontiguousarray(abar), _upper_bound(abar), "dual")


def certify_effective_ellipticity(abar: EffectiveTensor, mu: float, trial_count: int = 256,
                                  seed: int = 0, slack: float = 1e-10) -> EllipticityCertificate:
    """Minimum of the Legendre form of ``abar`` over coordinate, random and extremal unit vectors."""
    if not np.all(np.isfinite(abar.abar)):
        raise ValueError("effective tensor has non-finite entries")
    mats = abar.matrix()[None]
    fmin, nmax, _, witness = _legendre_scan(mats, mu, trial_count, seed)
    ok = fmin >= mu - slack
    return EllipticityCertificate(fmin, nmax, mu, ok, 1, trial_count, None if ok else witness,
                                  note="constant tensor; upper bound reported, not certified")
