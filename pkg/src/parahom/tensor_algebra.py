"""Multi-indices, periodic coefficient tensors and ellipticity checks.

A coefficient tensor ``A^{ab}_{ij}(y, s)`` is indexed by two multi-indices
``a, b`` of degree ``m`` in ``d`` variables and two component indices
``i, j`` in ``0..n-1``.  It is stored as a band-limited trigonometric
polynomial on the unit space-time torus

.. math::

    A(y, s) = \\sum_k C_k \\, e^{2\\pi i (k_y \\cdot y + k_s s)},

with Hermitian symmetric data ``C_{-k} = conj(C_k)`` so that values are real.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MultiIndex = tuple


def degree(alpha) -> int:
    return int(sum(alpha))


def mfactorial(alpha) -> int:
    return math.prod(math.factorial(a) for a in alpha)


def leq(zeta, gamma) -> bool:
    return all(z <= g for z, g in zip(zeta, gamma))


def madd(a, b) -> tuple:
    return tuple(x + y for x, y in zip(a, b))


def msub(a, b) -> tuple:
    return tuple(x - y for x, y in zip(a, b))


def multiindices_of_degree(d: int, k: int) -> list:
    """All multi-indices of length ``d`` and degree ``k``, lexicographically descending."""
    if k == 0:
        return [(0,) * d]
    out = []
    for cut in itertools.combinations_with_replacement(range(d), k):
        alpha = [0] * d
        for c in cut:
            alpha[c] += 1
        out.append(tuple(alpha))
    return sorted(set(out), reverse=True)


def sub_multiindices(gamma) -> list:
    """All ``zeta <= gamma`` componentwise, descending."""
    return sorted(itertools.product(*[range(g + 1) for g in gamma]), reverse=True)


@dataclass(frozen=True)
class IndexSet:
    d: int
    m: int
    entries: tuple

    @property
    def count(self) -> int:
        return len(self.entries)

    def index(self, alpha) -> int:
        return self.entries.index(tuple(alpha))

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


def enumerate_multiindices(d: int, m: int) -> IndexSet:
    """Degree-``m`` multi-indices in ``d`` variables in canonical order.

    The order is lexicographic descending in the first differing component,
    e.g. ``(2,0), (1,1), (0,2)`` for ``d = m = 2``.
    """
    if d < 1 or m < 1:
        raise ValueError(f"need d >= 1 and m >= 1, got d={d}, m={m}")
    entries = tuple(multiindices_of_degree(d, m))
    assert len(entries) == math.comb(m + d - 1, d - 1)
    return IndexSet(d, m, entries)


def binomial_factor(gamma, zeta) -> int:
    """``gamma! / (zeta! (gamma - zeta)!)`` as an exact integer."""
    if len(gamma) != len(zeta) or not leq(zeta, gamma) or min(zeta, default=0) < 0:
        raise ValueError(f"{zeta} is not <= {gamma} componentwise")
    return math.prod(math.comb(g, z) for g, z in zip(gamma, zeta))


def monomial_symbol(k: np.ndarray, alpha) -> np.ndarray:
    """Fourier symbol ``prod_l (2 pi i k_l)^{alpha_l}`` of ``D^alpha``.

    ``k`` has the spatial wavenumbers along its first axis.
    """
    out = np.ones(k.shape[1:], dtype=complex)
    for l, a in enumerate(alpha):
        if a:
            out = out * (2j * np.pi * k[l]) ** a
    return out


@dataclass(frozen=True)
class CoefficientField:
    """Band-limited periodic coefficient tensor on the space-time torus.

    ``wavenumbers`` has shape ``(K, d+1)`` (last column temporal) and
    ``coefficients`` has shape ``(K, P, P, n, n)`` where ``P`` is the number of
    degree-``m`` multi-indices.
    """

    d: int
    m: int
    n: int
    mu: float
    wavenumbers: np.ndarray
    coefficients: np.ndarray
    index_set: IndexSet = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index_set", enumerate_multiindices(self.d, self.m))
        P = self.index_set.count
        if self.coefficients.shape[1:] != (P, P, self.n, self.n):
            raise ValueError("coefficient array does not match (d, m, n)")
        if self.wavenumbers.shape != (self.coefficients.shape[0], self.d + 1):
            raise ValueError("wavenumber array does not match coefficient array")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        lookup = {tuple(k): c for k, c in zip(self.wavenumbers.tolist(), self.coefficients)}
        for k, c in lookup.items():
            partner = lookup.get(tuple(-x for x in k))
            if partner is None or not np.allclose(partner, np.conj(c), rtol=0, atol=1e-13):
                raise ValueError(f"Fourier data is not Hermitian at mode {k}")
        self.wavenumbers.setflags(write=False)
        self.coefficients.setflags(write=False)

    # construction -------------------------------------------------------

    @classmethod
    def from_modes(cls, d, m, n, mu, modes) -> "CoefficientField":
        """Build from a list of ``{alpha, beta, i, j, k, re, im}`` records.

        Any mode whose conjugate partner ``-k`` is not supplied for the same
        entry is completed as ``conj``.  Indices ``i, j`` are zero-based.
        """
        iset = enumerate_multiindices(d, m)
        P = iset.count
        supplied = {}
        for rec in modes:
            a = iset.index(tuple(rec["alpha"]))
            b = iset.index(tuple(rec["beta"]))
            i, j = int(rec["i"]), int(rec["j"])
            k = tuple(int(x) for x in rec["k"])
            if len(k) != d + 1:
                raise ValueError(f"mode wavenumber {k} must have d+1={d + 1} entries")
            key = (a, b, i, j, k)
            supplied[key] = supplied.get(key, 0j) + complex(rec.get("re", 0.0), rec.get("im", 0.0))
        full = dict(supplied)
        for (a, b, i, j, k), c in supplied.items():
            mk = tuple(-x for x in k)
            if all(x == 0 for x in k):
                if abs(c.imag) > 1e-14:
                    raise ValueError("zero mode must be real")
                full[(a, b, i, j, k)] = complex(c.real)
            elif (a, b, i, j, mk) not in supplied:
                full[(a, b, i, j, mk)] = np.conj(c)
        ks = sorted({key[4] for key in full})
        if not ks:
            ks = [(0,) * (d + 1)]
        pos = {k: r for r, k in enumerate(ks)}
        coef = np.zeros((len(ks), P, P, n, n), dtype=complex)
        for (a, b, i, j, k), c in full.items():
            coef[pos[k], a, b, i, j] = c
        return cls(d, m, n, float(mu), np.array(ks, dtype=int).reshape(-1, d + 1), coef)

    @classmethod
    def constant(cls, tensor, d, m, mu) -> "CoefficientField":
        """Constant tensor given with shape ``(P, P, n, n)`` or ``(P, P)`` for ``n = 1``."""
        t = np.asarray(tensor, dtype=float)
        P = math.comb(m + d - 1, d - 1)
        if t.ndim == 2:
            t = t.reshape(P, P, 1, 1)
        n = t.shape[-1]
        return cls(d, m, n, float(mu), np.zeros((1, d + 1), dtype=int), t[None].astype(complex))

    @classmethod
    def isotropic(cls, d, m, mu, scalar_modes, n=1) -> "CoefficientField":
        """``A^{ab}_{ij} = delta_ab delta_ij a(y, s)`` with ``a`` given as ``[(k, c), ...]``."""
        iset = enumerate_multiindices(d, m)
        modes = []
        for k, c in scalar_modes:
            c = complex(c)
            for alpha in iset:
                for i in range(n):
                    modes.append(dict(alpha=alpha, beta=alpha, i=i, j=i, k=k, re=c.real, im=c.imag))
        return cls.from_modes(d, m, n, mu, modes)

    @classmethod
    def from_json(cls, source) -> "CoefficientField":
        if isinstance(source, (str, Path)):
            source = json.loads(Path(source).read_text())
        return cls.from_modes(source["d"], source["m"], source["n"], source["mu"], source["modes"])

    def to_json(self) -> dict:
        modes = []
        for k, c in zip(self.wavenumbers.tolist(), self.coefficients):
            for a, b, i, j in zip(*np.nonzero(c)):
                v = c[a, b, i, j]
                modes.append(dict(alpha=list(self.index_set.entries[a]), beta=list(self.index_set.entries[b]),
                                  i=int(i), j=int(j), k=k, re=float(v.real), im=float(v.imag)))
        return dict(d=self.d, m=self.m, n=self.n, mu=self.mu, modes=modes)

    # derived fields -----------------------------------------------------

    @property
    def P(self) -> int:
        return self.index_set.count

    def bandwidth(self) -> tuple:
        """Largest |wavenumber| per axis, spatial axes first, temporal last."""
        return tuple(int(x) for x in np.abs(self.wavenumbers).max(axis=0))

    @property
    def time_independent(self) -> bool:
        return bool(np.all(self.wavenumbers[:, -1] == 0))

    def mean(self) -> np.ndarray:
        zero = np.all(self.wavenumbers == 0, axis=1)
        if not zero.any():
            return np.zeros(self.coefficients.shape[1:])
        return self.coefficients[zero][0].real.copy()

    def _replace(self, wavenumbers, coefficients) -> "CoefficientField":
        return CoefficientField(self.d, self.m, self.n, self.mu, np.array(wavenumbers, dtype=int),
                                np.array(coefficients, dtype=complex))

    def adjoint(self) -> "CoefficientField":
        """``A*^{ab}_{ij} = A^{ba}_{ji}``."""
        return self._replace(self.wavenumbers, self.coefficients.transpose(0, 2, 1, 4, 3))

    def scaled(self, c: float) -> "CoefficientField":
        return CoefficientField(self.d, self.m, self.n, min(c * self.mu, self.mu / c),
                                self.wavenumbers.copy(), self.coefficients * c)

    def shifted(self, z, t=0.0) -> "CoefficientField":
        """Coefficient ``A(y + z, s + t)``."""
        shift = np.append(np.asarray(z, dtype=float), t)
        phase = np.exp(2j * np.pi * (self.wavenumbers @ shift))
        return self._replace(self.wavenumbers, self.coefficients * phase[:, None, None, None, None])

    def reflected_time(self, shift: float = 0.0) -> "CoefficientField":
        """Coefficient ``A(y, shift - s)``; ``shift`` is taken mod 1."""
        shift = float(shift) % 1.0
        k = self.wavenumbers.copy()
        phase = np.exp(2j * np.pi * k[:, -1] * shift) if shift else np.ones(len(k))
        k[:, -1] *= -1
        return self._replace(k, self.coefficients * phase[:, None, None, None, None])

    # evaluation ---------------------------------------------------------

    def evaluate(self, y, s) -> np.ndarray:
        """Values at points ``y`` (shape ``(npts, d)`` or ``(npts,)`` for d=1) and ``s``.

        Returns an array of shape ``(P, P, n, n, npts)``.
        """
        y = np.asarray(y, dtype=float).reshape(-1, self.d)
        s = np.broadcast_to(np.asarray(s, dtype=float), (y.shape[0],))
        pts = np.column_stack([y, s])
        phase = np.exp(2j * np.pi * (pts @ self.wavenumbers.T))
        return np.einsum("pk,kabij->abijp", phase, self.coefficients).real

    def sample(self, shape) -> np.ndarray:
        """Values on the uniform torus grid ``l / shape[axis]``, shape ``(P, P, n, n, *shape)``."""
        shape = tuple(shape)
        if len(shape) != self.d + 1:
            raise ValueError("grid shape must have d+1 axes")
        out = np.zeros(self.coefficients.shape[1:] + shape, dtype=complex)
        axes = [np.arange(N) / N for N in shape]
        for k, c in zip(self.wavenumbers, self.coefficients):
            wave = np.ones(shape, dtype=complex)
            for ax, (kk, x) in enumerate(zip(k, axes)):
                if kk:
                    sh = [1] * len(shape)
                    sh[ax] = shape[ax]
                    wave = wave * np.exp(2j * np.pi * kk * x).reshape(sh)
            out += c.reshape(c.shape + (1,) * len(shape)) * wave
        return out.real

    def form_matrix(self, values: np.ndarray) -> np.ndarray:
        """Reshape ``(P, P, n, n, ...)`` values into ``(..., P*n, P*n)`` Legendre matrices."""
        P, n = self.P, self.n
        v = np.moveaxis(values.reshape((P, P, n, n, -1)), -1, 0)
        return v.transpose(0, 1, 3, 2, 4).reshape(-1, P * n, P * n)


@dataclass
class EllipticityCertificate:
    form_min: float
    max_norm: float
    mu: float
    certified: bool
    grid_res: int
    trial_count: int
    witness: dict | None = None
    note: str = "certificate holds on the sampled lattice only"


def _legendre_scan(mats, mu, trial_count, seed, points=None, slack=1e-10):
    dim = mats.shape[-1]
    rng = np.random.default_rng(seed)
    trials = rng.standard_normal((trial_count, dim))
    trials /= np.linalg.norm(trials, axis=1, keepdims=True)
    xi = np.vstack([np.eye(dim), trials])
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    # the exact minimiser per point is added to the sampled directions
    w, v = np.linalg.eigh(sym)
    forms = np.einsum("ta,pab,tb->pt", xi, sym, xi)
    form_min_sampled = forms.min(axis=1)
    form_min = np.minimum(form_min_sampled, w[:, 0])
    norms = np.linalg.norm(mats, ord=2, axis=(-2, -1))
    p = int(np.argmin(form_min))
    fmin, nmax = float(form_min[p]), float(norms.max())
    # rounding slack on both bounds
    certified = fmin >= mu - slack and nmax <= 1.0 / mu + slack
    witness = None
    if not certified:
        if fmin < mu - slack:
            best = v[p, :, 0] if w[p, 0] <= form_min_sampled[p] else xi[int(np.argmin(forms[p]))]
            witness = dict(kind="form", point_index=p, xi=best.tolist(), value=fmin)
        else:
            q = int(np.argmax(norms))
            witness = dict(kind="magnitude", point_index=q, value=float(norms[q]))
        if points is not None:
            witness["point"] = np.asarray(points[witness["point_index"]]).tolist()
    return fmin, nmax, certified, witness


def check_ellipticity(A: CoefficientField, grid_res: int = 32, trial_count: int = 64,
                      seed: int = 0) -> EllipticityCertificate:
    """Sample the Legendre form on a ``grid_res^{d+1}`` lattice of the torus.

    The form is minimised over all coordinate directions, ``trial_count``
    random unit directions and the smallest eigenvector of the symmetric part
    at each point.  The magnitude ``|A|`` is the spectral norm of the
    ``(P n) x (P n)`` matrix.
    """
    bw = max(A.bandwidth())
    if grid_res < 2 * bw:
        raise ValueError(f"grid_res={grid_res} below twice the bandwidth {bw}")
    shape = (grid_res,) * (A.d + 1)
    mats = A.form_matrix(A.sample(shape))
    axes = [np.arange(grid_res) / grid_res] * (A.d + 1)
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, A.d + 1)
    fmin, nmax, ok, witness = _legendre_scan(mats, A.mu, trial_count, seed, points)
    return EllipticityCertificate(fmin, nmax, A.mu, ok, grid_res, trial_count, witness)
