"""Parabolic mollification, boundary-layer cutoffs and layer indicators.

``S~_eps`` convolves in space with ``phi_2`` scaled to width ``eps``; ``S_eps``
adds a temporal convolution with ``phi_1`` scaled to width ``eps^{2m}``.
Both kernels are the bump ``c exp(-1 / (1 - 4|y|^2))`` on ``|y| < 1/2``.

Two evaluation routes are provided.  The quadrature route smooths any
vectorised callable ``f(x, t)``; the matrix route maps finite element degrees
of freedom (space) and time levels to smoothed values at arbitrary targets,
which is what the two-scale expansion consumes.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import sympy
from scipy.interpolate import CubicSpline

_NQ_MASS = 160


def _bump_derivatives(order):
    s = sympy.symbols("s")
    expr = sympy.exp(-1 / (1 - 4 * s ** 2))
    return sympy.lambdify(s, sympy.diff(expr, s, order), "numpy")


@lru_cache(maxsize=None)
def _bump(order):
    fn = _bump_derivatives(order)

    def evaluate(s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        inside = np.abs(s) < 0.5 - 1e-12
        if np.any(inside):
            with np.errstate(over="ignore", under="ignore"):
                out[inside] = fn(s[inside])
        return out

    return evaluate


def _gauss(n, a=-0.5, b=0.5):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


class Mollifier:
    """Normalised bumps ``phi1`` on the line and ``phi2`` on ``R^d`` with quadrature tables."""

    def __init__(self, d: int = 1, nq: int = 96, nq_mass: int = _NQ_MASS):
        self.d = d
        x, w = _gauss(nq_mass)
        self.c1 = 1.0 / float(np.sum(w * _bump(0)(x)))
        if d == 1:
            self.c2 = self.c1
        elif d == 2:
            r, wr = _gauss(nq_mass, 0.0, 0.5)
            self.c2 = 1.0 / float(2 * np.pi * np.sum(wr * r * _bump(0)(r)))
        else:
            raise ValueError("mollifiers are provided for d <= 2")
        self.nq = nq
        x1, w1 = _gauss(nq)
        self.t_nodes, self.t_weights = x1, w1 * self.phi1(x1)
        if d == 1:
            self.y_nodes, self.y_weights = x1[:, None], self.t_weights.copy()
        else:
            # polar rule: Gauss in the radius, trapezoid in the angle
            r, wr = _gauss(nq, 0.0, 0.5)
            th = 2 * np.pi * np.arange(2 * nq) / (2 * nq)
            R, TH = np.meshgrid(r, th, indexing="ij")
            self.y_nodes = np.stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()], axis=1)
            self.y_weights = (np.outer(wr * r, np.full(len(th), 2 * np.pi / len(th))).ravel()
                              * self.phi2(self.y_nodes))
        self._psi = {}

    def phi1(self, s, order: int = 0):
        return self.c1 * _bump(order)(s)

    def phi2(self, y):
        y = np.asarray(y, dtype=float)
        if self.d == 1:
            return self.phi1(y.reshape(-1))
        r = np.sqrt(np.sum(y.reshape(-1, self.d) ** 2, axis=1))
        return self.c2 * _bump(0)(r)

    def mass_defects(self) -> tuple:
        return abs(self.t_weights.sum() - 1.0), abs(self.y_weights.sum() - 1.0)

    def cdf1(self, z):
        """``int_{-1/2}^{z} phi1``; exactly 0 below ``-1/2`` and 1 above ``1/2``."""
        z = np.asarray(z, dtype=float)
        out = np.where(z >= 0.5, 1.0, 0.0)
        mid = (z > -0.5) & (z < 0.5)
        if np.any(mid):
            zm = z[mid]
            x, w = np.polynomial.legendre.leggauss(_NQ_MASS)
            nodes = -0.5 + np.outer(zm + 0.5, 0.5 * (x + 1))
            out[mid] = 0.5 * (zm + 0.5) * np.sum(w * self.phi1(nodes), axis=1)
        return np.clip(out, 0.0, 1.0)

    def psi(self, order: int = 0):
        """``(phi1^{(order)} * phi1)`` on ``(-1, 1)``, the profile of a double smoothing."""
        if order not in self._psi:
            y = np.linspace(-1.0, 1.0, 16385)
            # integrate over the overlap of the two supports, derivatives split between factors
            a, b = np.maximum(-0.5, y - 0.5), np.minimum(0.5, y + 0.5)
            x, w = np.polynomial.legendre.leggauss(240)
            z = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * x[None]
            left, right = order // 2, order - order // 2
            vals = 0.5 * (b - a) * np.sum(w * self.phi1(z, left) * self.phi1(y[:, None] - z, right), axis=1)
            spline = CubicSpline(y, vals, bc_type="clamped")

            def evaluate(s, _spline=spline):
                s = np.asarray(s, dtype=float)
                return np.where(np.abs(s) < 1.0, _spline(np.clip(s, -1.0, 1.0)), 0.0)

            self._psi[order] = evaluate
        return self._psi[order]


@lru_cache(maxsize=None)
def default_mollifier(d: int = 1) -> Mollifier:
    return Mollifier(d)


# quadrature route ------------------------------------------------------------------

@dataclass
class SampledField:
    """Values on explicit space points and times, shape ``(len(times), npts)``."""

    points: np.ndarray
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)


def _zero_extended(f, domain, T):
    if domain is None and T is None:
        return f

    def g(x, t):
        v = np.asarray(f(x, t), dtype=float)
        mask = np.ones(x.shape[0], dtype=bool)
        if domain is not None:
            for k, (a, b) in enumerate(domain.bounds):
                mask &= (x[:, k] >= a) & (x[:, k] <= b)
        if T is not None and not (0.0 <= t <= T):
            mask[:] = False
        return np.where(mask, v, 0.0)

    return g


def _check_scale(eps, domain):
    if domain is not None and eps > 0.5 * min(domain.lengths):
        warnings.warn(f"smoothing width {eps} is comparable to the domain size", RuntimeWarning, stacklevel=3)


def apply_Stilde(f, eps, x, t, domain=None, T=None, mollifier=None) -> SampledField:
    """``int phi2(y) f(x - eps y, t) dy`` at points ``x`` for each time in ``t``."""
    mol = mollifier or default_mollifier(np.asarray(x).reshape(len(np.atleast_1d(x)), -1).shape[1]
                                         if np.ndim(x) > 1 else 1)
    _check_scale(eps, domain)
    x = np.asarray(x, dtype=float).reshape(-1, mol.d)
    g = _zero_extended(f, domain, T)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((len(times), len(x)))
    for n, tn in enumerate(times):
        for y, w in zip(mol.y_nodes, mol.y_weights):
            out[n] += w * g(x - eps * y, tn)
    return SampledField(x, times, out, dict(op="Stilde", eps=eps, extension="zero" if domain or T else "none"))


def apply_S(f, eps, m, x, t, domain=None, T=None, mollifier=None) -> SampledField:
    """Temporal average of ``S~_eps f`` with ``phi1`` scaled to ``eps^{2m}``."""
    mol = mollifier or default_mollifier(1 if np.ndim(x) <= 1 else np.asarray(x).shape[1])
    _check_scale(eps, domain)
    x = np.asarray(x, dtype=float).reshape(-1, mol.d)
    g = _zero_extended(f, domain, T)
    tau = eps ** (2 * m)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((len(times), len(x)))
    for n, tn in enumerate(times):
        for s, ws in zip(mol.t_nodes, mol.t_weights):
            inner = np.zeros(len(x))
            for y, w in zip(mol.y_nodes, mol.y_weights):
                inner += w * g(x - eps * y, tn - tau * s)
            out[n] += ws * inner
    return SampledField(x, times, out, dict(op="S", eps=eps, m=m, extension="zero" if domain or T else "none"))


def apply_S_direct(f, eps, m, x, t, nq=48, domain=None, T=None, mollifier=None) -> SampledField:
    """The same space-time convolution as one product Gauss rule of a different order."""
    mol = mollifier or default_mollifier(1 if np.ndim(x) <= 1 else np.asarray(x).shape[1])
    x = np.asarray(x, dtype=float).reshape(-1, mol.d)
    g = _zero_extended(f, domain, T)
    tau = eps ** (2 * m)
    z, w = _gauss(nq)
    grids = np.meshgrid(*([z] * (mol.d + 1)), indexing="ij")
    nodes = np.stack([gr.ravel() for gr in grids], axis=1)
    wts = np.prod(np.meshgrid(*([w] * (mol.d + 1)), indexing="ij"), axis=0).ravel()
    kern = mol.phi1(nodes[:, -1]) * mol.phi2(nodes[:, :-1]) * wts
    keep = kern > 0
    nodes, kern = nodes[keep], kern[keep]
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((len(times), len(x)))
    for n, tn in enumerate(times):
        for node, k in zip(nodes, kern):
            out[n] += k * g(x - eps * node[:-1], tn - tau * node[-1])
    return SampledField(x, times, out, dict(op="S_direct", eps=eps, m=m))


def apply_S2(f, eps, m, x, t, nq=96, space_order=0, time_order=0, domain=None, T=None,
             mollifier=None) -> SampledField:
    """``d_x^j d_t^k S_eps(S_eps f)`` for ``d = 1`` through the double-smoothing profile."""
    mol = mollifier or default_mollifier(1)
    if mol.d != 1:
        raise NotImplementedError("double smoothing profiles are tabulated for d = 1")
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    g = _zero_extended(f, domain, T)
    tau = eps ** (2 * m)
    z, w = _gauss(nq, -1.0, 1.0)
    ky = w * mol.psi(space_order)(z) / eps ** space_order
    ks = w * mol.psi(time_order)(z) / tau ** time_order
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((len(times), len(x)))
    for n, tn in enumerate(times):
        for s, ws in zip(z, ks):
            if ws == 0:
                continue
            for y, wy in zip(z, ky):
                if wy != 0:
                    out[n] += ws * wy * g(x - eps * y, tn - tau * s)
    return SampledField(x, times, out, dict(op="S2", eps=eps, m=m, orders=(space_order, time_order)))


# matrix route (d = 1) ---------------------------------------------------------------

def space_smoothing_matrix(space, targets, eps, source_order=0, out_order=0, nq=16, mollifier=None):
    """Sparse map from degrees of freedom to ``d^j/dx^j S~S~(d^r u/dx^r)`` at ``targets``.

    Uses the double-smoothing profile, so one application equals the spatial
    part of ``S_eps`` applied twice; ``u`` is extended by zero outside the mesh.
    """
    if getattr(space, "d", 1) != 1:
        raise NotImplementedError("matrix smoothing is implemented for interval meshes")
    mol = mollifier or default_mollifier(1)
    prof = mol.psi(out_order)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    xi, w = _gauss(nq, 0.0, 1.0)
    nodes, ne = space.nodes, space.ne
    lo = np.searchsorted(nodes, targets - eps, side="right") - 1
    hi = np.searchsorted(nodes, targets + eps, side="left")
    lo, hi = np.clip(lo, 0, ne - 1), np.clip(hi, 1, ne)
    rows, cols, vals = [], [], []
    width = int((hi - lo).max())
    for off in range(width):
        e = lo + off
        valid = e < hi
        if not np.any(valid):
            continue
        r = np.flatnonzero(valid)
        ev = e[valid]
        h = space.h[ev]
        z = nodes[ev][:, None] + h[:, None] * xi[None]                      # (nr, nq)
        kern = prof((targets[r][:, None] - z) / eps) / eps ** (1 + out_order)
        basis = space._ref_basis(np.broadcast_to(xi, z.shape), source_order, h[:, None])  # (nr, nq, nloc)
        local = np.einsum("rq,q,rqa->ra", kern * h[:, None], w, basis)
        rows.append(np.repeat(r, local.shape[1]))
        cols.append(space.conn[ev].ravel())
        vals.append(local.ravel())
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(targets), space.n_dofs))
    M.sum_duplicates()
    return M


def time_smoothing_matrix(times, targets, tau, out_order=0, nq=6, mollifier=None):
    """Sparse map from time levels to ``d^k/dt^k`` of the doubly smoothed piecewise linear interpolant."""
    mol = mollifier or default_mollifier(1)
    prof = mol.psi(out_order)
    times = np.asarray(times, dtype=float)
    targets = np.asarray(targets, dtype=float)
    xi, w = _gauss(nq, 0.0, 1.0)
    ni = len(times) - 1
    lo = np.clip(np.searchsorted(times, targets - tau, side="right") - 1, 0, ni - 1)
    hi = np.clip(np.searchsorted(times, targets + tau, side="left"), 1, ni)
    rows, cols, vals = [], [], []
    for off in range(int((hi - lo).max())):
        e = lo + off
        valid = e < hi
        if not np.any(valid):
            continue
        r = np.flatnonzero(valid)
        ev = e[valid]
        dt = times[ev + 1] - times[ev]
        s = times[ev][:, None] + dt[:, None] * xi[None]
        kern = prof((targets[r][:, None] - s) / tau) / tau ** (1 + out_order) * dt[:, None] * w[None]
        left = np.sum(kern * (1 - xi), axis=1)
        right = np.sum(kern * xi, axis=1)
        rows += [r, r]
        cols += [ev, ev + 1]
        vals += [left, right]
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(targets), len(times)))
    M.sum_duplicates()
    return M


# diagnostics ---------------------------------------------------------------------

def _multiplier(mol, xi):
    """``int phi1(y) cos(xi y) dy`` (the symbol of the 1D bump, real by symmetry)."""
    z, w = _gauss(_NQ_MASS)
    return float(np.sum(w * mol.phi1(z) * np.cos(xi * z)))


def empirical_smoothing_bounds(eps_list, m: int = 1, path=None, mollifier=None, n_samples: int = 32) -> list:
    """Ratio tables for the smoothing estimates on ``f = sin(2 pi x) sin(2 pi t)``.

    Left sides are computed by quadrature of the kernel-derivative convolution
    and sampled over the periodic unit cell; right sides use the closed-form
    norms of ``f``.  The negative norm of ``d_t f`` is the ``H^{1-m}`` norm
    with weight ``(1 + |2 pi k|^2)^{(1-m)/2}``.
    """
    mol = mollifier or default_mollifier(1)
    two_pi = 2 * np.pi
    grid = (np.arange(n_samples) + 0.5) / n_samples
    X, Tt = np.meshgrid(grid, grid, indexing="ij")
    z, w = mol.t_nodes, mol.t_weights
    zq, wq = _gauss(_NQ_MASS)
    fnorm = 0.5
    dtf_neg = np.pi * (1 + two_pi ** 2) ** ((1 - m) / 2)

    def l2(v):
        return float(np.sqrt(np.mean(v ** 2)))

    rows = []
    for eps in eps_list:
        tau = eps ** (2 * m)
        # S f and its derivatives by direct quadrature of the product kernel
        def smoothed(jx, jt):
            kx = wq * mol.phi1(zq, jx) / eps ** jx
            kt = wq * mol.phi1(zq, jt) / tau ** jt
            sx = np.sin(two_pi * (X[..., None] - eps * zq)) @ kx
            st = np.sin(two_pi * (Tt[..., None] - tau * zq)) @ kt
            return sx * st
        lhs = l2(smoothed(0, 1))
        rows.append(dict(eps=eps, check="dt_S", ell=0, lhs=lhs, rhs=eps ** (-2 * m) * fnorm,
                         ratio=lhs / (eps ** (-2 * m) * fnorm)))
        for ell in range(1, m + 1):
            lhs = l2(smoothed(ell, 0))
            rhs = eps ** (-ell) * fnorm
            rows.append(dict(eps=eps, check="grad_S", ell=ell, lhs=lhs, rhs=rhs, ratio=lhs / rhs))
            # S(d^ell f) - d^ell f, d^ell f = (2 pi)^ell sin(2 pi x + ell pi / 2) sin(2 pi t)
            ph = ell * np.pi / 2
            gx = np.sin(two_pi * (X[..., None] - eps * z) + ph) @ w
            gt = np.sin(two_pi * (Tt[..., None] - tau * z)) @ w
            diff = two_pi ** ell * (gx * gt - np.sin(two_pi * X + ph) * np.sin(two_pi * Tt))
            lhs = l2(diff)
            rhs = eps * two_pi ** (ell + 1) * fnorm + eps ** (m - ell + 1) * dtf_neg
            rows.append(dict(eps=eps, check="S_grad_minus_grad", ell=ell, lhs=lhs, rhs=rhs, ratio=lhs / rhs))
    if path is not None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["eps", "check", "ell", "lhs", "rhs", "ratio"])
            wr.writeheader()
            for r in rows:
                wr.writerow({k: (f"{v:.12e}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def smoothing_multiplier(eps, k, mollifier=None):
    """Symbol of ``S~_eps`` at the frequency ``2 pi k`` in one dimension."""
    return _multiplier(mollifier or default_mollifier(1), 2 * np.pi * k * eps)


# cutoffs --------------------------------------------------------------------------

class CutoffError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryLayer:
    """``Omega_{k eps}`` and the cylinder layer ``Omega_{T, k eps}``."""

    domain: object
    T: float
    eps: float
    m: int
    k: float

    def spatial(self, x) -> np.ndarray:
        return self.domain.distance_to_boundary(x) <= self.k * self.eps

    def cylinder(self, x, t) -> np.ndarray:
        """Boolean array ``(len(t), npts)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tau = self.k * self.eps ** (2 * self.m)
        near_t = (t <= tau) | (t >= self.T - tau)
        return self.spatial(x)[None, :] | near_t[:, None]


@dataclass(frozen=True)
class CutoffPair:
    """Smooth cutoffs ``rho`` (space) and ``varrho`` (time).

    ``rho`` vanishes on ``Omega_{inner eps}`` and equals one off
    ``Omega_{outer eps}``; ``varrho`` does the same with ``eps^{2m}`` at both
    temporal ends.
    """

    domain: object
    T: float
    eps: float
    m: int
    inner: float = 6.0
    outer: float = 8.0
    mollifier: Mollifier | None = None
    bounds: dict = field(default_factory=dict)

    @property
    def _mol(self):
        return self.mollifier or default_mollifier(1)

    @property
    def _center(self):
        return 0.5 * (self.inner + self.outer)

    @property
    def _width(self):
        return 0.5 * (self.outer - self.inner)

    def _profile(self, a, b, x, scale, order):
        """Mollified indicator of ``[a + c scale, b - c scale]`` and its derivatives."""
        c, w = self._center * scale, self._width * scale
        zl, zr = (x - a - c) / w, (b - c - x) / w
        if order == 0:
            return self._mol.cdf1(zl) + self._mol.cdf1(zr) - 1.0
        k = order - 1
        return (self._mol.phi1(zl, k) + (-1) ** order * self._mol.phi1(zr, k)) / w ** order

    def rho(self, x, alpha=None) -> np.ndarray:
        d = self.domain.d
        x = np.asarray(x, dtype=float).reshape(-1, d)
        alpha = (0,) * d if alpha is None else tuple(alpha)
        out = np.ones(x.shape[0])
        for k, (a, b) in enumerate(self.domain.bounds):
            out = out * self._profile(a, b, x[:, k], self.eps, alpha[k])
        return out

    def varrho(self, t, order=0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self._profile(0.0, self.T, t, self.eps ** (2 * self.m), order)

    def layer(self, k) -> BoundaryLayer:
        return BoundaryLayer(self.domain, self.T, self.eps, self.m, k)


def build_cutoffs(domain, T, eps, m, inner=6.0, outer=8.0, n_samples=4001, mollifier=None) -> CutoffPair:
    """Cutoffs with layer multipliers ``inner < outer`` and sampled bound checks.

    Feasibility requires ``2 outer eps`` below the shortest side and
    ``2 outer eps^{2m} < T``.
    """
    if not 0 < inner < outer:
        raise CutoffError("need 0 < inner < outer")
    if 2 * outer * eps >= min(domain.lengths):
        raise CutoffError(f"eps={eps} too large: {2 * outer}*eps must be below the domain size {min(domain.lengths)}")
    if 2 * outer * eps ** (2 * m) >= T:
        raise CutoffError(f"eps={eps} too large: {2 * outer}*eps^{2 * m} must be below T={T}")
    cut = CutoffPair(domain, T, eps, m, float(inner), float(outer), mollifier)
    tau = eps ** (2 * m)
    t = np.linspace(0.0, T, n_samples)
    vr = cut.varrho(t)
    bounds = dict(varrho_range=(float(vr.min()), float(vr.max())),
                  varrho_dt_scaled=float(np.max(np.abs(cut.varrho(t, 1))) * tau))
    axes = [np.linspace(a, b, n_samples if domain.d == 1 else 401) for a, b in domain.bounds]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    r = cut.rho(pts)
    dist = domain.distance_to_boundary(pts)
    bounds["rho_range"] = (float(r.min()), float(r.max()))
    bounds["sandwich"] = bool(np.all(r[dist <= inner * eps] == 0.0) and np.all(r[dist >= outer * eps] == 1.0)
                              and r.min() >= 0.0 and r.max() <= 1.0)
    tdist = np.minimum(t, T - t)
    bounds["time_sandwich"] = bool(np.all(vr[tdist <= inner * tau] == 0.0) and np.all(vr[tdist >= outer * tau] == 1.0))
    for k in range(1, m + 1):
        worst = 0.0
        for j in range(domain.d):
            alpha = tuple(k if i == j else 0 for i in range(domain.d))
            worst = max(worst, float(np.max(np.abs(cut.rho(pts, alpha)))) * eps ** k)
        bounds[f"rho_D{k}_scaled"] = worst
    object.__setattr__(cut, "bounds", bounds)
    if not (bounds["sandwich"] and bounds["time_sandwich"]):
        raise CutoffError("sampled cutoff violates its support bounds")
    return cut
