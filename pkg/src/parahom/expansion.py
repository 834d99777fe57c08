"""Two-scale expansions around the homogenized solution and their error functionals.

Every field is evaluated at the element quadrature points of the fine-scale
mesh and at every time level, in chunks of time levels so that memory stays
bounded.  Rescaled torus fields are summed as exact trigonometric series;
smoothed derivatives of ``u_0`` come from the double-smoothing matrices and
cutoff derivatives are analytic.

The layers of ``w`` (one space dimension, scalar equations) are

* ``u_eps - u_0``
* ``-eps^m chi_eps K(D^m u_0)``
* ``(-1)^{m+1} sum_z C(m, z) eps^{2m-z} (D^z flux^{m, time})_eps D^{m-z} K(D^m u_0)``
* ``(-1)^m eps^{2m} curlyB_eps D^m K(D^m u_0)``

with ``K(g) = rho varrho S^2(g)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .cell_solver import CorrectorSet
from .effective_tensor import EffectiveTensor
from .flux_correctors import FluxData, temporal_series
from .pde_solvers import SpaceTimeField
from .smoothing import CutoffPair, space_smoothing_matrix, time_smoothing_matrix
from .tensor_algebra import CoefficientField

LAYERS = ("u_diff", "chi", "flux", "curlyB")


class RescaledField:
    """``f(x / eps, t / eps^{2m})`` for torus Fourier data ``modes`` with axes ``(..., *space, time)``.

    Time phases repeat on uniform time grids, so the series is summed once
    per distinct phase.
    """

    def __init__(self, modes, eps, m, d=1):
        self.modes = np.asarray(modes)
        self.eps, self.m, self.d = eps, m, d
        gshape = self.modes.shape[-(d + 1):]
        self.lead = self.modes.shape[:-(d + 1)]
        self.N, self.M = gshape[:-1], gshape[-1]
        ks = [np.fft.fftfreq(n, 1.0 / n).round() for n in self.N]
        self.ky = np.stack([g.ravel() for g in np.meshgrid(*ks, indexing="ij")], axis=1)
        self.ks = np.fft.fftfreq(self.M, 1.0 / self.M).round()
        self.flat = self.modes.reshape(self.lead + (len(self.ky), self.M))

    @staticmethod
    def phases(t, tau):
        s = np.mod(np.asarray(t, dtype=float) / tau, 1.0)
        key = np.round(s * 1e10).astype(np.int64) % 10 ** 10
        uniq, inv = np.unique(key, return_inverse=True)
        return uniq / 1e10, inv

    def evaluate(self, x, t, nu=0, time_derivative=0) -> np.ndarray:
        """Values of ``(D_y^nu d_s^k f)(x / eps, t / eps^{2m})``, shape ``(..., len(t), npts)``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        nu = (nu,) if np.isscalar(nu) else tuple(nu)
        sym = np.prod([(2j * np.pi * self.ky[:, i]) ** nu[i] for i in range(self.d)], axis=0)
        tau = self.eps ** (2 * self.m)
        uniq, inv = self.phases(t, tau)
        Es = np.exp(2j * np.pi * np.outer(self.ks, uniq)) * ((2j * np.pi * self.ks) ** time_derivative)[:, None]
        Ey = np.exp(2j * np.pi * (self.ky @ (x / self.eps).T))
        part = np.einsum("...ys,su->...yu", self.flat * sym[:, None], Es)
        vals = np.einsum("...yu,yp->...up", part, Ey).real
        return vals[..., inv, :]


def _trapezoid_weights(times):
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


@dataclass
class ExpansionField:
    """Lazily evaluated ``varpi``, ``w`` or ``Phi`` on quadrature points of the fine mesh.

    ``u_eps`` and ``u0`` are forward-time fields on the same space and time
    levels (for ``Phi`` they are the time-reversed adjoint solutions).
    """

    which: str
    u_eps: SpaceTimeField
    u0: SpaceTimeField
    chi: CorrectorSet
    fd: FluxData | None
    eps: float
    cutoffs: CutoffPair
    chunk: int = 1024
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        space = self.u_eps.space
        if space.d != 1 or self.chi.n != 1:
            raise NotImplementedError("expansions are assembled for scalar equations in one space dimension")
        if self.u0.space is not space and self.u0.values.shape != self.u_eps.values.shape:
            raise ValueError("u_eps and u0 must share the mesh")
        if self.which != "varpi" and self.fd is None:
            raise ValueError("flux data required beyond varpi")
        self.m = self.chi.m
        self.space = space
        self.times = self.u_eps.times
        self.points = space.quad_points.reshape(-1)
        self.weights = space.quad_weights.reshape(-1)
        self.tw = _trapezoid_weights(self.times)
        m = self.m
        self.tau = self.eps ** (2 * m)
        self._E = [space.eval_matrix(self.points, (j,)) for j in range(m + 1)]
        max_k = 2 * m + (1 if self.which != "varpi" else 0)
        self._X = [space_smoothing_matrix(space, self.points, self.eps, m, j) for j in range(max_k + 1)]
        self._T0 = time_smoothing_matrix(self.times, self.times, self.tau, 0).tocsr()
        self._T1 = time_smoothing_matrix(self.times, self.times, self.tau, 1).tocsr()
        self._rho = [self.cutoffs.rho(self.points[:, None], (j,)) for j in range(max_k + 1)]
        self.chi_f = RescaledField(self.chi.modes[0, 0, 0], self.eps, m)
        if self.fd is not None:
            P = self.fd.P
            self.flux_tb = RescaledField(self.fd.flux[0, P, 0, 0, 0], self.eps, m)     # flux^{m, time, m}
            self.flux_bt = RescaledField(self.fd.flux[P, 0, 0, 0, 0], self.eps, m)     # flux^{time, m, m}
            self.flux_ss = RescaledField(self.fd.flux[0, 0, 0, 0, 0], self.eps, m)
            self.curlyB = self.fd.curlyB[0, 0, 0, 0]

    # building blocks ----------------------------------------------------------------

    def _window(self, lo, hi):
        a = int(max(0, np.searchsorted(self.times, self.times[lo] - self.tau, side="left") - 1))
        b = int(min(len(self.times), np.searchsorted(self.times, self.times[hi - 1] + self.tau, side="right") + 1))
        return a, b

    def smoothed(self, lo, hi, orders):
        """``D^j S^2(D^m u_0)`` for ``j`` in ``orders`` and ``d_t S^2(D^m u_0)`` (key ``"t"``)."""
        a, b = self._window(lo, hi)
        U = self.u0.values[a:b]
        T0 = self._T0[lo:hi, a:b]
        out = {j: T0 @ (U @ self._X[j].T) for j in orders}
        out["t"] = self._T1[lo:hi, a:b] @ (U @ self._X[0].T)
        return out

    def K(self, lo, hi, orders):
        """``D^j K(D^m u_0)`` for ``j`` in ``orders`` and ``d_t K`` (key ``"t"``)."""
        orders = sorted(set(orders))
        S = self.smoothed(lo, hi, range(max(orders) + 1))
        t = self.times[lo:hi]
        vr = self.cutoffs.varrho(t)[:, None]
        vr1 = self.cutoffs.varrho(t, 1)[:, None]
        out = {}
        for j in orders:
            acc = 0.0
            for i in range(j + 1):
                acc = acc + math.comb(j, i) * self._rho[j - i][None, :] * S[i]
            out[j] = vr * acc
        out["t"] = self._rho[0][None, :] * (vr1 * S[0] + vr * S["t"])
        return out

    def layers(self, lo, hi, order=0) -> dict:
        """``D^order`` of every layer at levels ``lo:hi``, arrays ``(hi - lo, npts)``."""
        m, eps = self.m, self.eps
        t = self.times[lo:hi]
        x = self.points[:, None]
        du = self.u_eps.values[lo:hi] @ self._E[order].T - self.u0.values[lo:hi] @ self._E[order].T
        out = {"u_diff": du}
        need = set(range(order + 1))
        if self.which != "varpi":
            need |= set(range(m + order + 1))
        K = self.K(lo, hi, need)
        chi = 0.0
        for i in range(order + 1):
            chi = chi + math.comb(order, i) * eps ** (-i) * self.chi_f.evaluate(x, t, i) * K[order - i]
        out["chi"] = -eps ** m * chi
        if self.which == "varpi":
            return out
        flux = 0.0
        for z in range(m):
            inner = 0.0
            for i in range(order + 1):
                inner = inner + math.comb(order, i) * eps ** (-i) * self.flux_tb.evaluate(x, t, z + i) \
                    * K[m - z + order - i]
            flux = flux + math.comb(m, z) * eps ** (2 * m - z) * inner
        out["flux"] = (-1) ** (m + 1) * flux
        cB = temporal_series(self.curlyB, t / self.tau)[:, None]
        out["curlyB"] = (-1) ** m * eps ** (2 * m) * cB * K[m + order]
        return out

    @staticmethod
    def assemble(layers) -> np.ndarray:
        """Sum of the layers in a fixed order."""
        total = None
        for name in LAYERS:
            if name in layers:
                total = layers[name] if total is None else total + layers[name]
        return total

    def values(self, lo, hi, order=0) -> np.ndarray:
        return self.assemble(self.layers(lo, hi, order))

    def chunks(self):
        n = len(self.times)
        for lo in range(0, n, self.chunk):
            yield lo, min(n, lo + self.chunk)

    def norms(self) -> dict:
        """``L^2(Omega_T)`` norms of the field and of each layer, at order 0 and ``m``."""
        acc = {}
        for order in (0, self.m):
            for lo, hi in self.chunks():
                L = self.layers(lo, hi, order)
                L["total"] = self.assemble(L)
                tw = self.tw[lo:hi][:, None]
                for name, v in L.items():
                    key = f"{name}_D{order}"
                    acc[key] = acc.get(key, 0.0) + float(np.sum(tw * self.weights[None, :] * v ** 2))
        return {k: math.sqrt(v) for k, v in acc.items()}

    def boundary_trace(self) -> float:
        """Largest trace ``|D^j field|``, ``j < m``, at the interval ends over all levels."""
        ends = np.array([self.space.nodes[0], self.space.nodes[-1]])
        saved = (self.points, self._E, self._X, self._rho)
        try:
            self.points = ends
            self._E = [self.space.eval_matrix(ends, (j,)) for j in range(self.m + 1)]
            max_k = len(saved[2]) - 1
            self._X = [space_smoothing_matrix(self.space, ends, self.eps, self.m, j) for j in range(max_k + 1)]
            self._rho = [self.cutoffs.rho(ends[:, None], (j,)) for j in range(max_k + 1)]
            worst = 0.0
            for lo, hi in self.chunks():
                for j in range(self.m):
                    worst = max(worst, float(np.max(np.abs(self.values(lo, hi, j)))))
            return worst
        finally:
            self.points, self._E, self._X, self._rho = saved


def _check_fields(u_eps, u0):
    if u_eps.values.shape != u0.values.shape or not np.array_equal(u_eps.times, u0.times):
        raise ValueError("u_eps and u0 must live on the same mesh and time levels")


def build_varpi(u_eps, u0, chi, eps, cutoffs, chunk=1024) -> ExpansionField:
    _check_fields(u_eps, u0)
    return ExpansionField("varpi", u_eps, u0, chi, None, eps, cutoffs, chunk)


def build_w(u_eps, u0, chi, fd, eps, cutoffs, chunk=1024) -> ExpansionField:
    _check_fields(u_eps, u0)
    if fd.curlyB is None or fd.flux is None:
        raise ValueError("flux data incomplete")
    return ExpansionField("w", u_eps, u0, chi, fd, eps, cutoffs, chunk)


def build_Phi(v_eps, v0, chi_T, fd_T, eps, cutoffs, chunk=1024, A: CoefficientField | None = None) -> ExpansionField:
    """Adjoint expansion from the adjoint solutions (original time) and correctors of ``A*(y, -s)``.

    ``v_eps(x, T - t)`` solves a forward problem with that coefficient only
    when ``T / eps^{2m}`` is an integer, which is enforced here.
    """
    T = v_eps.times[-1]
    m = chi_T.m
    periods = T / eps ** (2 * m)
    if abs(periods - round(periods)) > 1e-9 * max(1.0, periods):
        raise ValueError(f"T / eps^(2m) = {periods:.6g} is not an integer")
    if chi_T.time_sign != 1:
        raise ValueError("expected forward correctors of the reflected adjoint coefficient")
    if A is not None:
        from .effective_tensor import _same_field
        if not _same_field(A.adjoint().reflected_time(0.0), chi_T.coefficient):
            raise ValueError("correctors do not belong to the reflected adjoint coefficient")
    ve, v0 = v_eps.reversed_time("v_eps(T-t)"), v0.reversed_time("v_0(T-t)")
    _check_fields(ve, v0)
    return ExpansionField("Phi", ve, v0, chi_T, fd_T, eps, cutoffs, chunk)


def error_functionals(u_eps, u0, w: ExpansionField | None = None, path=None) -> dict:
    """``||u_eps - u0||_{L^2(0,T;H^{m-1})}``, ``||D^m w||_{L^2(Omega_T)}`` and per-layer norms."""
    from .pde_solvers import spacetime_norm
    m = w.m if w is not None else None
    diff = u_eps - u0
    if m is None:
        m = int(u_eps.meta.get("m", 1))
    out = {"err_Hm1": spacetime_norm(diff, m - 1), "err_L2": spacetime_norm(diff, 0)}
    if w is not None:
        norms = w.norms()
        out["grad_w_L2"] = norms[f"total_D{m}"]
        out["w_L2"] = norms["total_D0"]
        for k, v in norms.items():
            out[f"term_{k}"] = v
    if path is not None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["functional", "value"])
            for k, v in out.items():
                wr.writerow([k, f"{v:.12e}"])
    return out


# weak form of the error equation --------------------------------------------------

@dataclass
class ErrorEquationReport:
    lhs: float
    rhs: float
    terms: dict
    mismatch: float


def verify_error_equation(w: ExpansionField, A: CoefficientField, abar: EffectiveTensor, phi, f=None
                          ) -> ErrorEquationReport:
    """Both sides of the tested error equation for ``w``.

    ``phi(x, t, j, k)`` returns ``d_x^j d_t^k phi`` at points ``x`` (1D array)
    and scalar time ``t``; it must vanish at ``t = T`` and, with its first
    ``m - 1`` derivatives, on the lateral boundary.  ``f`` is unused since
    the source cancels between the two solves; it is accepted for clarity.

    Left side: ``-int w d_t phi + int A_eps D^m w D^m phi``.
    Right side: the five integrals ``I1..I5``.
    """
    if w.which != "w":
        raise ValueError("the error equation is stated for w")
    m, eps = w.m, w.eps
    x = w.points
    xq = x[:, None]
    a_bar = float(abar.abar.reshape(-1)[0])
    lhs = 0.0
    terms = dict(I1=0.0, I2=0.0, I3=0.0, I4=0.0, I5=0.0)
    tau = w.tau
    for lo, hi in w.chunks():
        t = w.times[lo:hi]
        tw = w.tw[lo:hi][:, None] * w.weights[None, :]
        phi_t = np.stack([phi(x, tt, 0, 1) for tt in t])
        phi_m = np.stack([phi(x, tt, m, 0) for tt in t])
        Aeps = np.stack([A.evaluate(xq / eps, tt / tau)[0, 0, 0, 0] for tt in t])
        L0 = w.layers(lo, hi, 0)
        Lm = w.layers(lo, hi, m)
        w0, wm = w.assemble(L0), w.assemble(Lm)
        lhs += float(np.sum(tw * (-w0 * phi_t + Aeps * wm * phi_m)))
        Du0 = w.u0.values[lo:hi] @ w._E[m].T
        K = w.K(lo, hi, range(2 * m + 1))
        terms["I1"] += float(np.sum(tw * (-(Aeps - a_bar) * (Du0 - K[0]) * phi_m)))
        i2 = 0.0
        for z in range(m):
            bracket = Aeps * w.chi_f.evaluate(xq, t, z) - w.flux_ss.evaluate(xq, t, z)
            i2 = i2 + math.comb(m, z) * eps ** (m - z) * bracket * K[m - z]
        terms["I2"] += float(np.sum(tw * (-i2 * phi_m)))
        terms["I3"] += float(np.sum(tw * Aeps * Lm["flux"] * phi_m))
        terms["I4"] += float(np.sum(tw * Aeps * Lm["curlyB"] * phi_m))
        cB = temporal_series(w.curlyB, t / tau)[:, None]
        i5 = eps ** (2 * m) * (w.flux_bt.evaluate(xq, t, 0) + cB) * K["t"]
        terms["I5"] += float(np.sum(tw * i5 * phi_m))
    rhs = sum(terms.values())
    mismatch = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    return ErrorEquationReport(lhs, rhs, terms, mismatch)
