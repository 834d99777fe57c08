"""Galerkin solvers for the oscillating, homogenized and adjoint parabolic problems.

Spatial discretisation is conforming: piecewise linear or cubic Hermite
elements on intervals and bilinear elements on rectangles.  Dirichlet traces
``D^g u = 0`` for ``|g| <= m-1`` are imposed by removing the corresponding
degrees of freedom; Neumann problems keep them all.

Time stepping is implicit, either backward Euler (coefficient at the end of
the step) or the three-stage Radau IIA collocation method.  When the time
step divides the coefficient period the factorised step matrices are reused
cyclically.
"""
from __future__ import annotations

import ast
import json
import logging
import math
import operator
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .effective_tensor import EffectiveTensor
from .tensor_algebra import CoefficientField, enumerate_multiindices, multiindices_of_degree

log = logging.getLogger(__name__)


# domains ---------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    a: float = 0.0
    b: float = 1.0
    d: int = field(default=1, init=False)

    @property
    def diameter(self):
        return self.b - self.a

    @property
    def lengths(self):
        return (self.b - self.a,)

    @property
    def bounds(self):
        return ((self.a, self.b),)

    def distance_to_boundary(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.minimum(x - self.a, self.b - x)

    @property
    def volume(self):
        return self.b - self.a


@dataclass(frozen=True)
class Rectangle:
    x: tuple = (0.0, 1.0)
    y: tuple = (0.0, 1.0)
    d: int = field(default=2, init=False)

    @property
    def diameter(self):
        return math.hypot(self.x[1] - self.x[0], self.y[1] - self.y[0])

    @property
    def lengths(self):
        return (self.x[1] - self.x[0], self.y[1] - self.y[0])

    @property
    def bounds(self):
        return (tuple(self.x), tuple(self.y))

    def distance_to_boundary(self, p):
        p = np.asarray(p, dtype=float).reshape(-1, 2)
        dx = np.minimum(p[:, 0] - self.x[0], self.x[1] - p[:, 0])
        dy = np.minimum(p[:, 1] - self.y[0], self.y[1] - p[:, 1])
        return np.minimum(dx, dy)

    @property
    def volume(self):
        return self.lengths[0] * self.lengths[1]


def domain_from_config(cfg) -> Interval | Rectangle:
    if len(cfg) == 2 and not isinstance(cfg[0], (list, tuple)):
        return Interval(float(cfg[0]), float(cfg[1]))
    if len(cfg) == 1:
        return Interval(*map(float, cfg[0]))
    return Rectangle(tuple(map(float, cfg[0])), tuple(map(float, cfg[1])))


# expressions -----------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": math.pi, "e": math.e}


class Expression:
    """Arithmetic expression in the spatial variables and ``t``.

    Accepts ``+ - * / **`` (and ``^`` as a power), ``sin``, ``cos``, ``exp`` and
    the constants ``pi`` and ``e``.  Spatial variables are ``x`` (and ``y``
    in two dimensions), or ``x1, x2``.
    """

    def __init__(self, text: str, d: int = 1):
        self.text = str(text)
        self.d = d
        tree = ast.parse(self.text.replace("^", "**"), mode="eval")
        self._names = set()
        self._check(tree.body)
        self.tree = tree.body
        self.time_dependent = "t" in self._names

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Name):
            allowed = {"t", "x", "x1"} | ({"y", "x2"} if self.d == 2 else set()) | set(_CONSTS)
            if node.id not in allowed:
                raise ValueError(f"unknown name {node.id!r} in expression {self.text!r}")
            self._names.add(node.id)
        elif (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
              and len(node.args) == 1 and not node.keywords):
            self._check(node.args[0])
        else:
            raise ValueError(f"unsupported construct in expression {self.text!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        return _FUNCS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        x = x.reshape(-1, self.d)
        env = dict(_CONSTS, t=t, x=x[:, 0], x1=x[:, 0])
        if self.d == 2:
            env.update(y=x[:, 1], x2=x[:, 1])
        return np.broadcast_to(np.asarray(self._eval(self.tree, env), dtype=float), (x.shape[0],)).copy()


def as_source(f, d):
    if f is None:
        return None
    if isinstance(f, str):
        return Expression(f, d)
    return f


# finite element spaces ------------------------------------------------------------

_HERMITE = np.array([[1.0, 0.0, -3.0, 2.0],
                     [0.0, 1.0, -2.0, 1.0],
                     [0.0, 0.0, 3.0, -2.0],
                     [0.0, 0.0, -1.0, 1.0]])
_P1 = np.array([[1.0, -1.0], [0.0, 1.0]])


class IntervalSpace:
    """Piecewise polynomial space on a 1D mesh (``kind`` is ``"p1"`` or ``"hermite"``)."""

    d = 1

    def __init__(self, nodes, kind="hermite", nq=6):
        self.nodes = np.asarray(nodes, dtype=float)
        self.kind = kind
        ne = len(self.nodes) - 1
        self.ne = ne
        self.h = np.diff(self.nodes)
        if kind == "hermite":
            self.poly, self.scale_h = _HERMITE, np.array([0, 1, 0, 1])
            self.n_dofs = 2 * len(self.nodes)
            e = np.arange(ne)
            self.conn = np.stack([2 * e, 2 * e + 1, 2 * e + 2, 2 * e + 3], axis=1)
            self.max_order = 2
        elif kind == "p1":
            self.poly, self.scale_h = _P1, np.array([0, 0])
            self.n_dofs = len(self.nodes)
            e = np.arange(ne)
            self.conn = np.stack([e, e + 1], axis=1)
            self.max_order = 1
        else:
            raise ValueError(f"unknown element kind {kind!r}")
        xi, w = np.polynomial.legendre.leggauss(nq)
        self.ref_points = 0.5 * (xi + 1.0)
        self.ref_weights = 0.5 * w
        self.quad_points = (self.nodes[:-1, None] + self.h[:, None] * self.ref_points[None])[..., None]
        self.quad_weights = self.h[:, None] * self.ref_weights[None]
        self._basis_cache = {}

    def _ref_basis(self, xi, order, h):
        """Basis derivative values, shape ``(len(h), len(xi), nloc)`` for points per element."""
        out = []
        for a, coef in enumerate(self.poly):
            c = np.polynomial.polynomial.polyder(coef, order) if order else coef
            v = np.polynomial.polynomial.polyval(xi, c)
            out.append(v * h ** (self.scale_h[a] - order))
        return np.stack(out, axis=-1)

    def basis(self, alpha) -> np.ndarray:
        order = int(sum(alpha))
        if order not in self._basis_cache:
            xi = np.broadcast_to(self.ref_points, (self.ne, len(self.ref_points)))
            self._basis_cache[order] = self._ref_basis(xi, order, self.h[:, None])
        return self._basis_cache[order]

    def boundary_dofs(self, m: int) -> np.ndarray:
        last = len(self.nodes) - 1
        if self.kind == "p1":
            if m > 1:
                raise ValueError("piecewise linear elements are not H^2 conforming")
            return np.array([0, last])
        dofs = [0, 2 * last]
        if m >= 2:
            dofs += [1, 2 * last + 1]
        if m > 2:
            raise ValueError("cubic Hermite elements support m <= 2")
        return np.array(sorted(dofs))

    def locate(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        e = np.clip(np.searchsorted(self.nodes, x, side="right") - 1, 0, self.ne - 1)
        xi = (x - self.nodes[e]) / self.h[e]
        return e, xi

    def eval_matrix(self, x, alpha) -> sp.csr_matrix:
        """Sparse ``(npts, n_dofs)`` matrix evaluating ``D^alpha`` at points ``x``."""
        order = int(sum(np.atleast_1d(alpha)))
        e, xi = self.locate(x)
        vals = self._ref_basis(xi[:, None], order, self.h[e][:, None])[:, 0, :]
        rows = np.repeat(np.arange(len(e)), self.conn.shape[1])
        return sp.csr_matrix((vals.ravel(), (rows, self.conn[e].ravel())), shape=(len(e), self.n_dofs))


class RectangleSpace:
    """Bilinear elements on a tensor-product mesh of a rectangle."""

    d = 2
    kind = "q1"
    max_order = 1

    def __init__(self, xnodes, ynodes, nq=4):
        self.xn, self.yn = np.asarray(xnodes, float), np.asarray(ynodes, float)
        nx, ny = len(self.xn), len(self.yn)
        self.n_dofs = nx * ny
        ex, ey = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
        ex, ey = ex.ravel(), ey.ravel()
        self.ne = len(ex)
        self.ex, self.ey = ex, ey
        node = lambda i, j: i * ny + j
        self.conn = np.stack([node(ex, ey), node(ex + 1, ey), node(ex, ey + 1), node(ex + 1, ey + 1)], axis=1)
        self.hx, self.hy = np.diff(self.xn)[ex], np.diff(self.yn)[ey]
        xi, w = np.polynomial.legendre.leggauss(nq)
        xi, w = 0.5 * (xi + 1), 0.5 * w
        X, Y = np.meshgrid(xi, xi, indexing="ij")
        self.ref = np.stack([X.ravel(), Y.ravel()], axis=1)
        self.ref_w = np.outer(w, w).ravel()
        px = self.xn[ex][:, None] + self.hx[:, None] * self.ref[None, :, 0]
        py = self.yn[ey][:, None] + self.hy[:, None] * self.ref[None, :, 1]
        self.quad_points = np.stack([px, py], axis=-1)
        self.quad_weights = (self.hx * self.hy)[:, None] * self.ref_w[None]
        self._basis_cache = {}

    @staticmethod
    def _ref(xi, eta, alpha, hx, hy):
        a, b = alpha
        fx = [(1 - xi, -1.0 / hx), (xi, 1.0 / hx)]
        fy = [(1 - eta, -1.0 / hy), (eta, 1.0 / hy)]
        out = []
        for jy in range(2):
            for jx in range(2):
                vx = fx[jx][0] if a == 0 else fx[jx][1] * np.ones_like(xi)
                vy = fy[jy][0] if b == 0 else fy[jy][1] * np.ones_like(eta)
                out.append(vx * vy)
        # local order: (0,0), (1,0), (0,1), (1,1)
        return np.stack(out, axis=-1)

    def basis(self, alpha) -> np.ndarray:
        alpha = tuple(alpha)
        if sum(alpha) > 1:
            raise ValueError("bilinear elements only support first derivatives")
        if alpha not in self._basis_cache:
            xi = np.broadcast_to(self.ref[:, 0], (self.ne, len(self.ref)))
            eta = np.broadcast_to(self.ref[:, 1], (self.ne, len(self.ref)))
            self._basis_cache[alpha] = self._ref(xi, eta, alpha, self.hx[:, None], self.hy[:, None])
        return self._basis_cache[alpha]

    def boundary_dofs(self, m: int) -> np.ndarray:
        if m != 1:
            raise ValueError("rectangles are supported for m = 1 only")
        nx, ny = len(self.xn), len(self.yn)
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        on = (i == 0) | (i == nx - 1) | (j == 0) | (j == ny - 1)
        return np.flatnonzero(on.ravel())

    def eval_matrix(self, pts, alpha) -> sp.csr_matrix:
        pts = np.asarray(pts, float).reshape(-1, 2)
        nx, ny = len(self.xn), len(self.yn)
        i = np.clip(np.searchsorted(self.xn, pts[:, 0], side="right") - 1, 0, nx - 2)
        j = np.clip(np.searchsorted(self.yn, pts[:, 1], side="right") - 1, 0, ny - 2)
        hx, hy = np.diff(self.xn)[i], np.diff(self.yn)[j]
        xi, eta = (pts[:, 0] - self.xn[i]) / hx, (pts[:, 1] - self.yn[j]) / hy
        vals = self._ref(xi, eta, tuple(alpha), hx, hy)
        e = i * (ny - 1) + j
        rows = np.repeat(np.arange(len(pts)), 4)
        return sp.csr_matrix((vals.ravel(), (rows, self.conn[e].ravel())), shape=(len(pts), self.n_dofs))


# meshes ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CylinderMesh:
    """Space-time mesh ``Omega x (0, T)``.

    ``cells`` is the number of elements per axis and ``dt`` the nominal
    step; a shorter final step closes the interval when ``dt`` does not divide
    ``T``.  ``eps`` tags the mesh for a fine-scale solve.
    """

    domain: Interval | Rectangle
    cells: tuple
    dt: float
    T: float
    elements: str = "p1"
    scheme: str = "backward_euler"
    eps: float | None = None
    nq: int | None = None

    @classmethod
    def for_epsilon(cls, domain, T, eps, m, h_factor=1 / 8, dt_factor=1 / 16, elements=None,
                    scheme="backward_euler", tag=True, nq=None):
        if elements is None:
            elements = "hermite" if m == 2 else ("p1" if domain.d == 1 else "q1")
        h = eps * h_factor
        cells = tuple(int(math.ceil(L / h - 1e-9)) for L in domain.lengths)
        return cls(domain, cells, eps ** (2 * m) * dt_factor, T, elements, scheme, eps if tag else None, nq)

    @property
    def h(self):
        return max(L / c for L, c in zip(self.domain.lengths, self.cells))

    def times(self) -> np.ndarray:
        n = int(math.floor(self.T / self.dt + 1e-9))
        t = self.dt * np.arange(n + 1)
        if self.T - t[-1] > 1e-12 * max(1.0, self.T):
            t = np.append(t, self.T)
        else:
            t[-1] = self.T if abs(t[-1] - self.T) <= 1e-12 * max(1.0, self.T) else t[-1]
        return t

    def space(self):
        if self.domain.d == 1:
            a, b = self.domain.bounds[0]
            nodes = np.linspace(a, b, self.cells[0] + 1)
            return IntervalSpace(nodes, self.elements, self.nq or 6)
        (x0, x1), (y0, y1) = self.domain.bounds
        return RectangleSpace(np.linspace(x0, x1, self.cells[0] + 1), np.linspace(y0, y1, self.cells[1] + 1),
                              self.nq or 4)

    def check_resolution(self, m):
        if self.eps is None:
            return
        if self.h > self.eps / 8 * (1 + 1e-9) or self.dt > self.eps ** (2 * m) / 16 * (1 + 1e-9):
            raise ValueError(f"mesh (h={self.h:.3g}, dt={self.dt:.3g}) does not resolve eps={self.eps}")


# problems and fields -------------------------------------------------------------

@dataclass
class ProblemSpec:
    """Parabolic problem ``d_t u + (-1)^m sum D^a (A^{ab}(x/eps, t/eps^{2m}) D^b u) = f``.

    With ``adjoint`` the problem is ``-d_t v + L* v = f`` with ``v(T) = 0``.
    ``A`` is a :class:`CoefficientField` (with ``eps``) or an
    :class:`EffectiveTensor` (homogenized, ``eps`` is ``None``).
    """

    A: CoefficientField | EffectiveTensor
    eps: float | None = None
    bc: str = "dirichlet"
    f: object = None
    h: object = None
    adjoint: bool = False

    @property
    def m(self):
        return self.A.m

    @property
    def d(self):
        return self.A.d

    @property
    def n(self):
        return self.A.n


@dataclass
class SpaceTimeField:
    """Degrees of freedom per time level on a fixed spatial space."""

    space: object
    times: np.ndarray
    values: np.ndarray
    n: int = 1
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __sub__(self, other):
        if other.space is not self.space and other.values.shape != self.values.shape:
            raise ValueError("fields live on different spaces")
        return SpaceTimeField(self.space, self.times, self.values - other.values, self.n,
                              f"{self.label}-{other.label}")

    def evaluate(self, x, alpha=None, levels=None) -> np.ndarray:
        """Values of ``D^alpha`` (scalar fields) at points ``x``, shape ``(levels, npts)``."""
        alpha = alpha if alpha is not None else (0,) * self.space.d
        E = self.space.eval_matrix(x, alpha)
        V = self.values if levels is None else self.values[levels]
        return (E @ V.T).T

    def save(self, path):
        """``<path>.npz`` with nodes, times and values plus a ``<path>.json`` sidecar."""
        sp_ = self.space
        nodes = [sp_.nodes] if hasattr(sp_, "nodes") else [sp_.xn, sp_.yn]
        np.savez(f"{path}.npz", times=self.times, values=self.values,
                 **{f"nodes{i}": v for i, v in enumerate(nodes)})
        info = dict(label=self.label, n=self.n, space=type(sp_).__name__, kind=getattr(sp_, "kind", "q1"),
                    levels=len(self.times), dofs=int(self.values.shape[1]),
                    meta={k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool, type(None)))})
        with open(f"{path}.json", "w") as fh:
            json.dump(info, fh, indent=1)

    def reversed_time(self, label=None):
        T = self.times[-1]
        return SpaceTimeField(self.space, (T - self.times[::-1]).copy(), self.values[::-1].copy(), self.n,
                              label or self.label + "(T-t)", dict(self.meta))


# coefficient evaluation --------------------------------------------------------------

class _CoefficientAtQuad:
    """Coefficient values at quadrature points for a given scaled time ``s``."""

    def __init__(self, A, eps, points):
        self.A = A
        self.points = points.reshape(-1, points.shape[-1])
        self.shape = points.shape[:-1]
        if isinstance(A, EffectiveTensor):
            self.const = A.abar
            self.time_independent = True
        else:
            if eps is None:
                if np.any(A.wavenumbers != 0):
                    raise ValueError("an oscillating coefficient needs eps")
                eps = 1.0
            self.const = None
            ky = A.wavenumbers[:, :-1].astype(float)
            self.E = np.exp(2j * np.pi * (ky @ (self.points / eps).T))
            self.ks = A.wavenumbers[:, -1]
            self.time_independent = A.time_independent

    def __call__(self, s):
        if self.const is not None:
            return np.broadcast_to(self.const[..., None, None], self.const.shape + self.shape)
        phase = np.exp(2j * np.pi * self.ks * s)
        vals = np.einsum("k,kabij,kq->abijq", phase, self.A.coefficients, self.E).real
        return vals.reshape(vals.shape[:4] + self.shape)


class _Assembler:
    def __init__(self, space, A, eps, n):
        self.space, self.n = space, n
        iset = enumerate_multiindices(A.d, A.m)
        self.iset = iset
        self.B = np.stack([space.basis(a) for a in iset])            # (P, ne, nq, nloc)
        self.B0 = space.basis((0,) * space.d)
        self.w = space.quad_weights
        self.coef = _CoefficientAtQuad(A, eps, space.quad_points)
        nloc = space.conn.shape[1]
        gl = (space.conn[:, :, None] * n + np.arange(n)[None, None]).reshape(space.ne, nloc * n)
        self.rows = np.repeat(gl, nloc * n, axis=1).ravel()
        self.cols = np.tile(gl, (1, nloc * n)).ravel()
        self.N = space.n_dofs * n

    def _matrix(self, local):
        ne = local.shape[0]
        return sp.csr_matrix((local.reshape(ne, -1).ravel(), (self.rows, self.cols)), shape=(self.N, self.N))

    def stiffness(self, s):
        C = self.coef(s)                                            # (P, P, n, n, ne, nq)
        local = np.einsum("abijeq,eq,beqy,aeqx->exiyj", C, self.w, self.B, self.B, optimize=True)
        nloc = self.B.shape[-1]
        return self._matrix(local.reshape(self.space.ne, nloc * self.n, nloc * self.n))

    def mass(self):
        local = np.einsum("eq,eqy,eqx->exy", self.w, self.B0, self.B0)
        nloc = self.B0.shape[-1]
        full = np.einsum("exy,ij->exiyj", local, np.eye(self.n)).reshape(self.space.ne, nloc * self.n, nloc * self.n)
        return self._matrix(full)

    def gram(self, order):
        """``sum_{|a|=order} (D^a u, D^a v)`` (component-wise)."""
        local = 0.0
        for a in multiindices_of_degree(self.space.d, order):
            Ba = self.space.basis(a)
            local = local + np.einsum("eq,eqy,eqx->exy", self.w, Ba, Ba)
        nloc = self.B0.shape[-1]
        full = np.einsum("exy,ij->exiyj", local, np.eye(self.n)).reshape(self.space.ne, nloc * self.n, nloc * self.n)
        return self._matrix(full)

    def load(self, f, t):
        pts = self.space.quad_points.reshape(-1, self.space.d)
        vals = np.asarray(f(pts, t), dtype=float).reshape(self.n, self.space.ne, -1) if self.n > 1 else \
            np.asarray(f(pts, t), dtype=float).reshape(1, self.space.ne, -1)
        local = np.einsum("ieq,eq,eqx->exi", vals, self.w, self.B0)
        idx = (self.space.conn[:, :, None] * self.n + np.arange(self.n)).ravel()
        return np.bincount(idx, weights=local.ravel(), minlength=self.N)


# Radau IIA, three stages
_S6 = math.sqrt(6.0)
RADAU_A = np.array([[(88 - 7 * _S6) / 360, (296 - 169 * _S6) / 1800, (-2 + 3 * _S6) / 225],
                    [(296 + 169 * _S6) / 1800, (88 + 7 * _S6) / 360, (-2 - 3 * _S6) / 225],
                    [(16 - _S6) / 36, (16 + _S6) / 36, 1 / 9]])
RADAU_C = np.array([(4 - _S6) / 10, (4 + _S6) / 10, 1.0])


class SolveError(RuntimeError):
    pass


def _time_period(spec):
    if isinstance(spec.A, EffectiveTensor) or spec.A.time_independent:
        return None
    return spec.eps ** (2 * spec.m)


def solve_parabolic(spec: ProblemSpec, mesh: CylinderMesh, check_residual_every: int = 0,
                    time_shift: float = 0.0) -> SpaceTimeField:
    """March the Galerkin system from ``t = 0`` to ``T`` and return every time level.

    ``time_shift`` offsets the scaled time of the coefficient, i.e. the
    coefficient is evaluated at ``(t + time_shift) / eps^{2m}``.
    """
    if spec.adjoint:
        return solve_adjoint(spec, mesh)
    m, n = spec.m, spec.n
    mesh.check_resolution(m)
    space = mesh.space()
    if m > space.max_order:
        raise ValueError(f"{space.kind} elements are not H^{m} conforming")
    asm = _Assembler(space, spec.A, spec.eps, n)
    f = as_source(spec.f, space.d)
    h = as_source(spec.h, space.d)
    Mfull = asm.mass().tocsr()
    if spec.bc == "dirichlet":
        fixed = np.concatenate([space.boundary_dofs(m) * n + i for i in range(n)])
    elif spec.bc == "neumann":
        fixed = np.array([], dtype=int)
    else:
        raise ValueError(f"unknown boundary condition {spec.bc!r}")
    free = np.setdiff1d(np.arange(asm.N), fixed)
    R = sp.csr_matrix((np.ones(len(free)), (np.arange(len(free)), free)), shape=(len(free), asm.N))
    M = (R @ Mfull @ R.T).tocsc()
    times = mesh.times()
    U = np.zeros((len(times), asm.N))
    if h is not None:
        rhs0 = R @ asm.load(lambda x, t: h(x, 0.0), 0.0)
        U[0, free] = splu(M).solve(rhs0)
    scheme = mesh.scheme
    if scheme == "backward_euler":
        stage_c, stage_a = np.array([1.0]), np.array([[1.0]])
    elif scheme == "radau3":
        stage_c, stage_a = RADAU_C, RADAU_A
    else:
        raise ValueError(f"unknown time scheme {scheme!r}")
    ns = len(stage_c)
    period = _time_period(spec)
    scale = spec.eps ** (2 * m) if spec.eps is not None else 1.0
    q = None
    if period is None:
        q = 1
    else:
        ratio = period / mesh.dt
        if abs(ratio - round(ratio)) < 1e-9 * ratio and abs(time_shift / mesh.dt - round(time_shift / mesh.dt)) < 1e-9:
            q = int(round(ratio))
    cache = {}
    f_cache = {}
    Ms = sp.kron(sp.eye(ns), M).tocsc()
    Abig = sp.csr_matrix(stage_a)

    def stage_matrix(t0, dt, key):
        if key is not None and key in cache:
            return cache[key]
        blocks = []
        for cj in stage_c:
            if period is None:
                s = 0.0
            elif key is not None:
                s = (key[0] + cj) / q + time_shift / scale
            else:
                s = (t0 + cj * dt + time_shift) / scale
            blocks.append(R @ asm.stiffness(s) @ R.T)
        K = sp.block_diag(blocks, format="csr")
        S = Ms + dt * sp.kron(Abig, sp.eye(len(free))) @ K
        lu = splu(S.tocsc())
        out = (lu, K)
        if key is not None:
            cache[key] = out
        return out

    def source(t):
        if f is None:
            return np.zeros(len(free))
        key = 0.0 if not getattr(f, "time_dependent", True) else t
        if key not in f_cache:
            if len(f_cache) > 4 * ns:
                f_cache.clear()
            f_cache[key] = R @ asm.load(f, t)
        return f_cache[key]

    max_res = 0.0
    norms = [float(U[0] @ (Mfull @ U[0]))]
    for k in range(len(times) - 1):
        t0, dt = times[k], times[k + 1] - times[k]
        full_step = abs(dt - mesh.dt) <= 1e-12 * mesh.dt
        key = (k % q,) if (q is not None and full_step) else None
        lu, K = stage_matrix(t0, dt, key)
        un = U[k, free]
        rhs = np.tile(M @ un, ns)
        if f is not None:
            F = np.concatenate([source(t0 + c * dt) for c in stage_c])
            rhs = rhs + dt * (sp.kron(Abig, sp.eye(len(free))) @ F)
        Z = lu.solve(rhs)
        if not np.all(np.isfinite(Z)):
            raise SolveError(f"linear solve broke down at step {k}")
        if check_residual_every and k % check_residual_every == 0:
            S = Ms + dt * sp.kron(Abig, sp.eye(len(free))) @ K
            r = np.linalg.norm(S @ Z - rhs) / max(np.linalg.norm(rhs), 1e-300)
            max_res = max(max_res, r)
        U[k + 1, free] = Z[-len(free):]
        norms.append(float(U[k + 1] @ (Mfull @ U[k + 1])))
    label = "u_eps" if spec.eps is not None else "u_0"
    meta = dict(m=m, scheme=scheme, elements=space.kind, h=mesh.h, dt=mesh.dt, eps=spec.eps, bc=spec.bc,
                cached_matrices=len(cache), linear_residual=max_res)
    field_ = SpaceTimeField(space, times, U, n, label, meta)
    field_.meta["energy"] = _energy_check(field_, asm, f, np.sqrt(np.array(norms)), spec)
    return field_


def _energy_check(u, asm, f, l2, spec):
    """Compare the discrete energy with the a priori bound built from the data."""
    times = u.times
    G = asm.gram(spec.m)
    grad2 = np.einsum("ij,ij->i", u.values, (G @ u.values.T).T)
    fnorm = np.zeros(len(times))
    if f is not None:
        pts = asm.space.quad_points.reshape(-1, asm.space.d)
        w = asm.space.quad_weights.ravel()
        fnorm = np.array([math.sqrt(np.sum(w * np.asarray(f(pts, t)).reshape(-1) ** 2)) for t in times])
    dts = np.diff(times)
    int_f = float(np.sum(0.5 * dts * (fnorm[1:] + fnorm[:-1])))
    radius = l2[0] + int_f
    mu = spec.A.mu if isinstance(spec.A, CoefficientField) else None
    dissipation = float(np.sum(dts * grad2[1:]))
    out = dict(sup_l2=float(l2.max()), bound_l2=radius, monotone=bool(np.all(np.diff(l2) <= 1e-12 * max(l2[0], 1e-300)))
               if f is None else None, dissipation=dissipation)
    out["sup_ok"] = bool(l2.max() <= radius * (1 + 1e-9) + 1e-14)
    if mu is not None:
        out["dissipation_ok"] = bool(mu * dissipation <= 1.05 * (0.5 * l2[0] ** 2 + radius * int_f) + 1e-14)
    return out


def solve_adjoint(spec: ProblemSpec, mesh: CylinderMesh) -> SpaceTimeField:
    """Solve ``-d_t v + L* v = F``, ``v(T) = 0`` through the substitution ``t -> T - t``."""
    if spec.h is not None:
        raise ValueError("the adjoint problem has a zero terminal condition")
    A = spec.A
    if isinstance(A, EffectiveTensor):
        coef = A.transpose()
        shift = 0.0
    else:
        if np.any(A.wavenumbers[:, -1] != 0):
            if spec.eps is None:
                raise ValueError("an oscillating coefficient needs eps")
            periods = mesh.T / spec.eps ** (2 * spec.m)
            if abs(periods - round(periods)) > 1e-9 * max(1.0, periods):
                raise ValueError(f"T / eps^(2m) = {periods:.6g} is not an integer")
        coef = A.adjoint().reflected_time(0.0)
        shift = 0.0
    F = as_source(spec.f, A.d)
    T = mesh.T
    f_rev = None
    if F is not None:
        f_rev = _Reversed(F, T)
    forward = ProblemSpec(coef, spec.eps, spec.bc, f_rev, None, adjoint=False)
    vt = solve_parabolic(forward, mesh, time_shift=shift)
    v = vt.reversed_time("v_eps" if spec.eps is not None else "v_0")
    v.meta["reversed_solution"] = True
    return v


class _Reversed:
    def __init__(self, F, T):
        self.F, self.T = F, T
        self.time_dependent = getattr(F, "time_dependent", True)

    def __call__(self, x, t):
        return self.F(x, self.T - t)


def spacetime_norm(field: SpaceTimeField, k: int, seminorm: bool = False) -> float:
    """``L^2(0,T; H^k)`` norm by the composite trapezoid rule in time.

    The spatial norm is ``sum_{j<=k} sum_{|a|=j} ||D^a u||^2`` (only ``j = k``
    with ``seminorm``); element quadrature is exact for the discrete fields.
    """
    space = field.space
    if k < 0 or k > space.max_order:
        raise ValueError(f"k={k} exceeds the smoothness of {space.kind} elements")
    n = field.n
    dummy = CoefficientField.constant(np.eye(space.d), space.d, 1, 1.0)
    asm = _Assembler(space, dummy, 1.0, n)
    orders = [k] if seminorm else range(k + 1)
    G = sum(asm.gram(j) for j in orders)
    per_level = np.einsum("ij,ij->i", field.values, (G @ field.values.T).T)
    return float(math.sqrt(max(np.trapezoid(per_level, field.times), 0.0)))
