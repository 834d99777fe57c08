"""Epsilon sweeps, rate fits and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cell_solver import TorusGrid, solve_corrector
from .effective_tensor import EffectiveTensor, certify_effective_ellipticity, compute_abar
from .expansion import build_Phi, build_w, error_functionals
from .flux_correctors import build_flux_data
from .pde_solvers import (CylinderMesh, Expression, ProblemSpec, domain_from_config, solve_adjoint, solve_parabolic,
                          spacetime_norm)
from .smoothing import CutoffError, build_cutoffs
from .tensor_algebra import CoefficientField, check_ellipticity

log = logging.getLogger(__name__)

WORKERS_ENV = "PARAHOM_WORKERS"


class ConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# configuration ----------------------------------------------------------------------

def coefficient_from_config(spec: dict, d: int, m: int) -> CoefficientField:
    """``{"type": "isotropic", "mu", "modes": [{"k", "re", "im"}]}``, ``"modes"`` or ``"constant"``."""
    kind = spec.get("type", "isotropic")
    mu = float(spec["mu"])
    if kind == "isotropic":
        modes = [(tuple(r["k"]), complex(r.get("re", 0.0), r.get("im", 0.0))) for r in spec["modes"]]
        return CoefficientField.isotropic(d, m, mu, modes, n=int(spec.get("n", 1)))
    if kind == "modes":
        return CoefficientField.from_modes(d, m, int(spec.get("n", 1)), mu, spec["modes"])
    if kind == "constant":
        return CoefficientField.constant(np.asarray(spec["tensor"], dtype=float), d, m, mu)
    raise ConfigError(f"unknown coefficient type {kind!r}")


@dataclass
class ExperimentConfig:
    """One epsilon sweep.

    ``mesh`` holds the policy ``h = h_factor * eps``, ``dt = dt_factor * eps^{2m}``
    plus the element and time-scheme names.  ``cutoffs`` holds the layer
    multipliers of the expansion (doubled for adjoint runs).
    """

    name: str
    d: int
    m: int
    domain: list
    T: float
    coefficient: dict
    eps: list
    bc: str = "dirichlet"
    f: str | None = None
    h: str | None = None
    F: str | None = None
    adjoint: bool = False
    null: bool = False
    mesh: dict = field(default_factory=lambda: dict(h_factor=1 / 8, dt_factor=1 / 16, elements=None,
                                                    scheme="backward_euler"))
    cell: dict = field(default_factory=lambda: dict(N=32, M=32, tol=1e-10))
    functionals: list = field(default_factory=lambda: ["err_Hm1"])
    windows: dict = field(default_factory=dict)
    cutoffs: dict = field(default_factory=lambda: dict(inner=6.0, outer=8.0))
    seed: int = 0
    out: str | None = None
    chunk: int = 1024

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        cfg = cls(**data)
        cfg.eps = [float(e) for e in cfg.eps]
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def domain_obj(self):
        return domain_from_config(self.domain)

    def build_coefficient(self) -> CoefficientField:
        return coefficient_from_config(self.coefficient, self.d, self.m)

    def validate(self):
        if len(self.eps) < 3:
            raise ConfigError("need at least three eps values")
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ConfigError("eps list must be strictly decreasing")
        if any(e <= 0 for e in self.eps):
            raise ConfigError("eps values must be positive")
        dom = self.domain_obj
        if dom.d != self.d:
            raise ConfigError("domain dimension does not match d")
        if self.bc not in ("dirichlet", "neumann"):
            raise ConfigError(f"unknown boundary condition {self.bc!r}")
        for name in ("f", "h", "F"):
            expr = getattr(self, name)
            if expr is not None:
                try:
                    Expression(expr, self.d)
                except (SyntaxError, ValueError) as exc:
                    raise ConfigError(f"bad expression for {name}: {exc}") from exc
        needs_expansion = any(f in ("grad_w_L2", "grad_Phi_L2") for f in self.functionals)
        if needs_expansion:
            inner, outer = self.cutoff_multipliers
            for e in self.eps:
                if 2 * outer * e >= min(dom.lengths) or 2 * outer * e ** (2 * self.m) >= self.T:
                    raise ConfigError(f"eps={e} violates cutoff feasibility with outer multiplier {outer}")
        if self.adjoint:
            if self.F is None:
                raise ConfigError("adjoint sweeps need a source F")
            for e in self.eps:
                p = self.T / e ** (2 * self.m)
                if abs(p - round(p)) > 1e-9 * max(1.0, p):
                    raise ConfigError(f"T / eps^(2m) is not an integer for eps={e}")
        return self

    @property
    def cutoff_multipliers(self):
        inner, outer = float(self.cutoffs["inner"]), float(self.cutoffs["outer"])
        return (2 * inner, 2 * outer) if self.adjoint else (inner, outer)

    def mesh_for(self, eps) -> CylinderMesh:
        pol = self.mesh
        return CylinderMesh.for_epsilon(self.domain_obj, self.T, eps, self.m, pol.get("h_factor", 1 / 8),
                                        pol.get("dt_factor", 1 / 16), pol.get("elements"),
                                        pol.get("scheme", "backward_euler"))


def resolve_workers(requested=None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, int(requested or 1))


# rate fitting ----------------------------------------------------------------------

def fit_rate(pairs) -> tuple:
    """Least squares slope and ``R^2`` of ``log(error)`` against ``log(eps)``."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("need at least three (eps, error) pairs")
    e = np.array([p[0] for p in pairs], dtype=float)
    v = np.array([p[1] for p in pairs], dtype=float)
    if np.any(e <= 0) or np.any(v <= 0):
        raise ValueError("eps and error values must be positive")
    x, y = np.log(e), np.log(v)
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return float(coef[0]), r2


@dataclass
class RateReport:
    name: str
    rows: list
    fits: dict
    wall_clock: list
    status: str = "complete"
    error: str | None = None

    @property
    def wall_clock_monotone(self) -> bool:
        """Runs at smaller eps use finer meshes and should never be cheaper."""
        return all(b >= a for a, b in zip(self.wall_clock, self.wall_clock[1:]))

    def passed(self, functional) -> bool:
        return self.fits.get(functional, {}).get("pass", False)

    def to_dict(self) -> dict:
        return asdict(self)


def _fit_all(cfg: ExperimentConfig, rows) -> dict:
    fits = {}
    for name in cfg.functionals:
        pairs = [(r["eps"], r[name]) for r in rows if name in r]
        if len(pairs) < 3:
            continue
        if any(v <= 0 for _, v in pairs):
            spread = max(v for _, v in pairs) - min(v for _, v in pairs)
            fits[name] = dict(slope=None, r2=None, status="degenerate", variation=spread)
            if name in cfg.windows:
                fits[name]["pass"] = False
            continue
        slope, r2 = fit_rate(pairs)
        window = cfg.windows.get(name)
        status = "ok" if r2 >= 0.9 else "preasymptotic"
        entry = dict(slope=slope if status == "ok" else None, raw_slope=slope, r2=r2, status=status,
                     window=window)
        if window is not None:
            entry["pass"] = bool(status == "ok" and window[0] <= slope <= window[1])
        fits[name] = entry
    return fits


# single runs ----------------------------------------------------------------------

@dataclass
class _Shared:
    A: CoefficientField
    chi: object
    abar: EffectiveTensor
    fd: object
    chi_T: object = None
    fd_T: object = None


def prepare(cfg: ExperimentConfig) -> _Shared:
    A = cfg.build_coefficient()
    if cfg.null:
        abar0 = compute_abar(A, solve_corrector(A, TorusGrid(cfg.d, cfg.cell["N"], cfg.cell["M"]), cfg.cell["tol"]))
        A = CoefficientField.constant(abar0.abar, cfg.d, cfg.m, A.mu)
    grid = TorusGrid(cfg.d, cfg.cell["N"], cfg.cell["M"])
    chi = solve_corrector(A, grid, cfg.cell["tol"])
    abar = compute_abar(A, chi)
    shared = _Shared(A, chi, abar, None)
    if any(f in ("grad_w_L2",) for f in cfg.functionals):
        shared.fd = build_flux_data(A, chi, abar)
    if cfg.adjoint:
        B = A.adjoint().reflected_time(0.0)
        shared.chi_T = solve_corrector(B, grid, cfg.cell["tol"])
        shared.fd_T = build_flux_data(B, shared.chi_T, compute_abar(B, shared.chi_T))
    return shared


def run_single(cfg: ExperimentConfig, eps: float, shared: _Shared | None = None) -> dict:
    """Functionals for one eps: fine and homogenized solves on a common mesh."""
    shared = shared or prepare(cfg)
    t0 = time.perf_counter()
    mesh = cfg.mesh_for(eps)
    row = dict(eps=eps)
    if cfg.adjoint:
        ve = solve_adjoint(ProblemSpec(shared.A, eps, cfg.bc, cfg.F, None, adjoint=True), mesh)
        v0 = solve_adjoint(ProblemSpec(shared.abar, None, cfg.bc, cfg.F, None, adjoint=True), mesh)
        row["err_Hm1"] = spacetime_norm(ve - v0, cfg.m - 1)
        if "grad_Phi_L2" in cfg.functionals:
            inner, outer = cfg.cutoff_multipliers
            cut = build_cutoffs(cfg.domain_obj, cfg.T, eps, cfg.m, inner, outer)
            Phi = build_Phi(ve, v0, shared.chi_T, shared.fd_T, eps, cut, cfg.chunk, A=shared.A)
            norms = Phi.norms()
            row["grad_Phi_L2"] = norms[f"total_D{cfg.m}"]
            for k, v in sorted(norms.items()):
                row[f"Phi_{k}"] = v
    else:
        ue = solve_parabolic(ProblemSpec(shared.A, eps, cfg.bc, cfg.f, cfg.h), mesh)
        u0 = solve_parabolic(ProblemSpec(shared.abar, None, cfg.bc, cfg.f, cfg.h), mesh)
        row["energy_ok"] = bool(ue.meta["energy"]["sup_ok"] and u0.meta["energy"]["sup_ok"])
        w = None
        if "grad_w_L2" in cfg.functionals:
            inner, outer = cfg.cutoff_multipliers
            cut = build_cutoffs(cfg.domain_obj, cfg.T, eps, cfg.m, inner, outer)
            w = build_w(ue, u0, shared.chi, shared.fd, eps, cut, cfg.chunk)
        vals = error_functionals(ue, u0, w)
        row.update(vals)
        del ue, u0, w
    row["wall_clock"] = time.perf_counter() - t0
    return row


def _worker(args):
    cfg_dict, eps = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_single(cfg, eps)


# outputs ------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return f"{v:.12e}"
    return str(v)


def write_outputs(report: RateReport, cfg: ExperimentConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["eps"] + [f for f in cfg.functionals if any(f in r for r in report.rows)]
    extra = sorted({k for r in report.rows for k in r} - set(keys) - {"wall_clock"})
    cols = keys + extra
    with open(out / f"{cfg.name}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in report.rows:
            wr.writerow([_fmt(r.get(c, "")) for c in cols])
    with open(out / f"{cfg.name}_long.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["eps", "functional", "value"])
        for r in report.rows:
            for c in cols[1:]:
                if isinstance(r.get(c), float):
                    wr.writerow([_fmt(r["eps"]), c, _fmt(r[c])])
    summary = dict(name=report.name, status=report.status, error=report.error, fits=report.fits,
                   wall_clock=report.wall_clock, wall_clock_monotone=report.wall_clock_monotone,
                   config=cfg.to_dict())
    (out / f"{cfg.name}.json").write_text(json.dumps(summary, indent=1, default=str))


def run_sweep(cfg: ExperimentConfig, workers=None, out_dir=None) -> RateReport:
    """Run every eps, fit slopes and write CSV, long CSV and JSON summary.

    A failing run aborts the sweep; the rows computed so far are written with
    status ``aborted`` and the error is re-raised as :class:`SweepError`.
    """
    cfg.validate()
    out_dir = out_dir or cfg.out
    nworkers = resolve_workers(workers)
    A = cfg.build_coefficient()
    cert = check_ellipticity(A)
    if not cert.certified:
        raise ConfigError(f"coefficient is not Legendre elliptic with mu={A.mu}")
    rows, clock = [], []
    report = RateReport(cfg.name, rows, {}, clock)
    try:
        if nworkers > 1:
            with ProcessPoolExecutor(nworkers) as ex:
                for row in ex.map(_worker, [(cfg.to_dict(), e) for e in cfg.eps]):
                    rows.append(row)
                    clock.append(row.pop("wall_clock"))
        else:
            shared = prepare(cfg)
            for e in cfg.eps:
                log.info("%s: eps=%g", cfg.name, e)
                row = run_single(cfg, e, shared)
                clock.append(row.pop("wall_clock"))
                rows.append(row)
    except Exception as exc:
        report.status, report.error = "aborted", f"{type(exc).__name__}: {exc}"
        report.fits = _fit_all(cfg, rows) if len(rows) >= 3 else {}
        if out_dir:
            write_outputs(report, cfg, out_dir)
        raise SweepError(report.error, report) from exc
    report.fits = _fit_all(cfg, rows)
    if out_dir:
        write_outputs(report, cfg, out_dir)
    return report


# null experiment ----------------------------------------------------------------------

def null_experiment(cfg: ExperimentConfig, exact=None, out_dir=None) -> dict:
    """Constant coefficient equal to the effective tensor, same per-eps pipeline.

    Both solves then use the same operator, so ``u_eps - u_0`` contains no
    homogenization error; ``variation`` measures how much the functionals move
    across the eps list.  When ``exact(x, t)`` is given, the discretization
    error of the homogenized solve on each eps mesh is also reported.
    """
    ncfg = ExperimentConfig.from_dict(dict(cfg.to_dict(), null=True, name=cfg.name + "_null", out=None,
                                           functionals=["err_Hm1"], windows={}))
    report = run_sweep(ncfg)
    shared = prepare(ncfg)
    out = dict(rows=report.rows)
    for name in ncfg.functionals:
        vals = [r[name] for r in report.rows]
        top = max(abs(v) for v in vals)
        out[f"{name}_variation"] = 0.0 if top == 0 else (max(vals) - min(vals)) / top
    if exact is not None:
        disc = []
        for e in ncfg.eps:
            mesh = ncfg.mesh_for(e)
            u0 = solve_parabolic(ProblemSpec(shared.abar, None, ncfg.bc, ncfg.f, ncfg.h), mesh)
            pts = u0.space.quad_points.reshape(-1)
            wq = u0.space.quad_weights.reshape(-1)
            tw = np.zeros(len(u0.times))
            dt = np.diff(u0.times)
            tw[:-1] += dt / 2
            tw[1:] += dt / 2
            err = 0.0
            E = u0.space.eval_matrix(pts, (0,))
            for lo in range(0, len(u0.times), 2048):
                hi = min(len(u0.times), lo + 2048)
                vals = u0.values[lo:hi] @ E.T
                ex = np.stack([exact(pts, t) for t in u0.times[lo:hi]])
                err += float(np.sum(tw[lo:hi, None] * wq[None] * (vals - ex) ** 2))
            disc.append(math.sqrt(err))
        out["discretization_error"] = disc
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        Path(out_dir, f"{ncfg.name}.json").write_text(json.dumps(out, indent=1, default=str))
    return out


_D1_COEFF = dict(type="isotropic", mu=1 / 3, modes=[dict(k=[0, 0], re=2.0), dict(k=[1, 1], im=-0.5)])
_HIGH_ORDER = dict(h_factor=1 / 8, dt_factor=1 / 16, elements="hermite", scheme="radau3")

PRESETS = {
    "D1": dict(name="D1", d=1, m=1, domain=[0.0, 1.0], T=0.5, coefficient=_D1_COEFF,
               eps=[1 / 8, 1 / 16, 1 / 32, 1 / 64], h="sin(pi*x)", mesh=_HIGH_ORDER,
               functionals=["err_Hm1", "grad_w_L2"],
               windows=dict(err_Hm1=[0.85, 1.15], grad_w_L2=[0.4, 0.7]),
               cutoffs=dict(inner=1.0, outer=2.0)),
    "D1N": dict(name="D1N", d=1, m=1, domain=[0.0, 1.0], T=0.5, coefficient=_D1_COEFF, bc="neumann",
                eps=[1 / 8, 1 / 16, 1 / 32, 1 / 64], h="cos(pi*x)", mesh=_HIGH_ORDER,
                functionals=["err_Hm1"], windows=dict(err_Hm1=[0.85, 1.15])),
    "D2": dict(name="D2", d=1, m=2, domain=[0.0, 1.0], T=0.05, coefficient=_D1_COEFF,
               eps=[1 / 4, 1 / 6, 1 / 8, 1 / 12, 1 / 16], f="1", mesh=_HIGH_ORDER,
               functionals=["err_Hm1"], windows=dict(err_Hm1=[0.8, 1.2])),
    "ADJ": dict(name="ADJ", d=1, m=1, domain=[0.0, 1.0], T=0.5, coefficient=_D1_COEFF, adjoint=True,
                eps=[1 / 16, 1 / 32, 1 / 64], F="sin(pi*x)", mesh=_HIGH_ORDER,
                functionals=["grad_Phi_L2"], windows=dict(grad_Phi_L2=[0.4, 0.7]),
                cutoffs=dict(inner=1.0, outer=2.0)),
}


def preset(key: str, /, **overrides) -> ExperimentConfig:
    data = json.loads(json.dumps(PRESETS[key]))
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


def certify(cfg: ExperimentConfig) -> dict:
    """Ellipticity of the coefficient and of its effective tensor."""
    A = cfg.build_coefficient()
    cert = check_ellipticity(A)
    chi = solve_corrector(A, TorusGrid(cfg.d, cfg.cell["N"], cfg.cell["M"]), cfg.cell["tol"])
    abar = compute_abar(A, chi)
    ecert = certify_effective_ellipticity(abar, A.mu)
    return dict(coefficient=asdict(cert), effective=asdict(ecert), abar=abar.abar.tolist())
