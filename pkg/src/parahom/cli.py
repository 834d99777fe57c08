"""Command line entry point: ``parahom <command> --config cfg.json``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .cell_solver import TorusGrid, solve_corrector
from .effective_tensor import compute_abar, compute_abar_dual
from .expansion import build_Phi, build_w, error_functionals
from .flux_correctors import build_flux_data, verification_report
from .pde_solvers import ProblemSpec, solve_adjoint, solve_parabolic
from .smoothing import build_cutoffs

COMMANDS = ("validate", "correctors", "effective", "flux", "solve", "expand", "rates")


def _global_flags(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="experiment config JSON")
    parser.add_argument("--preset", default=d(None), choices=sorted(harness.PRESETS),
                        help="built-in experiment instead of --config")
    parser.add_argument("--workers", type=int, default=d(None), help="parallel eps runs")
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="serial runs in eps order")
    parser.add_argument("--out", default=d(None), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="parahom", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("solve", "expand"):
            p.add_argument("--eps", type=float, default=None, help="single eps (default: largest in config)")
    return parser


def _load(args) -> harness.ExperimentConfig:
    if args.preset:
        return harness.preset(args.preset)
    if args.config:
        return harness.ExperimentConfig.load(args.config)
    raise SystemExit("either --config or --preset is required")


def _outdir(args, cfg) -> Path:
    out = Path(args.out or cfg.out or "parahom_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path):
    text = json.dumps(obj, indent=1, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))
    Path(path).write_text(text)
    print(text)


def cmd_validate(args, cfg):
    cfg.validate()
    _dump(dict(config="ok", **harness.certify(cfg)), _outdir(args, cfg) / f"{cfg.name}_validate.json")


def _cell(cfg):
    A = cfg.build_coefficient()
    chi = solve_corrector(A, TorusGrid(cfg.d, cfg.cell["N"], cfg.cell["M"]), cfg.cell["tol"])
    return A, chi


def cmd_correctors(args, cfg):
    A, chi = _cell(cfg)
    out = _outdir(args, cfg)
    np.save(out / f"{cfg.name}_chi_modes.npy", chi.modes)
    _dump(dict(shape=list(chi.modes.shape), residual=chi.residual_norm, tol=chi.tol,
               l2=float(np.sqrt(np.sum(np.abs(chi.modes) ** 2)))), out / f"{cfg.name}_correctors.json")


def cmd_effective(args, cfg):
    A, chi = _cell(cfg)
    abar = compute_abar(A, chi)
    chi_star = solve_corrector(A, chi.grid, cfg.cell["tol"], adjoint=True)
    dual = compute_abar_dual(A, chi_star)
    out = _outdir(args, cfg)
    abar.save(out / f"{cfg.name}_abar.json")
    _dump(dict(abar=abar.abar.real.tolist(), dual_difference=float(np.max(np.abs(abar.abar - dual.abar)))),
          out / f"{cfg.name}_effective.json")


def cmd_flux(args, cfg):
    A, chi = _cell(cfg)
    fd = build_flux_data(A, chi, compute_abar(A, chi))
    _dump(verification_report(fd), _outdir(args, cfg) / f"{cfg.name}_flux.json")


def _solve_pair(cfg, eps):
    shared = harness.prepare(cfg)
    mesh = cfg.mesh_for(eps)
    if cfg.adjoint:
        fine = solve_adjoint(ProblemSpec(shared.A, eps, cfg.bc, cfg.F, None, adjoint=True), mesh)
        hom = solve_adjoint(ProblemSpec(shared.abar, None, cfg.bc, cfg.F, None, adjoint=True), mesh)
    else:
        fine = solve_parabolic(ProblemSpec(shared.A, eps, cfg.bc, cfg.f, cfg.h), mesh)
        hom = solve_parabolic(ProblemSpec(shared.abar, None, cfg.bc, cfg.f, cfg.h), mesh)
    return shared, fine, hom


def cmd_solve(args, cfg):
    eps = args.eps or cfg.eps[0]
    _, fine, hom = _solve_pair(cfg, eps)
    out = _outdir(args, cfg)
    fine.save(out / f"{cfg.name}_u_eps")
    hom.save(out / f"{cfg.name}_u_0")
    _dump(error_functionals(fine, hom), out / f"{cfg.name}_solve.json")


def cmd_expand(args, cfg):
    eps = args.eps or cfg.eps[0]
    shared, fine, hom = _solve_pair(cfg, eps)
    inner, outer = cfg.cutoff_multipliers
    cut = build_cutoffs(cfg.domain_obj, cfg.T, eps, cfg.m, inner, outer)
    out = _outdir(args, cfg)
    if cfg.adjoint:
        if shared.fd_T is None:
            raise SystemExit("adjoint expansion needs the adjoint corrector data")
        norms = build_Phi(fine, hom, shared.chi_T, shared.fd_T, eps, cut, cfg.chunk, A=shared.A).norms()
        _dump(norms, out / f"{cfg.name}_expand.json")
    else:
        fd = shared.fd or build_flux_data(shared.A, shared.chi, shared.abar)
        w = build_w(fine, hom, shared.chi, fd, eps, cut, cfg.chunk)
        _dump(error_functionals(fine, hom, w, path=out / f"{cfg.name}_expand.csv"), out / f"{cfg.name}_expand.json")


def cmd_rates(args, cfg):
    workers = 1 if args.deterministic else args.workers
    report = harness.run_sweep(cfg, workers=workers, out_dir=_outdir(args, cfg))
    for name, fit in report.fits.items():
        slope = "preasymptotic" if fit.get("slope") is None else f"{fit['slope']:.4f}"
        print(f"{name}: slope={slope} R2={fit.get('r2')} pass={fit.get('pass')}")
    return 0 if all(f.get("pass", True) for f in report.fits.values()) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _load(args)
    handler = globals()[f"cmd_{args.command}"]
    try:
        return handler(args, cfg) or 0
    except (harness.ConfigError, harness.SweepError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
