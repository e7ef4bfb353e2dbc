"""Command-line front end: rates, simulate, sweep, fit, squeeze, figure."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .params import (EngineCapError, PhysicalParams, SchemeKind, WorkingPoint,
                     rates_from_physical, rates_from_working_point, scheme_rates)
from .protocol import Engine, Mode, ProtocolSpec, run_protocol, run_amplification
from .sweep import HEADER, ManifestMismatch, SweepGrid, normalized_curves, read_records, run_sweep

EXIT_USAGE = 2
EXIT_CAP = 3
EXIT_FIT = 4

RATE_KEYS = ("chi", "omega_s_tilde", "Gamma_phi", "Gamma_rel", "gamma_z", "gamma_plus",
             "gamma_minus")

# Grids behind each preset; they are our choices and are written into the emitted metadata.
_COLLAPSE_X = np.geomspace(0.01, 1000, 21).tolist() + [math.inf]


def _log(lo, hi, n):
    return np.geomspace(lo, hi, n).tolist() + [math.inf]


FIGURES = {
    "fig1": {"description": "metrological gain vs collective cooperativity, SCF, large N (MFT)",
             "schemes": ["SCF"], "Ns": [100, 1000, 10000, 100000], "etas": _log(1e1, 1e6, 16),
             "eta_scale": "N", "objective": "gmet", "engine": "MFT"},
    "fig3": {"description": "amplification gain vs eta and its sqrt(N) eta collapse, SCF",
             "schemes": ["SCF"], "Ns": [100, 300, 1000, 3000, 10000], "etas": _COLLAPSE_X,
             "eta_scale": "sqrtN", "objective": "gain", "engine": "MFT"},
    "fig4": {"description": "optimal lambda and amplification time vs eta, SCF",
             "schemes": ["SCF"], "Ns": [100, 1000, 10000], "etas": _COLLAPSE_X,
             "eta_scale": "sqrtN", "objective": "gain", "engine": "MFT"},
    "fig5": {"description": "metrological gain vs collective cooperativity, SCF and ACF",
             "schemes": ["SCF", "ACF"], "Ns": [100, 1000, 10000], "etas": _log(1e1, 1e5, 17),
             "eta_scale": "N", "objective": "gmet", "engine": "MFT"},
    "fig6": {"description": "scheme comparison at fixed N",
             "schemes": ["TC", "SCF", "ACF"], "Ns": [1000], "etas": _log(1e1, 1e5, 13),
             "eta_scale": "N", "objective": "gmet", "engine": "MFT"},
    "figB": {"description": "minimal Wineland parameter vs collective cooperativity, SCF",
             "schemes": ["SCF"], "Ns": [100, 1000], "etas": np.geomspace(1, 1e4, 17).tolist(),
             "eta_scale": "N", "objective": "wineland", "engine": "MFT"},
    "figD": {"description": "amplification collapse for ACF",
             "schemes": ["ACF"], "Ns": [100, 1000, 10000], "etas": _COLLAPSE_X,
             "eta_scale": "sqrtN", "objective": "gain", "engine": "MFT"},
}


def figure_grid(name: str) -> dict:
    return dict(FIGURES[name])


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _floats(text: str) -> list[float]:
    return [_float(t) for t in str(text).split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(float(t)) for t in str(text).split(",") if t.strip()]


def _dump(obj, fh=None) -> None:
    fh = fh or sys.stdout
    json.dump(_jsonable(obj), fh, indent=2, allow_nan=False)
    fh.write("\n")


def _jsonable(o):
    """Plain JSON types; non-finite floats become null so the output is strict JSON."""
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


# --- subcommands ---

def cmd_rates(args) -> int:
    if args.g is not None:
        phys = PhysicalParams(g=args.g, kappa=args.kappa, Delta=args.Delta, N=args.N or 1,
                              Gamma=args.Gamma, gamma_rel=args.gamma_rel,
                              gamma_phi=args.gamma_phi, delta=args.delta, beta_in=args.beta_in,
                              omega_s=args.omega_s)
        rates = rates_from_physical(args.scheme, phys)
    else:
        if args.eta is None or args.lam is None:
            raise _Usage("rates needs --eta and --lambda (or physical flags starting with --g)")
        eta = args.eta if args.eta_rel is None else (args.eta, args.eta_rel)
        rates = rates_from_working_point(WorkingPoint(args.scheme, args.chi, eta, args.lam))
    d = rates.to_dict()
    _dump({k: d[k] for k in RATE_KEYS})
    return 0


def _rates_from_args(args):
    if math.isinf(args.eta):
        return scheme_rates(args.scheme, math.inf, 1.0, args.chi)
    if args.lam is None:
        raise _Usage("--lambda is required for finite --eta")
    eta = args.eta if getattr(args, "eta_rel", None) is None else (args.eta, args.eta_rel)
    return rates_from_working_point(WorkingPoint(args.scheme, args.chi, eta, args.lam))


def cmd_simulate(args) -> int:
    spec = ProtocolSpec(args.scheme, args.engine, args.N, _rates_from_args(args), phi=args.phi,
                        t_sqz=args.t_sqz, mode=args.mode, xi_det_sq=args.xi_det,
                        t_window=args.window, n_samples=args.n_samples)
    res = run_protocol(spec)
    out = {"scheme": spec.scheme.value, "engine": spec.engine.value, "N": spec.N,
           "mode": spec.mode.value, "rates": spec.rates.to_dict(), **res.to_dict(),
           "gain": res.G_sub if spec.subtract_background else res.G}
    _dump(out)
    if args.trajectory:
        _write_trajectory(Path(args.trajectory), replace(spec, phi=res.phi))
    return 0


def _write_trajectory(path: Path, spec: ProtocolSpec) -> None:
    if spec.mode is not Mode.AMPLIFY_ONLY:
        raise _Usage("--trajectory is available for AMPLIFY_ONLY runs")
    series = run_amplification(spec)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "S_x", "S_y", "S_z", "C_xx", "C_xy", "C_xz", "C_yy", "C_yz", "C_zz"])
        for k, t in enumerate(series.times):
            w.writerow([format(v, ".17g") for v in [t, *series.signal[:, k]]])


def _grid_from_args(args) -> SweepGrid:
    etas = list(args.eta_list or [])
    if args.eta_grid:
        lo, hi, n = args.eta_grid
        etas += np.geomspace(lo, hi, int(n)).tolist()
    if args.include_ideal:
        etas.append(math.inf)
    return SweepGrid(args.scheme_list, args.N_list, etas, args.engine, args.objective,
                     args.xi_det, args.chi, args.phi, args.n_lambda, args.eta_scale)


def cmd_sweep(args) -> int:
    if not args.out:
        raise _Usage("sweep needs --out")
    if not args.N_list or not (args.eta_list or args.eta_grid or args.include_ideal):
        raise _Usage("sweep needs --N and --eta (or --eta-grid)")
    grid = _grid_from_args(args)
    manifest = run_sweep(grid, args.out, resume=args.resume, workers=args.workers)
    _dump({"out": str(args.out), "points": len(manifest.status),
           "failed": [i for i, s in enumerate(manifest.status) if s == "failed"],
           "grid_hash": manifest.digest})
    return 0


def cmd_fit(args) -> int:
    try:
        records = read_records(args.input)
    except (OSError, ValueError, KeyError) as exc:
        raise _FitData(str(exc)) from None
    curves = normalized_curves(records, args.scheme, args.column)
    if not curves:
        raise _FitData("no usable (eta, G/G_max) curves; each N needs an eta = inf row")
    try:
        if args.kind == "tanh":
            x = np.concatenate([np.asarray(e) * math.sqrt(N) for N, (e, _) in curves.items()])
            y = np.concatenate([np.asarray(r) for _, r in curves.values()])
            fit = analysis.fit_tanh_collapse(x, y)
        else:
            fit = analysis.threshold_exponent(
                {N: (np.asarray(e), np.asarray(r)) for N, (e, r) in curves.items()}, args.f)
    except analysis.FitError as exc:
        raise _FitData(str(exc)) from None
    _dump(fit.to_dict())
    return 0


def cmd_squeeze(args) -> int:
    opt = analysis.minimize_wineland(args.scheme, args.N, args.eta, args.engine, args.chi,
                                     lams=analysis.lambda_grid(args.n_lambda))
    _dump({"scheme": SchemeKind.parse(args.scheme).value, "N": args.N, "eta": args.eta,
           "xi_R_sq": opt.value, "lambda_opt": opt.lambda_opt, "t_sqz": opt.t_opt,
           "flags": opt.flags})
    return 0


def cmd_figure(args) -> int:
    grid = figure_grid(args.name)
    # the ideal (eta = inf) row is spelled out so the metadata stays strict JSON
    meta = {"figure": args.name, **grid,
            "etas": [v if math.isfinite(v) else "inf" for v in grid["etas"]]}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{args.name}.grid.json", "w") as fh:
        _dump(meta, fh)
    if not args.run:
        _dump(meta)
        return 0
    if grid["objective"] == "wineland":
        rows = []
        for N in grid["Ns"]:
            for v in grid["etas"]:
                eta = v / N if grid["eta_scale"] == "N" else v
                opt = analysis.minimize_wineland(grid["schemes"][0], N, eta, grid["engine"])
                rows.append([N, eta, N * eta, opt.value, opt.lambda_opt, opt.t_opt,
                             ";".join(opt.flags)])
        with open(out_dir / f"{args.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "eta", "N_eta", "xi_R_sq", "lambda_opt", "t_sqz", "flags"])
            for r in rows:
                w.writerow([r[0]] + [format(v, ".17g") for v in r[1:6]] + [r[6]])
        return 0
    sg = SweepGrid(grid["schemes"], grid["Ns"], grid["etas"], grid["engine"], grid["objective"],
                   eta_scale=grid["eta_scale"])
    run_sweep(sg, out_dir / f"{args.name}.csv", resume=args.resume, workers=args.workers)
    return 0


# --- parser ---

class _Usage(Exception):
    pass


class _FitData(Exception):
    pass


def _common(p, sim: bool = True):
    p.add_argument("--config", help="JSON file with option defaults; flags override it")
    p.add_argument("--chi", type=_float, default=1.0)
    if sim:
        p.add_argument("--engine", default="MFT", choices=[e.value for e in Engine],
                       type=str.upper)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oat-dissim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rates", help="print effective QME rates as JSON")
    _common(p, sim=False)
    p.add_argument("--scheme", required=True, type=str.upper, choices=[s.value for s in SchemeKind])
    p.add_argument("--eta", type=_float)
    p.add_argument("--eta-rel", type=_float, help="TC only: relaxation cooperativity")
    p.add_argument("--lambda", dest="lam", type=_float)
    for name in ("g", "kappa", "Delta", "Gamma", "gamma_rel", "gamma_phi", "delta", "beta_in",
                 "omega_s"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_float,
                       default=None if name in ("g", "kappa", "Delta") else 0.0)
    p.add_argument("--N", type=int)
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("simulate", help="run one protocol and print the result JSON")
    _common(p)
    p.add_argument("--scheme", required=True, type=str.upper, choices=[s.value for s in SchemeKind])
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--eta", type=_float, default=math.inf)
    p.add_argument("--eta-rel", type=_float)
    p.add_argument("--lambda", dest="lam", type=_float)
    p.add_argument("--phi", type=_float, default=1e-3)
    p.add_argument("--t-sqz", type=_float, default=0.0)
    p.add_argument("--mode", default="AMPLIFY_ONLY")
    p.add_argument("--xi-det", type=_float, default=1.0)
    p.add_argument("--window", type=_float)
    p.add_argument("--n-samples", type=int, default=401)
    p.add_argument("--trajectory", help="CSV path for the sampled moments (AMPLIFY_ONLY)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="optimize over (t, lambda) on a (scheme, N, eta) grid")
    _common(p)
    p.add_argument("--scheme", dest="scheme_list", type=lambda s: s.upper().split(","),
                   default=["SCF"])
    p.add_argument("--N", dest="N_list", type=_ints)
    p.add_argument("--eta", dest="eta_list", type=_floats)
    p.add_argument("--eta-grid", type=_floats, metavar="LO,HI,COUNT", help="log grid of values")
    p.add_argument("--eta-scale", choices=["eta", "N", "sqrtN"], default="eta",
                   help="values given are eta, N*eta or sqrt(N)*eta")
    p.add_argument("--include-ideal", action="store_true", help="add an eta = inf row per N")
    p.add_argument("--objective", default="gain", choices=["gain", "gmet", "tu-gain"])
    p.add_argument("--xi-det", type=_float, default=1.0)
    p.add_argument("--phi", type=_float, default=1e-3)
    p.add_argument("--n-lambda", type=int, default=analysis.LAMBDA_POINTS)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="fit collapse or threshold exponent from a sweep CSV")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=["tanh", "exponent"], default="tanh")
    p.add_argument("--f", type=_float, default=0.5)
    p.add_argument("--scheme")
    p.add_argument("--column", choices=["G", "G_sub"])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("squeeze", help="minimize the Wineland parameter over (t, lambda)")
    _common(p)
    p.add_argument("--scheme", required=True, type=str.upper, choices=[s.value for s in SchemeKind])
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--eta", type=_float, required=True)
    p.add_argument("--n-lambda", type=int, default=analysis.LAMBDA_POINTS)
    p.set_defaults(func=cmd_squeeze)

    p = sub.add_parser("figure", help="emit (and optionally run) a named figure grid")
    p.add_argument("--config")
    p.add_argument("name", choices=sorted(FIGURES))
    p.add_argument("--out-dir", default=".")
    p.add_argument("--run", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_figure)
    return ap


def parse_args(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        # re-parse with the file as defaults so that explicit flags win
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            ap.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)  # argparse exits with 2 on bad flags
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"oat-dissim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EngineCapError as exc:
        print(f"oat-dissim: engine cap: {exc}", file=sys.stderr)
        return EXIT_CAP
    except _FitData as exc:
        print(f"oat-dissim: unusable fit data: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ManifestMismatch as exc:
        print(f"oat-dissim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"oat-dissim: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
