"""Command-line entry points.

Exit codes: 0 success, 1 a check failed or the run hit another library error,
2 a tolerance could not be met, 3 the fixed point did not contract, 64 usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ansatz import Configuration, SpikeCache
from .config import DEFAULT_TOLERANCES, RunConfig, reference_page
from .domain import build_grid
from .energy import SWEEP_DISTANCES, interaction_sweeps, reduced_energy
from .errors import ContractionFailed, SpikeError, ToleranceNotMet
from .reduction import reduce
from .search import run_ladder
from .store import CACHE_ENV, Ledger, cached_ground_state
from .verify import certify

log = logging.getLogger("interior_spikes")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_TOLERANCE = 2
EXIT_CONTRACTION = 3
EXIT_USAGE = 64


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_domain(text: str) -> dict:
    """interval:a,b | rectangle:x0,x1,y0,y1 | disk:cx,cy,R"""
    try:
        shape, _, rest = text.partition(":")
        nums = [float(x) for x in rest.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad domain {text!r}") from exc
    if shape == "interval" and len(nums) == 2:
        return {"shape": shape, "extents": nums}
    if shape == "rectangle" and len(nums) == 4:
        return {"shape": shape, "extents": [nums[:2], nums[2:]]}
    if shape == "disk" and len(nums) == 3:
        return {"shape": shape, "extents": [nums[:2], nums[2]]}
    raise argparse.ArgumentTypeError(
        f"bad domain {text!r}; use interval:a,b, rectangle:x0,x1,y0,y1 or disk:cx,cy,R")


def _parse_points(text: str) -> list:
    """Points separated by ';', coordinates by ','."""
    try:
        return [[float(x) for x in part.split(",")] for part in text.split(";") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad point list {text!r}") from exc


def _parse_floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc


# option name -> (RunConfig field, type, help)
RUN_OPTIONS = {
    "--domain": ("domain", _parse_domain, "interval:a,b, rectangle:x0,x1,y0,y1 or disk:cx,cy,R"),
    "--p": ("p", float, "nonlinearity exponent"),
    "--epsilon": ("epsilon", float, "diffusion length"),
    "--h": ("h", float, "mesh width in rescaled units"),
    "--rho": ("rho", float, "minimum separation in units of epsilon (default 8)"),
    "--eta": ("eta", float, "weighted-norm decay rate (default 0.5)"),
    "--order": ("order", int, "stencil order, 2 or 4 (default 4)"),
    "--delta": ("delta", float, "packing budget (default none)"),
    "--k-max": ("k_max", int, "longest ladder (default: until no clearance)"),
    "--points": ("points", _parse_points, "spike centres, e.g. '0.3;0.7' or '0.3,0.5;0.7,0.5'"),
    "--clearance-factor": ("clearance_factor", float, "insertion clearance in ρε (default 1)"),
    "--boundary-factor": ("boundary_factor", float, "boundary distance weight (default 2)"),
    "--budget": ("budget", int, "energy evaluations per maximization (default 5000)"),
    "--out": ("output_dir", str, "directory for CSV ledgers and JSON sidecars (default runs)"),
    "--cache-dir": ("cache_dir", str, f"ground-state cache (default ${CACHE_ENV})"),
    "--seed": ("seed", int, "recorded with the run (default 0)"),
}


def _add_run_options(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, help="YAML run configuration; flags override it")
    for flag, (dest, kind, text) in RUN_OPTIONS.items():
        sub.add_argument(flag, dest=dest, type=kind, default=None, help=text)
    sub.add_argument("--jobs", type=int, default=1, help="concurrent energy evaluations")


def _run_config(args, parser: argparse.ArgumentParser) -> RunConfig:
    data = {}
    if args.config is not None:
        try:
            data = RunConfig.load(args.config).to_dict()
        except (OSError, ValueError, TypeError) as exc:
            parser.error(f"cannot read {args.config}: {exc}")
    for dest, *_ in RUN_OPTIONS.values():
        value = getattr(args, dest)
        if value is not None:
            data[dest] = value
    missing = [k for k in ("domain", "p", "epsilon", "h") if k not in data]
    if missing:
        parser.error("missing " + ", ".join("--" + m for m in missing))
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return RunConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        parser.error(str(exc))


def _setup(cfg: RunConfig):
    gs, _ = cached_ground_state(cfg.dim, cfg.p, r_max=cfg.tolerance("ground_state_rmax"),
                                tol=cfg.tolerance("ground_state_tol"), cache_dir=cfg.cache_dir)
    grid = build_grid(cfg.build_domain(), cfg.h, order=cfg.order)
    return gs, grid, Ledger(cfg.output_dir, cfg.hash)


def _fixed_configuration(cfg: RunConfig, parser) -> Configuration:
    if cfg.points is None:
        parser.error("this command needs --points (or points: in the config file)")
    return Configuration(cfg.build_domain(), np.array(cfg.points), cfg.rho)


# --------------------------------------------------------------------------
# commands


def cmd_ground_state(args, parser) -> int:
    gs, hit = cached_ground_state(args.dim, args.p, r_max=args.rmax, tol=args.tol,
                                  cache_dir=args.cache_dir)
    out = args.out or Path(f"ground-state-n{args.dim}-p{args.p:g}.json")
    gs.save(out)
    summary = {"dim": gs.dim, "p": gs.p, "w0": gs.w0, "I_w": gs.I_w, "gamma": gs.gamma,
               "lambda1": gs.lambda1, "A_n": gs.A_n, "cache_hit": hit, "table": str(out)}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_reduce(args, parser) -> int:
    cfg = _run_config(args, parser)
    config = _fixed_configuration(cfg, parser)
    gs, grid, ledger = _setup(cfg)
    red = reduce(gs, grid, config, eta=cfg.eta, **cfg.reduce_options())
    c_max = float(np.max(np.abs(red.c))) if red.c.size else 0.0
    ledger.append("reduce", [{
        "k": config.k, "rho": cfg.rho, "epsilon": cfg.epsilon, "star_norm": red.star_norm_phi,
        "iterations": red.iterations, "orthogonality_defect": red.orthogonality_defect,
        "c_max": c_max, "pde_residual": red.pde_residual(gs.p),
    }])
    ledger.write_json("reduce", {"configuration": config.to_dict(), **red.to_dict()})
    print(f"k={config.k} |phi|*={red.star_norm_phi:.6e} iterations={red.iterations} "
          f"max|c|={c_max:.3e}")
    return EXIT_OK


def cmd_energy(args, parser) -> int:
    cfg = _run_config(args, parser)
    config = _fixed_configuration(cfg, parser)
    gs, grid, ledger = _setup(cfg)
    rep = reduced_energy(gs, grid, config, eta=cfg.eta, **cfg.reduce_options())
    ledger.append("energy", [rep.row()])
    it = rep.interactions
    ledger.write_json("energy", {
        "configuration": config.to_dict(), "J_eps": rep.J_eps, "M_eps": rep.M_eps,
        "I_w": rep.I_w, "expansion": rep.expansion, "boundary": it.boundary,
        "boundary_prediction": it.boundary_prediction,
        "pair": {f"{i},{j}": v for (i, j), v in it.pair.items()},
        "pair_prediction": {f"{i},{j}": v for (i, j), v in it.pair_prediction.items()},
        "pair_prediction_boundary_form": {f"{i},{j}": v for (i, j), v
                                          in it.pair_prediction_boundary_form.items()},
        "better_pair_form": it.better_pair_form(),
    })
    print(f"k={rep.k} M_eps={rep.M_eps!r} k*I_w={rep.k * rep.I_w!r} "
          f"discrepancy={rep.expansion_error:.3e}")
    return EXIT_OK


def cmd_certify(args, parser) -> int:
    cfg = _run_config(args, parser)
    config = _fixed_configuration(cfg, parser)
    gs, grid, ledger = _setup(cfg)
    cache = SpikeCache(gs, grid)
    opts = cfg.reduce_options()
    red = reduce(gs, grid, config, eta=cfg.eta, cache=cache, **opts)
    cert = certify(red, gs, cache=cache, newton_tol=cfg.tolerance("newton_tol"),
                   c_limit=cfg.tolerance("multiplier_max"), eta=cfg.eta, **opts)
    ledger.append("certify", [{**cert.to_dict(), "passed": cert.passed}])
    ledger.write_json("certificate", {"configuration": config.to_dict(), **cert.to_dict()})
    for name, ok in cert.checks.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if cert.passed else EXIT_FAILED


def cmd_ladder(args, parser) -> int:
    cfg = _run_config(args, parser)
    gs, grid, ledger = _setup(cfg)
    result = run_ladder(
        gs, grid, cfg.rho, k_max=cfg.k_max, clearance_factor=cfg.clearance_factor,
        boundary_factor=cfg.boundary_factor, delta=cfg.delta, jobs=args.jobs,
        budget=cfg.budget, eta=cfg.eta,
        certify_options={"newton_tol": cfg.tolerance("newton_tol"),
                         "c_limit": cfg.tolerance("multiplier_max")},
        **cfg.reduce_options(),
    )
    rows = [s.row() for s in result.steps]
    ledger.append("ladder", rows)
    ledger.write_json("ladder", {
        "stopped_by": result.stopped_by,
        "steps": [{
            **s.state.config.to_dict(), "M_eps": s.state.M, "margins": {
                "pair": s.interior.pair_margin, "reflection": s.interior.reflection_margin},
            "certificate": s.certificate.to_dict() if s.certificate else None,
        } for s in result.steps],
    })
    for r in rows:
        print(f"k={r['k']} C_k={r['C_k']!r} step={r['step_status']} "
              f"interior={r['interior']} certificate={r['certificate']}")
    print(f"stopped by {result.stopped_by} at k={result.max_k}")
    return EXIT_OK if result.all_steps_pass else EXIT_FAILED


def cmd_verify_asymptotics(args, parser) -> int:
    cfg = _run_config(args, parser)
    gs, grid, ledger = _setup(cfg)
    envelopes = {"separation": args.separation_envelope, "boundary": args.boundary_envelope}
    rows = interaction_sweeps(gs, grid, distances=args.distances)
    for row in rows:
        row["envelope"] = envelopes[row["sweep"]]
        row["status"] = "PASS" if abs(row["ratio"] - 1) <= row["envelope"] else "FAIL"
        print(f"{row['sweep']:>10} distance={row['distance']:g} ratio={row['ratio']:.6f} "
              f"{row['status']}")
    ledger.append("asymptotics", rows)
    return EXIT_OK if all(r["status"] == "PASS" for r in rows) else EXIT_FAILED


def cmd_config_reference(args, parser) -> int:
    text = reference_page()
    if args.write:
        Path(args.write).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="interior-spikes",
                    description="Construct and verify multi-spike solutions of "
                                "ε²Δu - u + u^p = 0 with Neumann boundary conditions.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only log warnings")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    gs = subs.add_parser("ground-state", parents=[common],
                         help="solve (or load) the ground-state table")
    gs.add_argument("--dim", type=int, required=True)
    gs.add_argument("--p", type=float, required=True)
    gs.add_argument("--rmax", type=float, default=DEFAULT_TOLERANCES["ground_state_rmax"])
    gs.add_argument("--tol", type=float, default=DEFAULT_TOLERANCES["ground_state_tol"])
    gs.add_argument("--out", type=Path, help="JSON table path")
    gs.add_argument("--cache-dir", help=f"ground-state cache (default ${CACHE_ENV})")
    gs.set_defaults(func=cmd_ground_state)

    for name, func, text in (
        ("reduce", cmd_reduce, "solve the projected problem for fixed spike centres"),
        ("energy", cmd_energy, "reduced energy and interaction terms for fixed centres"),
        ("certify", cmd_certify, "certify fixed centres as a genuine solution"),
        ("ladder", cmd_ladder, "insert, maximize and check spikes k = 1, 2, ..."),
    ):
        sub = subs.add_parser(name, parents=[common], help=text)
        _add_run_options(sub)
        sub.set_defaults(func=func)

    va = subs.add_parser("verify-asymptotics", parents=[common],
                         help="interaction terms against their exponential predictions")
    _add_run_options(va)
    va.add_argument("--distances", type=_parse_floats, default=list(SWEEP_DISTANCES),
                    help="rescaled distances, comma separated (default 8,10,12)")
    va.add_argument("--separation-envelope", type=float, default=0.15,
                    help="allowed relative deviation of pair terms (default 0.15)")
    va.add_argument("--boundary-envelope", type=float, default=0.20,
                    help="allowed relative deviation of boundary terms (default 0.20)")
    va.set_defaults(func=cmd_verify_asymptotics)

    ref = subs.add_parser("config-reference", parents=[common],
                          help="print every configuration key and default")
    ref.add_argument("--write", help="write to this file instead of stdout")
    ref.set_defaults(func=cmd_config_reference)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, parser)
    except ToleranceNotMet as exc:
        log.error("tolerance not met: %s", exc)
        return EXIT_TOLERANCE
    except ContractionFailed as exc:
        log.error("contraction failed: %s", exc)
        return EXIT_CONTRACTION
    except SpikeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
