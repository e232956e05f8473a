"""Command line entry point: one subcommand per pipeline stage plus the full experiment."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_ERROR, EXIT_NOT_APPLICABLE = 0, 1, 2
DEFAULT_MAP = "misiurewicz-cubic"


def _cx(text: str) -> complex:
    return complex(text.replace(" ", "").replace("i", "j"))


def _depths(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _emit(pairs, out: Path | None = None, name: str = "report.txt") -> None:
    from .harness import _fmt
    text = "".join(f"{k} = {_fmt(v)}\n" for k, v in pairs)
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--map", default=None,
                   help="preset name or ascending coefficient list such as '4,0,1'")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--depth", type=_depths, default=None, help="depth list such as '1,2,3'")


def cmd_orbit(args) -> int:
    from .rational import DEFAULT_ESCAPE_RADIUS, iterate_orbit, write_orbit_csv
    from .harness import resolve_map
    R = resolve_map(args.map or DEFAULT_MAP)
    rec = iterate_orbit(R, _cx(args.z0), args.horizon, args.escape_radius or DEFAULT_ESCAPE_RADIUS)
    pairs = [("z0", _cx(args.z0)), ("horizon", args.horizon), ("samples", len(rec)),
             ("escaped", rec.escaped), ("escape_index", rec.escape_index), ("last", rec.samples[-1])]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_orbit_csv(rec, args.out / "orbit.csv")
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_census(args) -> int:
    from .rational import escape_census
    from .harness import resolve_map
    R = resolve_map(args.map or DEFAULT_MAP)
    c = escape_census(R, args.horizon)
    pairs = [("degree", R.degree), ("s", c.count), ("horizon", c.horizon)]
    for i, (z, m, esc, idx) in enumerate(c.critical):
        pairs += [(f"critical.{i}.location", z), (f"critical.{i}.multiplicity", m),
                  (f"critical.{i}.escaped", esc), (f"critical.{i}.escape_index", idx)]
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_lift(args) -> int:
    from .curves import JordanCurve, iterated_pullback, PunctureSet, quasihyperbolic_length
    from .harness import resolve_map
    R = resolve_map(args.map or DEFAULT_MAP)
    base = JordanCurve.circle(_cx(args.center), args.radius, args.resolution or 256)
    depth = max(args.depth) if args.depth else 1
    comps = iterated_pullback(R, base, depth)
    pairs = [("depth", depth), ("components", len(comps))]
    punct = PunctureSet(np.array([_cx(args.center)]))
    for i, c in enumerate(comps):
        pairs += [(f"component.{i}.covering_degree", c.covering_degree),
                  (f"component.{i}.length", c.curve.length),
                  (f"component.{i}.diameter", c.curve.diameter)]
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            c.curve.to_csv(args.out / f"component_{i}.csv")
    if len(punct.points):
        pairs.append(("base_quasihyperbolic_length", quasihyperbolic_length(base, punct)))
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_modulus(args) -> int:
    from .curves import JordanCurve
    from .moduli import AnnulusRegion, grid_modulus, round_modulus
    n = args.resolution or 512
    if args.outer_csv and args.inner_csv:
        region = AnnulusRegion(JordanCurve.from_csv(args.outer_csv), JordanCurve.from_csv(args.inner_csv))
        exact = None
    else:
        region = AnnulusRegion.round(args.inner, args.outer, 0j, 1024)
        exact = round_modulus(args.inner, args.outer)
    est = grid_modulus(region, n)
    pairs = [("resolution", n), ("modulus", est.value), ("error_bound", est.error_bound)]
    if exact is not None:
        pairs += [("exact", exact), ("relative_error", abs(est.value - exact) / exact)]
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_surgery(args) -> int:
    from .surgery import SurgeryTooThinError, blend_sup_norm, build_blend
    n = args.resolution or 256
    try:
        blend = build_blend(args.p, n)
    except SurgeryTooThinError as exc:
        _emit([("p", args.p), ("status", "too-thin"), ("sup_norm", blend_sup_norm(args.p)),
               ("message", str(exc))], args.out)
        return EXIT_NOT_APPLICABLE
    dev = blend.boundary_deviation()
    pairs = [("p", args.p), ("a", blend.a), ("resolution", n), ("sup_norm", blend.sup_norm),
             ("inner_boundary_deviation", dev[0]), ("outer_boundary_deviation", dev[1])]
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        blend.dilatation.save(args.out / "blend_dilatation.bin")
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_straighten(args) -> int:
    from .beltrami import BeltramiField, GridSpec, solve_mrmt
    if args.sigma is not None:
        mu = BeltramiField.load(args.sigma)
    else:
        n = args.resolution or 512
        grid = GridSpec.square(0j, 1.25, n)  # margin so the support clears the lattice frame
        z = grid.centers()
        vals = np.where(np.abs(z) < 1, args.k * z / np.where(z == 0, 1, np.conj(z)), 0)
        mu = BeltramiField.from_values(grid, vals)
    qc = solve_mrmt(mu)
    pairs = [("grid", f"{mu.grid.nx}x{mu.grid.ny}"), ("sup_norm", mu.sup_norm), ("iterations", qc.iterations),
             ("residual", qc.residual), ("sup_displacement", qc.sup_displacement)]
    if args.sigma is None:
        z = mu.grid.centers()
        inside = np.abs(z) <= 0.9
        exact = z * np.abs(z) ** ((1 + args.k) / (1 - args.k) - 1)
        lattice = z + qc.displacement.values
        pairs.append(("radial_stretch_error", float(np.max(np.abs(lattice - exact)[inside]))))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        qc.save(args.out / "straightening.bin")
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_detect_conical(args) -> int:
    from .harness import detect_conical, resolve_map
    R = resolve_map(args.map or DEFAULT_MAP)
    try:
        cert = detect_conical(R, _cx(args.x0), args.delta, args.d_max, args.horizon)
    except ValueError as exc:
        _emit([("status", "not-applicable"), ("message", str(exc))], args.out)
        return EXIT_NOT_APPLICABLE
    pairs = [("x0", cert.x0), ("delta", cert.delta), ("d_max", cert.degree_bound),
             ("conical", cert.conical), ("good_times", ",".join(map(str, cert.good_times))),
             ("degrees", ",".join(str(d) for d in cert.component_degrees)),
             ("indeterminate", ",".join(map(str, cert.indeterminate)))]
    _emit(pairs, args.out)
    return EXIT_OK


def cmd_find_params(args) -> int:
    from .harness import find_misiurewicz_cubic
    found = find_misiurewicz_cubic(args.k, args.seeds, args.A, seed=args.seed or 0)
    pairs = [("k", args.k), ("A", args.A), ("found", len(found))]
    for i, f in enumerate(found):
        pairs += [(f"param.{i}.B", f.B), (f"param.{i}.landing_point", f.landing_point),
                  (f"param.{i}.multiplier", f.multiplier), (f"param.{i}.residual", f.residual)]
    _emit(pairs, args.out)
    return EXIT_OK if found else EXIT_NOT_APPLICABLE


def cmd_experiment(args) -> int:
    from .harness import ExperimentConfig, run_instability_experiment
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.map:
        cfg.map = args.map
    if args.resolution:
        cfg.resolution = args.resolution
    if args.depth:
        cfg.depths = args.depth
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_renders:
        cfg.renders = False
    bundle = run_instability_experiment(cfg, args.out)
    sys.stdout.write(bundle.report_text())
    if bundle.status == "not-applicable":
        return EXIT_NOT_APPLICABLE
    return EXIT_OK if bundle.success else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qcsurgery", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("orbit", help="iterate a point")
    _common(p)
    p.add_argument("--z0", required=True)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--escape-radius", type=float, default=None)
    p.set_defaults(fn=cmd_orbit)

    p = sub.add_parser("census", help="count escaping critical points")
    _common(p)
    p.add_argument("--horizon", type=int, default=1000)
    p.set_defaults(fn=cmd_census)

    p = sub.add_parser("lift", help="pull a round curve back under the map")
    _common(p)
    p.add_argument("--center", default="0")
    p.add_argument("--radius", type=float, default=1.0)
    p.set_defaults(fn=cmd_lift)

    p = sub.add_parser("modulus", help="modulus of a ring domain")
    _common(p)
    p.add_argument("--inner", type=float, default=0.5)
    p.add_argument("--outer", type=float, default=1.0)
    p.add_argument("--inner-csv", type=Path, default=None)
    p.add_argument("--outer-csv", type=Path, default=None)
    p.set_defaults(fn=cmd_modulus)

    p = sub.add_parser("surgery", help="build the radial blend for a ring A(p)")
    _common(p)
    p.add_argument("--p", type=float, default=0.5)
    p.set_defaults(fn=cmd_surgery)

    p = sub.add_parser("straighten", help="solve the Beltrami equation")
    _common(p)
    p.add_argument("--sigma", type=Path, default=None, help="Beltrami field .bin (default: radial stretch)")
    p.add_argument("--k", type=float, default=1 / 3, help="radial stretch coefficient")
    p.set_defaults(fn=cmd_straighten)

    p = sub.add_parser("detect-conical", help="certify a conical point")
    _common(p)
    p.add_argument("--x0", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--d-max", type=int, default=1)
    p.add_argument("--horizon", type=int, default=50)
    p.set_defaults(fn=cmd_detect_conical)

    p = sub.add_parser("find-params", help="search Misiurewicz cubic parameters")
    _common(p)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seeds", type=int, default=64)
    p.add_argument("--A", type=float, default=0.8)
    p.set_defaults(fn=cmd_find_params)

    p = sub.add_parser("experiment", help="run the instability experiment")
    _common(p)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--no-renders", action="store_true")
    p.set_defaults(fn=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
