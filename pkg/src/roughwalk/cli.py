"""Command-line front end: scenarios, seeds, and file outputs.

Subcommands: simulate, signature, pvar, connect, lk, minp, probe,
walk-converge.  Outputs are JSON (reports, with the resolved config echoed)
and CSV (tabular trends).  Every command is deterministic under --seed; exit
codes: 0 ok, 2 validation error, 3 numeric-tolerance failure in verification
commands.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import algebra, flows, interpolation, levy, paths

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TOLERANCE = 3


class ValidationError(ValueError):
    pass


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read JSON file {path}: {exc}") from exc


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dump_csv(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if rows:
        keys = list(rows[0].keys())
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_csv_cell(row[k]) for k in keys])
    path.write_text(buf.getvalue())


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(repr(float(x)) for x in v)
    return v


def _resolve_path_function(name: str, ctx) -> interpolation.PathFunction:
    if name in interpolation.PATH_FUNCTIONS:
        return interpolation.PATH_FUNCTIONS[name](ctx)
    if name.startswith("perturbed:"):
        spec = _load_json(name.split(":", 1)[1])
        coords = np.zeros(ctx.m)
        top = ctx.level_slice(ctx.N)
        coords[top] = np.asarray(spec["v"], dtype=float)
        v = algebra.LieElement(ctx, coords)
        gamma = None
        if "gamma" in spec:
            gamma = [np.asarray(s, dtype=float) for s in spec["gamma"]]
        return interpolation.perturbed_pf(ctx, v, gamma)
    if name.startswith("custom:"):
        spec = _load_json(name.split(":", 1)[1])
        mats = [np.asarray(W, dtype=float) for W in spec["waypoints"]]
        return interpolation.waypoint_pf(ctx, mats, name=spec.get("name", "custom"))
    raise ValidationError(
        f"unknown path function {name!r}; registry: {sorted(interpolation.PATH_FUNCTIONS)}"
    )


def _scenario_context(sc: dict):
    try:
        d, N = int(sc["d"]), int(sc["N"])
    except KeyError as exc:
        raise ValidationError(f"scenario missing field {exc}") from exc
    return algebra.make_context(d, N)


def _scenario_triplet(sc: dict, ctx) -> levy.LevyTriplet:
    if "triplet" not in sc:
        raise ValidationError("scenario has no 'triplet'")
    obj = dict(sc["triplet"])
    obj.setdefault("d", ctx.d)
    obj.setdefault("N", ctx.N)
    try:
        return levy.triplet_from_json(obj, ctx)
    except ValueError as exc:
        raise ValidationError(f"bad triplet: {exc}") from exc


def _scenario_fields(sc: dict, ctx) -> flows.LinearVectorFields:
    if "M" not in sc:
        raise ValidationError("scenario has no 'M' (linear vector fields)")
    try:
        return flows.fields_from_json(sc["M"], ctx)
    except ValueError as exc:
        raise ValidationError(f"bad vector fields: {exc}") from exc


def _out_dir(args) -> Path:
    return Path(args.out)


def cmd_simulate(args) -> int:
    sc = _load_json(args.scenario)
    ctx = _scenario_context(sc)
    triplet = _scenario_triplet(sc, ctx)
    seed = args.seed if args.seed is not None else int(sc.get("seed", 0))
    samples = int(sc.get("samples", 1))
    steps = int(sc.get("steps", 64))
    T = float(sc.get("T", 1.0))
    if samples <= 0 or steps <= 0:
        raise ValidationError("samples and steps must be positive")
    name = sc.get("name", "scenario")
    out = _out_dir(args)
    config = {"scenario": sc, "seed": seed, "command": "simulate"}
    path_objs = []
    for s in range(samples):
        path = levy.sample_levy(triplet, steps, T=T, seed=seed, stream=s)
        path_objs.append(paths.path_to_json(path))
        (out / f"{name}_path{s:03d}.csv").parent.mkdir(parents=True, exist_ok=True)
        (out / f"{name}_path{s:03d}.csv").write_text(paths.path_to_csv(path))
    _dump_json({"config": config, "paths": path_objs}, out / f"{name}_paths.json")
    print(f"wrote {samples} path(s) to {out}/{name}_*")
    return EXIT_OK


def cmd_signature(args) -> int:
    obj = _load_json(args.segments)
    segments = [np.asarray(v, dtype=float) for v in obj["segments"]]
    N = args.level
    path = paths.signature_lift(segments, N)
    end = path.points[-1]
    report = {
        "config": {"segments_file": args.segments, "N": N, "command": "signature"},
        "endpoint": algebra.group_to_json(end),
        "homogeneous_norm": algebra.homogeneous_norm(end),
    }
    if N >= 2:
        d = end.ctx.d
        second = end.levels[2].reshape(d, d)
        report["levy_area"] = (0.5 * (second - second.T)).tolist()
    _dump_json(report, _out_dir(args) / "signature.json")
    print(f"signature written to {args.out}/signature.json")
    return EXIT_OK


def cmd_pvar(args) -> int:
    obj = _load_json(args.path)
    path = paths.path_from_json(obj.get("paths", [obj])[0] if "paths" in obj else obj)
    try:
        rep = paths.p_variation(path, args.p, refine=args.pvar_refine)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    report = {
        "config": {"path_file": args.path, "p": args.p, "refine": args.pvar_refine, "command": "pvar"},
        "p": rep.p,
        "value": rep.value,
        "power_sum": rep.power_sum,
        "witness": list(rep.witness),
    }
    _dump_json(report, _out_dir(args) / "pvar.json")
    print(f"{args.p}-variation = {rep.value}")
    return EXIT_OK


def cmd_connect(args) -> int:
    obj = _load_json(args.path)
    path = paths.path_from_json(obj.get("paths", [obj])[0] if "paths" in obj else obj)
    pf = _resolve_path_function(args.pf, path.ctx)
    cfg = interpolation.ConnectConfig(first=args.r_first, ratio=args.r_ratio)
    try:
        connected, tau = interpolation.connect(path, pf, cfg)
    except interpolation.DomainError as exc:
        raise ValidationError(str(exc)) from exc
    out = _out_dir(args)
    _dump_json(
        {
            "config": {
                "path_file": args.path, "pf": args.pf, "r": cfg.to_json(),
                "command": "connect",
            },
            "path": paths.path_to_json(connected),
            "added_time": tau.added,
        },
        out / "connected.json",
    )
    (out / "timechange.csv").parent.mkdir(parents=True, exist_ok=True)
    (out / "timechange.csv").write_text(tau.to_csv())
    print(f"connected path: {len(connected)} stamps, added time {tau.added}")
    return EXIT_OK


def cmd_lk(args) -> int:
    sc = _load_json(args.scenario)
    ctx = _scenario_context(sc)
    triplet = _scenario_triplet(sc, ctx)
    fields = _scenario_fields(sc, ctx)
    pf = _resolve_path_function(sc.get("path_function", "logchord"), ctx)
    seed = args.seed if args.seed is not None else int(sc.get("seed", 0))
    samples = int(sc.get("samples", 20_000))
    steps = int(sc.get("steps", 256))
    if samples <= 0 or steps <= 0:
        raise ValidationError("samples and steps must be positive")
    try:
        rep = flows.lk_verify(
            triplet, pf, fields, n_samples=samples, n_steps=steps,
            seed=seed, jobs=args.jobs,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    report = {
        "config": {"scenario": sc, "seed": seed, "jobs": args.jobs, "command": "lk"},
        "report": rep.to_json(),
        "passed": rep.within(),
    }
    _dump_json(report, _out_dir(args) / f"{sc.get('name', 'lk')}_lk.json")
    print(
        f"op error {rep.op_error:.3e} vs max(3*stderr={3 * rep.stderr_proxy:.3e}, 5e-3); "
        f"unitarity defect {rep.max_unitarity_defect:.2e}"
    )
    return EXIT_OK if rep.within() else EXIT_TOLERANCE


def cmd_minp(args) -> int:
    obj = _load_json(args.triplet)
    try:
        triplet = levy.triplet_from_json(obj)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"bad triplet file: {exc}") from exc
    rep = levy.min_pvar_exponent(levy.PvarExponentInput.from_triplet(triplet))
    report = {
        "config": {"triplet_file": args.triplet, "command": "minp"},
        "p_star": rep.p_star,
        "binding": list(rep.binding),
        "conditions": rep.conditions,
        "boundary_classified_infinite": rep.boundary_classified_infinite,
    }
    _dump_json(report, _out_dir(args) / "minp.json")
    print(rep.describe())
    return EXIT_OK


def _walk_family_from_scenario(sc: dict, ctx):
    kind = sc.get("walk_family", "gaussian")
    scale = float(sc.get("walk_scale", 1.0))

    def gaussian(n, rng):
        incs = []
        for _ in range(n):
            coords = np.zeros(ctx.m)
            coords[: ctx.d] = scale * rng.standard_normal(ctx.d) / math.sqrt(n)
            incs.append(algebra.group_exp(algebra.LieElement(ctx, coords)))
        return paths.walk_from_array(incs, ctx=ctx)

    def rademacher(n, rng):
        incs = []
        for _ in range(n):
            coords = np.zeros(ctx.m)
            coords[: ctx.d] = scale * rng.choice([-1.0, 1.0], ctx.d) / math.sqrt(n)
            incs.append(algebra.group_exp(algebra.LieElement(ctx, coords)))
        return paths.walk_from_array(incs, ctx=ctx)

    def jump(n, rng):
        incs = []
        for _ in range(n):
            coords = np.zeros(ctx.m)
            coords[: ctx.d] = scale * rng.standard_normal(ctx.d) / math.sqrt(n)
            if rng.uniform() < 2.0 / n:
                coords[: ctx.d] += rng.choice([-1.0, 1.0]) * np.ones(ctx.d)
            incs.append(algebra.group_exp(algebra.LieElement(ctx, coords)))
        return paths.walk_from_array(incs, ctx=ctx)

    families = {"gaussian": gaussian, "rademacher": rademacher, "jump": jump}
    if kind not in families:
        raise ValidationError(f"unknown walk family {kind!r}; options {sorted(families)}")
    return families[kind]


def cmd_probe(args) -> int:
    sc = _load_json(args.scenario)
    ctx = _scenario_context(sc)
    seed = args.seed if args.seed is not None else int(sc.get("seed", 0))
    out = _out_dir(args)
    name = sc.get("name", args.kind)
    config = {"scenario": sc, "seed": seed, "command": f"probe {args.kind}"}

    if args.kind == "feinsilver":
        triplet = _scenario_triplet(sc, ctx)
        factory = lambda n: levy.approximating_array(triplet, n)
        rep = levy.feinsilver_probe(
            factory, triplet, n_grid=tuple(sc.get("n_grid", (8, 32, 128, 512))),
            mc=int(sc.get("mc", 4000)), seed=seed,
        )
        _dump_json({"config": config, "report": rep}, out / f"{name}_feinsilver.json")
        _dump_csv(
            [
                {"n": row["n"], **{f"nF_{i}": v for i, v in enumerate(row["nF_f"])}}
                for row in rep["rows"]
            ],
            out / f"{name}_feinsilver.csv",
        )
        print(f"feinsilver trend over n_grid written to {out}/{name}_feinsilver.*")
        return EXIT_OK

    if args.kind == "tightness":
        family = _walk_family_from_scenario(sc, ctx)
        rep = levy.tightness_probe(
            family,
            delta_grid=tuple(sc.get("delta_grid", (0.25, 0.5, 1.0))),
            h=float(sc.get("h", 0.1)),
            n_walks=int(sc.get("mc", 150)),
            walk_steps=int(sc.get("steps", 64)),
            seed=seed,
        )
        _dump_json({"config": config, "report": rep}, out / f"{name}_tightness.json")
        _dump_csv(rep["rows"], out / f"{name}_tightness.csv")
        print(f"tightness bound holds for all deltas: {rep['all_hold']}")
        return EXIT_OK if rep["all_hold"] else EXIT_TOLERANCE

    if args.kind == "bg":
        triplet = _scenario_triplet(sc, ctx)
        rep = levy.bg_divergence_probe(
            triplet,
            i=int(sc.get("coordinate", 0)),
            q=float(sc.get("q", 2.0)),
            mesh_grid=tuple(sc.get("mesh_grid", (64, 128, 256, 512))),
            mc=int(sc.get("mc", 64)),
            seed=seed,
        )
        _dump_json({"config": config, "report": rep}, out / f"{name}_bg.json")
        _dump_csv(rep["rows"], out / f"{name}_bg.csv")
        print(
            f"cross-mesh slope {rep['cross_mesh_slope']:.3f}, "
            f"partial-sum slopes {[round(r['partial_sum_slope'], 3) for r in rep['rows']]}"
        )
        return EXIT_OK

    raise ValidationError(f"unknown probe kind {args.kind!r}")


def _converge_setup(sc: dict, ctx, seed: int):
    """Build (array_factory, path function, target) for a walk-converge scenario."""
    preset = sc.get("preset")
    fields = _scenario_fields(sc, ctx)
    if preset == "kunita-linear":
        sigma = np.asarray(sc.get("sigma", np.eye(ctx.d).tolist()), dtype=float)
        drift = np.zeros(ctx.m)
        drift[: ctx.d] = np.asarray(sc.get("drift", np.zeros(ctx.d).tolist()), dtype=float)
        pf = _resolve_path_function(sc.get("path_function", "logchord"), ctx)
        A = np.zeros((ctx.m, ctx.m))
        A[: ctx.d, : ctx.d] = sigma @ sigma.T
        triplet = levy.LevyTriplet(ctx, A, drift, levy.JumpMeasure(ctx=ctx))
        psi, _ = flows.char_exponent(triplet, pf, fields)
        target = flows._expm(psi)
        factory = lambda n: flows.GaussianArray(ctx, sigma, drift, n)
        return factory, pf, target
    if preset == "nonlinear":
        # Staircase interpolation of a correlated Gaussian walk: the lift picks
        # up the McShane area drift -Sigma_{12}/2 on the [e1,e2] coordinate.
        if ctx.d != 2 or ctx.N != 2:
            raise ValidationError("nonlinear preset needs d=2, N=2")
        sigma = np.asarray(sc.get("sigma", [[1.0, 0.6], [0.0, 0.8]]), dtype=float)
        pf = _resolve_path_function("staircase", ctx)
        cov = sigma @ sigma.T
        A = np.zeros((ctx.m, ctx.m))
        A[:2, :2] = cov
        drift = np.zeros(ctx.m)
        drift[2] = -0.5 * cov[0, 1]
        triplet = levy.LevyTriplet(ctx, A, drift, levy.JumpMeasure(ctx=ctx))
        psi, _ = flows.char_exponent(triplet, interpolation.log_linear_pf(ctx), fields)
        target = flows._expm(psi)

        class StaircaseArray:
            def __init__(self, n):
                self.n = n

            def exact_mean(self, pf_, fields_):
                d = ctx.d
                x, w = np.polynomial.hermite_e.hermegauss(int(sc.get("gh_nodes", 24)))
                w = w / math.sqrt(2 * math.pi)
                zs = np.stack([g.ravel() for g in np.meshgrid(x, x, indexing="ij")], axis=1)
                ws = np.outer(w, w).ravel()
                acc = np.zeros((fields_.e, fields_.e), dtype=complex)
                for z, wt in zip(zs, ws):
                    y = sigma @ z / math.sqrt(self.n)
                    segs = [np.array([y[0], 0.0]), np.array([0.0, y[1]])]
                    path = paths.signature_lift(segs, ctx.N, ctx=ctx)
                    acc += wt * flows.solve_linear(path, fields_)
                return acc

        return (lambda n: StaircaseArray(n)), pf, target
    if preset == "perturbed":
        sigma = np.asarray(sc.get("sigma", np.eye(ctx.d).tolist()), dtype=float)
        top = ctx.level_slice(ctx.N)
        vco = np.zeros(ctx.m)
        vco[top] = np.asarray(
            sc.get("v", [1.0] + [0.0] * (top.stop - top.start - 1)), dtype=float
        )
        v = algebra.LieElement(ctx, vco)
        pf = interpolation.perturbed_pf(ctx, v)
        A = np.zeros((ctx.m, ctx.m))
        A[: ctx.d, : ctx.d] = sigma @ sigma.T
        triplet = levy.LevyTriplet(ctx, A, vco, levy.JumpMeasure(ctx=ctx))
        psi, _ = flows.char_exponent(triplet, interpolation.log_linear_pf(ctx), fields)
        target = flows._expm(psi)
        factory = lambda n: flows.PerturbedArray(ctx, sigma, v, n)
        return factory, pf, target
    if preset == "drift":
        drift = np.asarray(sc["drift_full"], dtype=float)
        pf = _resolve_path_function(sc.get("path_function", "logchord"), ctx)
        triplet = levy.LevyTriplet(
            ctx, np.zeros((ctx.m, ctx.m)), drift, levy.JumpMeasure(ctx=ctx)
        )
        psi, _ = flows.char_exponent(triplet, pf, fields)
        target = flows._expm(psi)
        factory = lambda n: flows.DriftArray(ctx, drift, n)
        return factory, pf, target
    raise ValidationError(
        f"unknown preset {preset!r}; options: kunita-linear, nonlinear, perturbed, drift"
    )


def cmd_walk_converge(args) -> int:
    sc = _load_json(args.scenario)
    ctx = _scenario_context(sc)
    seed = args.seed if args.seed is not None else int(sc.get("seed", 0))
    factory, pf, target = _converge_setup(sc, ctx, seed)
    fields = _scenario_fields(sc, ctx)
    rep = flows.convergence_experiment(
        factory, pf, fields, target,
        n_grid=tuple(sc.get("n_grid", (16, 64, 256, 1024))),
        mc=int(sc.get("mc", 0)), seed=seed,
    )
    out = _out_dir(args)
    name = sc.get("name", sc.get("preset", "converge"))
    _dump_json(
        {
            "config": {"scenario": sc, "seed": seed, "command": "walk-converge"},
            "report": rep,
        },
        out / f"{name}_converge.json",
    )
    _dump_csv(rep["rows"], out / f"{name}_converge.csv")
    errs = [r["error"] for r in rep["rows"]]
    print(f"errors across n_grid: {[f'{e:.3e}' for e in errs]} (inversions: {rep['inversions']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roughwalk",
        description="Walks, Levy samplers and linear RDE flows in free nilpotent groups",
    )
    parser.add_argument("--seed", type=int, default=None, help="override scenario seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for MC commands")
    parser.add_argument("--out", type=str, default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample Levy paths from a scenario triplet")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("signature", help="level-N lift of piecewise-linear segments")
    p.add_argument("segments", help="JSON file with a 'segments' array")
    p.add_argument("--level", type=int, required=True)
    p.set_defaults(func=cmd_signature)

    p = sub.add_parser("pvar", help="exact p-variation of a stored path")
    p.add_argument("path", help="path JSON file")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--pvar-refine", type=int, default=0)
    p.set_defaults(func=cmd_pvar)

    p = sub.add_parser("connect", help="connect the jumps of a cadlag path")
    p.add_argument("path", help="path JSON file")
    p.add_argument("--pf", default="logchord")
    p.add_argument("--r-first", type=float, default=0.5)
    p.add_argument("--r-ratio", type=float, default=0.5)
    p.set_defaults(func=cmd_connect)

    p = sub.add_parser("lk", help="Monte Carlo Levy-Khintchine verification")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_lk)

    p = sub.add_parser("minp", help="minimal finite-p-variation exponent of a triplet")
    p.add_argument("triplet", help="triplet JSON file")
    p.set_defaults(func=cmd_minp)

    p = sub.add_parser("probe", help="empirical diagnostics")
    p.add_argument("kind", choices=["feinsilver", "tightness", "bg"])
    p.add_argument("scenario")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("walk-converge", help="walk-to-Levy convergence trend")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_walk_converge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (KeyError, TypeError) as exc:
        print(f"error: malformed input ({exc})", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
