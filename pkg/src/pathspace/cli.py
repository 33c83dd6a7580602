"""Command line entry point: ``pathspace <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines, ``#``
comments); explicit flags override the file.  Reports are JSON documents
whose ``payload`` (config, seed, versions and numeric results) is
deterministic; wall-clock data lives in ``meta`` and is excluded from
``config_hash`` and ``payload_hash``.

Exit codes: 0 all gating verdicts hold, 2 usage error, 3 some verdict
violated, 4 some verdict inconclusive.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from importlib import metadata

import numpy as np

from . import constants as const
from . import cylinder as cyl
from . import hbm, she, verify
from .exceptions import DomainError, PathspaceError, StepSizeError, UsageError
from .geometry import get_manifold

EXIT_OK, EXIT_USAGE, EXIT_VIOLATED, EXIT_INCONCLUSIVE = 0, 2, 3, 4
# options that change where output goes or how fast it is produced, never what it is
NON_PAYLOAD = {"out", "csv", "workers", "config", "command", "trajectory_out"}


class ConfigError(UsageError):
    pass


# ----------------------------------------------------------------------------------
# parsing helpers
# ----------------------------------------------------------------------------------

def _int(text) -> int:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if v != int(v):
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    return int(v)


def _pos_int(text) -> int:
    v = _int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return v


def _pos_float(text) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return v


def _float_list(text) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _int_list(text) -> list[int]:
    vals = _float_list(text)
    if any(v != int(v) or v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"not a list of positive integers: {text!r}")
    return [int(v) for v in vals]


def _manifold(text) -> str:
    try:
        return get_manifold(text).id
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _window(text):
    v = _float_list(text)
    if len(v) != 2 or v[1] <= v[0]:
        raise argparse.ArgumentTypeError(f"window must be 'a,b' with a < b: {text!r}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p, seed=True):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--out", help="write the JSON report here (default: stdout)")
    p.add_argument("--workers", type=_pos_int, default=None,
                   help="worker threads (default: $PATHSPACE_WORKERS or 1); never changes results")
    if seed:
        p.add_argument("--seed", type=_int, default=0)


def _paths_args(p, T_default=1.0, paths=100_000, steps=128):
    p.add_argument("--manifold", type=_manifold, default="sphere:2")
    p.add_argument("--T", type=_pos_float, default=T_default)
    p.add_argument("--paths", type=_pos_int, default=paths)
    p.add_argument("--steps", type=_pos_int, default=steps)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="pathspace", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = sub.add_parser("sample-bm", help="sample horizontal Brownian motion paths")
    _common(p)
    _paths_args(p, paths=16)
    p.add_argument("--dump", help="binary path dump (HBMP format)")
    subs["sample-bm"] = p

    p = sub.add_parser("constants", help="explicit constants C0, C, C1, C2n")
    _common(p, seed=False)
    p.add_argument("--K", type=float, required=False)
    p.add_argument("--T", type=_pos_float, default=1.0)
    p.add_argument("--n", type=_pos_int, default=1)
    subs["constants"] = p

    for name, what in (("verify-lsi", "log-Sobolev inequalities"), ("verify-poincare", "Poincare inequalities")):
        p = sub.add_parser(name, help=what)
        _common(p)
        _paths_args(p)
        p.add_argument("--K", type=float, help="curvature bound Ric >= -K (required)")
        p.add_argument("--n", type=_int_list, default=[1, 2, 4], help="window parameters, e.g. 1,2,4")
        p.add_argument("--functions", default="default",
                       help="registry expressions separated by '|', or 'default'")
        if name == "verify-lsi":
            p.add_argument("--normalization", choices=sorted(verify.LSI_FACTORS), default="literal")
        p.add_argument("--csv", help="write one row per report")
        subs[name] = p

    p = sub.add_parser("verify-gradient-ineq", help="semigroup gradient inequality")
    _common(p)
    p.add_argument("--manifold", type=_manifold, default="sphere:2")
    p.add_argument("--K", type=float, help="curvature bound Ric >= -K (required)")
    p.add_argument("--T", type=_float_list, default=[0.1, 0.5, 1.0], help="horizons, e.g. 0.1,0.5,1")
    p.add_argument("--paths", type=_pos_int, default=100_000)
    p.add_argument("--steps", type=_pos_int, default=128)
    p.add_argument("--control", action="store_true", help="mark reports as non-gating (falsification run)")
    p.add_argument("--csv")
    subs["verify-gradient-ineq"] = p

    p = sub.add_parser("ricci-extract", help="small-time curvature limits")
    _common(p)
    p.add_argument("--manifold", type=_manifold, default="sphere:2")
    p.add_argument("--T-seq", dest="T_seq", type=_float_list, default=[0.02, 0.01, 0.005])
    p.add_argument("--paths", type=_pos_int, default=1_000_000)
    p.add_argument("--steps", type=_pos_int, default=128)
    subs["ricci-extract"] = p

    p = sub.add_parser("she-run", help="simulate the lattice heat equation")
    _common(p)
    _she_args(p)
    p.add_argument("--steps", type=_pos_int, default=100_000)
    p.add_argument("--snapshot-every", dest="snapshot_every", type=_pos_int, default=100)
    p.add_argument("--replicas", type=_pos_int, default=1)
    p.add_argument("--init", choices=["base", "stationary"], default="base")
    p.add_argument("--noise-scale", dest="noise_scale", type=_pos_float, default=1.0)
    p.add_argument("--trajectory-out", dest="trajectory_out", help="binary trajectory (SHET format)")
    subs["she-run"] = p

    p = sub.add_parser("she-invariance", help="stationary covariance against the invariant law")
    _common(p)
    _she_args(p, N=16)
    p.add_argument("--burn-in", dest="burn_in", type=_pos_int, default=20_000)
    p.add_argument("--samples", type=_pos_int, default=40_000)
    p.add_argument("--replicas", type=_pos_int, default=256)
    p.add_argument("--thin", type=_pos_int, default=10)
    p.add_argument("--noise-scale", dest="noise_scale", type=_pos_float, default=1.0)
    subs["she-invariance"] = p

    for name, help_ in (("she-qv", "quadratic variation"), ("she-ergodic", "ergodic averages"),
                        ("she-decay", "L2 decay envelope")):
        p = sub.add_parser(name, help=help_)
        _common(p, seed=False)
        p.add_argument("--trajectory", required=False, help="trajectory file written by she-run")
        p.add_argument("--function", default="linear-coordinate:0", help="registry expression")
        if name == "she-qv":
            p.add_argument("--window", type=_window, default=None)
            p.add_argument("--rtol", type=_pos_float, default=0.05)
            p.add_argument("--continuum-rate", dest="continuum_rate", type=float, default=None)
        if name == "she-ergodic":
            p.add_argument("--reference", type=float, default=None)
            p.add_argument("--csv", help="running means")
        if name == "she-decay":
            p.add_argument("--K", type=float, default=0.0)
            p.add_argument("--max-time", dest="max_time", type=_pos_float, default=2.0)
            p.add_argument("--csv", help="autocovariance series")
        subs[name] = p
    return parser, subs


def _she_args(p, N=32):
    p.add_argument("--manifold", type=_manifold, default="flat:1")
    p.add_argument("--topology", choices=list(she.TOPOLOGIES), default="based-path")
    p.add_argument("--N", type=_pos_int, default=N)
    p.add_argument("--dt", type=_pos_float, default=1e-4)
    p.add_argument("--speed", type=_pos_float, default=0.5)


def read_config(path: str, sub: argparse.ArgumentParser) -> dict:
    """Parse a flat ``key = value`` file against the options of ``sub``; errors name the line."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest == "experiment":
            if value != sub.prog.split()[-1]:
                raise ConfigError(f"{path}:{no}: config is for experiment {value!r}, not {sub.prog.split()[-1]!r}")
            continue
        if dest not in actions:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        act = actions[dest]
        try:
            if isinstance(act, argparse._StoreTrueAction):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                val = value.lower() in ("true", "1", "yes")
            elif act.type is not None:
                val = act.type(value)
            else:
                val = value
            if act.choices is not None and val not in act.choices:
                raise ValueError(f"{val!r} not in {list(act.choices)}")
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}:{no}: bad value for {key!r}: {exc}") from None
        out[dest] = val
    return out


# ----------------------------------------------------------------------------------
# output
# ----------------------------------------------------------------------------------

def versions() -> dict:
    import numba
    import scipy

    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"pathspace": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def _canonical(obj) -> str:
    return json.dumps(verify._jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in NON_PAYLOAD and v is not None}


def exit_code(reports) -> int:
    gating = [r for r in reports if getattr(r, "gating", True)]
    if any(r.verdict == "violated" and not getattr(r, "equality", False) for r in gating):
        return EXIT_VIOLATED
    if any(r.verdict == "inconclusive" and not getattr(r, "equality", False) for r in gating):
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def envelope(args, results: dict, reports=()) -> tuple[dict, int]:
    cfg = config_of(args)
    code = exit_code(reports)
    rep = [r.to_dict() for r in reports]
    counts = {}
    for r in reports:
        key = "equality" if getattr(r, "equality", False) else r.verdict
        counts[key] = counts.get(key, 0) + 1
    payload = {"schema": verify.REPORT_SCHEMA, "experiment": args.command, "config": cfg, "config_hash": _sha(_canonical(cfg)),
               "seed": cfg.get("seed"), "versions": versions(), "results": results, "reports": rep,
               "summary": counts, "exit_code": code}
    payload["payload_hash"] = _sha(_canonical({k: v for k, v in payload.items()}))
    return {"payload": verify._jsonable(payload), "meta": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}}, code


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _emit(doc: dict, out: str | None):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ----------------------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------------------

def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _functions(args, M, T):
    if args.functions.strip() == "default":
        return cyl.default_suite(M, T)
    exprs = [e.strip() for e in args.functions.split("|") if e.strip()]
    for e in exprs:
        cyl.build(M, e, T)  # validate before any simulation
    return exprs


def run_sample_bm(args):
    M = get_manifold(args.manifold)
    p = hbm.sample_path(M, None, args.T, args.steps, args.seed, args.paths)
    if args.dump:
        with open(args.dump, "wb") as fh:
            hbm.write_paths(fh, p, {"seed": args.seed})
    o = M.base_point()
    d_end = M.distance(p.points[:, -1], o)
    res = {"n_paths": p.n_paths, "n_steps": p.n_steps, "T": p.T,
           "resampled": int(p.resample.sum()),
           "terminal_distance_mean": float(d_end.mean()),
           "terminal_distance_sq_mean": float(np.mean(d_end ** 2)),
           "max_residual": float(np.max(np.abs(M.residual(p.points)), initial=0.0))
           if M.ambient_dim > M.dim else 0.0,
           "checksum": hashlib.sha256(np.ascontiguousarray(p.points, dtype="<f8").tobytes()).hexdigest()}
    return res, []


def run_constants(args):
    _require(args, "K")
    return const.all_constants(args.K, args.T, args.n), []


def _sampler(args, M):
    return hbm.PathSampler(M, args.T, args.steps, args.paths, args.seed, workers=args.workers)


def run_verify(args):
    _require(args, "K")
    M = get_manifold(args.manifold)
    for n in args.n:
        if args.T < 1.0 / n - 1e-12:
            raise UsageError(f"T={args.T} must be >= 1/n for n={n}")
    exprs = _functions(args, M, args.T)
    S = _sampler(args, M)
    if args.command == "verify-lsi":
        checks = ("lsi-damped", "lsi-l2", "lsi-windowed")
        reps = verify.run_suite(M, exprs, args.K, S, tuple(args.n), checks, args.normalization)
    else:
        reps = verify.run_suite(M, exprs, args.K, S, tuple(args.n), ("poincare",))
    admissible = args.K >= -M.ricci_constant
    if getattr(args, "csv", None):
        _write_csv(args.csv, ["inequality", "function", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "margin",
                              "margin_stderr", "verdict", "equality"],
                   [[r.inequality, r.function, r.lhs.value, r.lhs.stderr, r.rhs.value, r.rhs.stderr, r.margin,
                     r.margin_stderr, r.verdict, r.equality] for r in reps])
    return {"manifold": M.id, "K": args.K, "admissible": admissible, "n_functions": len(exprs)}, reps


def run_gradient(args):
    _require(args, "K")
    M = get_manifold(args.manifold)
    f = verify.build_test_function(M)
    reps = []
    for T in args.T:
        S = hbm.PathSampler(M, T, args.steps, args.paths, args.seed, workers=args.workers)
        reps.append(verify.check_gradient_inequality(M, f, None, T, args.K, S, gating=not args.control))
    if args.csv:
        _write_csv(args.csv, ["T", "lhs", "rhs", "margin", "margin_stderr", "verdict"],
                   [[r.details["T"], r.lhs.value, r.rhs.value, r.margin, r.margin_stderr, r.verdict] for r in reps])
    return {"manifold": M.id, "K": args.K, "admissible": args.K >= -M.ricci_constant}, reps


def run_ricci(args):
    M = get_manifold(args.manifold)
    r = verify.estimate_ricci_limits(M, None, None, args.T_seq, args.paths, args.seed, args.steps,
                                     workers=args.workers)
    g, v = r["gradient"], r["variance"]
    tol = lambda est: 0.1 * max(abs(r["target"]), 0.5)  # noqa: E731
    res = {"target": r["target"], "gradient": g.to_dict(), "variance": v.to_dict(),
           "agree": verify.limits_agree(g, v),
           "within_10pct": {"gradient": abs(g.estimate.value - r["target"]) <= tol(g),
                            "variance": abs(v.estimate.value - r["target"]) <= tol(v)}}
    verdict = "holds" if res["agree"] and all(res["within_10pct"].values()) else "violated"
    if g.inconclusive or v.inconclusive:
        verdict = "inconclusive"
    return res, [she.SheReport("ricci-extract", M.id, verdict, {"target": r["target"]})]


def run_she_run(args):
    lat = she.Lattice(args.manifold, args.N, args.topology, args.speed)
    tr = she.simulate(lat, args.dt, args.steps, args.seed, args.replicas, args.snapshot_every, args.init,
                      args.noise_scale, workers=args.workers)
    if args.trajectory_out:
        with open(args.trajectory_out, "wb") as fh:
            she.write_trajectory(fh, tr)
    M = lat.manifold
    res = {"lattice": lat.to_dict(), "n_snapshots": int(tr.times.size), "final_time": float(tr.times[-1]),
           "max_residual": float(np.max(np.abs(M.residual(tr.snapshots)))) if M.ambient_dim > M.dim else 0.0,
           "pre_projection_residual": tr.meta.get("pre_residual", 0.0),
           "checksum": hashlib.sha256(np.ascontiguousarray(tr.snapshots, dtype="<f8").tobytes()).hexdigest()}
    return res, []


def run_she_invariance(args):
    r = she.run_invariance_test(args.manifold, args.N, args.dt, args.burn_in, args.samples, args.seed,
                                args.replicas, args.thin, args.noise_scale, args.topology, args.speed,
                                workers=args.workers)
    return {}, [r]


def _load_traj(args):
    _require(args, "trajectory")
    try:
        with open(args.trajectory, "rb") as fh:
            return she.read_trajectory(fh)
    except OSError as exc:
        raise UsageError(f"cannot read trajectory {args.trajectory}: {exc}") from None


def run_she_qv(args):
    tr = _load_traj(args)
    F = cyl.build(tr.lattice.manifold, args.function, 1.0)
    r = she.qv_check(F, tr, args.window, args.rtol, args.continuum_rate)
    return {}, [r]


def run_she_ergodic(args):
    tr = _load_traj(args)
    F = cyl.build(tr.lattice.manifold, args.function, 1.0)
    running, r = she.ergodic_average(F, tr, args.reference)
    if args.csv:
        _write_csv(args.csv, ["t"] + [f"replica{i}" for i in range(running.shape[0])],
                   np.column_stack([tr.times, running.T]).tolist())
    return {}, [r]


def run_she_decay(args):
    tr = _load_traj(args)
    F = cyl.build(tr.lattice.manifold, args.function, 1.0)
    r = she.decay_check(F, tr, args.K, args.max_time)
    if args.csv:
        d = r.details
        _write_csv(args.csv, ["lag", "rho", "rho_stderr", "envelope"],
                   np.column_stack([d["lags"], d["rho"], d["rho_stderr"], d["envelope"]]).tolist())
    return {}, [r]


RUNNERS = {
    "sample-bm": run_sample_bm, "constants": run_constants, "verify-lsi": run_verify,
    "verify-poincare": run_verify, "verify-gradient-ineq": run_gradient, "ricci-extract": run_ricci,
    "she-run": run_she_run, "she-invariance": run_she_invariance, "she-qv": run_she_qv,
    "she-ergodic": run_she_ergodic, "she-decay": run_she_decay,
}


def parse(argv=None):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = subs[args.command]
        sub.set_defaults(**read_config(args.config, sub))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    saved = os.environ.get("PATHSPACE_WORKERS")
    try:
        args = parse(argv)
        if args.workers:
            os.environ["PATHSPACE_WORKERS"] = str(args.workers)
        results, reports = RUNNERS[args.command](args)
        doc, code = envelope(args, results, reports)
        _emit(doc, args.out)
        return code
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, DomainError, ValueError) as exc:
        print(f"pathspace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StepSizeError as exc:
        print(f"pathspace: step-size error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PathspaceError as exc:
        print(f"pathspace: {exc}", file=sys.stderr)
        return 1
    finally:
        if saved is None:
            os.environ.pop("PATHSPACE_WORKERS", None)
        else:
            os.environ["PATHSPACE_WORKERS"] = saved


if __name__ == "__main__":
    raise SystemExit(main())
