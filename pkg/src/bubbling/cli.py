"""Batch front end: ``bubbling {green,construct,continue,verify}``.

Every command writes its outputs plus ``manifest.json`` into the output
directory and prints only the manifest path on stdout.  Diagnostics go to
stderr.  Exit codes: 0 success, 1 verification failure, 2 invalid input,
3 ansatz, 4 linear solve, 5 reduction, 6 Green function, 7 continuation.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BadProblem, BubblingError, ConfigError
from .grid import _atomic_write, read_field, write_field
from .oracle import trace_fold
from .pipeline import (Timer, ansatz_config, bound_lambda0, compute_green, green_grid_size, height_samples,
                       mode_decay)
from .problem import RunConfig, config_to_text, load_config

log = logging.getLogger("bubbling")

EXIT_VERIFY, EXIT_INPUT, EXIT_ANSATZ, EXIT_LINEAR, EXIT_REDUCTION, EXIT_GREEN, EXIT_CONTINUE = 1, 2, 3, 4, 5, 6, 7


class StageFailure(Exception):
    def __init__(self, stage, code, cause):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.code = code


class _Stages(Timer):
    """Timer that also converts package errors into stage failures."""

    def run(self, name, code, fn, *args, **kwargs):
        with self.stage(name):
            try:
                return fn(*args, **kwargs)
            except (BadProblem, ConfigError):
                raise
            except BubblingError as exc:
                raise StageFailure(name, code, exc) from exc


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats so the JSON stays strict."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _clean(obj.item())
    return obj


class Outputs:
    """Collects files written to ``root`` for the manifest."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def json(self, name, data):
        text = json.dumps(_clean(data), indent=2, sort_keys=True, default=_json_default) + "\n"
        return self.raw(name, text.encode())

    def raw(self, name, data: bytes):
        path = self.root / name
        _atomic_write(path, data)
        self.files.append(path)
        return path

    def field(self, name, f):
        path = write_field(self.root / name, f)
        self.files.append(path)
        return path

    def manifest(self, command, cfg: RunConfig, timings, extra=None) -> Path:
        inventory = [{"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                      "bytes": p.stat().st_size} for p in sorted(self.files)]
        data = {
            "command": command,
            "config": config_to_text(cfg),
            "versions": {"bubbling": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": _version("scipy"), "pyamg": _version("pyamg")},
            "tolerances": {"fixed_point": cfg.fixed_point_tol, "reduced": cfg.reduced_tol,
                           "newton": cfg.newton_tol, "sigma": cfg.sigma},
            "seed": None,
            "timings": {k: round(v, 3) for k, v in timings.items()},
            "files": inventory,
        }
        if extra:
            data.update(extra)
        path = self.root / "manifest.json"
        text = json.dumps(_clean(data), indent=2, sort_keys=True, default=_json_default) + "\n"
        _atomic_write(path, text.encode())
        return path


def _version(name):
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version(name)
    except PackageNotFoundError:
        return None


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.lam is not None:
        changes["lam"] = args.lam
    if args.grid is not None:
        changes["n"] = args.grid
    if args.points is not None:
        try:
            changes["bubble_points"] = tuple(int(v) for v in args.points.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"--points expects indices, got {args.points!r}") from exc
    if args.out is not None:
        changes["output_dir"] = args.out
    return dataclasses.replace(cfg, **changes)


def cmd_green(cfg: RunConfig) -> Path:
    st = _Stages()
    out = Outputs(Path(cfg.output_dir))
    cfg.problem(lam=0.0, n=green_grid_size(cfg)).require_admissible()
    gf = st.run("green", EXIT_GREEN, compute_green, cfg)
    decay = [st.run("mode_decay", EXIT_GREEN, mode_decay, gf, j) for j in range(len(gf.points))]
    out.field("H.field", gf.regular_part)
    rows = ["point,radius," + ",".join(f"a{k}" for k in range(decay[0].modes.shape[1]))]
    for j, rep in enumerate(decay):
        for r, modes in zip(rep.radii, rep.modes):
            rows.append(f"{j},{r!r}," + ",".join(repr(float(v)) for v in modes))
    out.raw("mode_decay.csv", ("\n".join(rows) + "\n").encode())
    out.json("green.json", {
        "n": gf.grid.n,
        "chart_radius": gf.chart_radius,
        "H_at_points": gf.H_at_points,
        "mass": gf.mass_check,
        "mass_target": gf.mass_target,
        "mass_error": gf.mass_error,
        "mass_within_1pct": gf.mass_error <= 0.01,
        "beta_bounds": gf.beta_bounds,
        "mode_decay": [{"k_exponents": r.k_exponents, "log_exponents": r.log_exponents, "limit": r.L_limit,
                        "a0_limit": r.b0} for r in decay],
    })
    return out.manifest("green", cfg, st)


def _write_construction(out: Outputs, con, prefix=""):
    out.field(f"{prefix}u.field", con.u)
    out.json(f"{prefix}construct.json", con.summary())


def cmd_construct(cfg: RunConfig) -> Path:
    from .ansatz import build
    from .linear import ProjectedSolver
    from .reduction import solve_reduced, verify_solution

    st = _Stages()
    out = Outputs(Path(cfg.output_dir))
    problem = cfg.problem()
    problem.require_admissible()
    gf = st.run("green", EXIT_GREEN, compute_green, cfg)
    acfg = ansatz_config(cfg)
    ans = st.run("ansatz", EXIT_ANSATZ, build, problem, gf, config=acfg)
    solver = st.run("linear", EXIT_LINEAR, ProjectedSolver, ans, chi_radius=cfg.chi_radius, sigma=cfg.sigma)
    state = st.run("reduction", EXIT_REDUCTION, solve_reduced, problem, gf, config=acfg, base=ans, solver=solver,
                   tol=cfg.reduced_tol, fixed_point_tol=cfg.fixed_point_tol)
    report = st.run("verify", EXIT_VERIFY, verify_solution, problem, state.u, radius=0.5 * gf.chart_radius)

    from .pipeline import Construction

    con = Construction(problem, gf, ans, state, report, dict(st))
    _write_construction(out, con)
    rows = ["step,max_c,iterations,contraction"] + [
        f"{i},{h['max_c']!r},{h['iterations']},{h['contraction']!r}" for i, h in enumerate(state.history)]
    out.raw("c_history.csv", ("\n".join(rows) + "\n").encode())
    return out.manifest("construct", cfg, st, {"ok": report.ok})


def cmd_continue(cfg: RunConfig) -> Path:
    from .oracle import height_law

    st = _Stages()
    out = Outputs(Path(cfg.output_dir))
    coarse = cfg.problem(lam=0.0, n=cfg.continuation_n)
    coarse.require_admissible()
    bound = bound_lambda0(coarse)
    grid = np.linspace(0.0, 0.95 * bound, 20)
    warnings = []
    fold = None
    try:
        fold = st.run("continuation", EXIT_CONTINUE, trace_fold, coarse, grid)
    except StageFailure as exc:
        warnings.append(str(exc))
        log.warning("%s", exc)
    report = {"lambda0_bound": bound, "warnings": warnings}
    if fold is not None:
        out.raw("minimal.csv", fold.minimal.to_csv().encode())
        out.raw("large.csv", fold.continuation.to_csv().encode())
        report.update({"lambda0": fold.fold, "lambda0_below_bound": fold.fold is not None and fold.fold < bound,
                       "test_lambda": fold.test_lambda, "test_norms": list(fold.test_norms),
                       "two_solutions": fold.two_solutions})
    lambdas = sorted(cfg.lambda_grid, reverse=True)
    if len(lambdas) >= 3:
        try:
            rows = st.run("height_law", EXIT_CONTINUE, height_samples, cfg, lambdas)
            fit = height_law([r[0] for r in rows], [r[2] for r in rows])
            out.raw("heights.csv", ("lambda,n,u_p1\n" + "".join(f"{a!r},{b},{c!r}\n" for a, b, c in rows)).encode())
            report["height_law"] = fit.as_dict()
        except StageFailure as exc:
            warnings.append(str(exc))
            log.warning("%s", exc)
    out.json("continue.json", report)
    return out.manifest("continue", cfg, st)


def cmd_verify(cfg: RunConfig, field_file) -> tuple[Path, bool]:
    from .reduction import verify_solution

    st = _Stages()
    out = Outputs(Path(cfg.output_dir))
    u = read_field(field_file)
    problem = cfg.problem(n=u.grid.n)
    if abs(u.grid.side_length - problem.grid.side_length) > 0:
        raise ConfigError("field side length differs from the configuration")
    gamma = None
    if problem.lam > 0:
        from .green import default_chart_radius

        gamma = default_chart_radius(problem, cfg.chart_fraction)
    rep = st.run("verify", EXIT_VERIFY, verify_solution, problem, u,
                 radius=None if gamma is None else 0.5 * gamma)
    out.json("verify.json", rep.as_dict())
    return out.manifest("verify", cfg, st, {"ok": rep.ok, "field": str(field_file)}), rep.ok


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bubbling", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("green", "construct", "continue", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--points", default=None, help="indices of the zeros that carry bubbles, e.g. 0,1")
        p.add_argument("--grid", type=int, default=None, help="grid size n")
        if name == "verify":
            p.add_argument("field", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "verify":
            path, ok = cmd_verify(cfg, args.field)
            code = 0 if ok else EXIT_VERIFY
        else:
            path = {"green": cmd_green, "construct": cmd_construct, "continue": cmd_continue}[args.command](cfg)
            code = 0
            if args.command == "construct":
                ok = json.loads(path.read_text()).get("ok", True)
                code = 0 if ok else EXIT_VERIFY
    except (BadProblem, ConfigError, OSError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INPUT
    except StageFailure as exc:
        log.error("%s", exc)
        return exc.code
    print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
