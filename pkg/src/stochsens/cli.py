"""Command-line entry point: ``stochsens {solve-lq,solve-mv,sens,check}``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 solver error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import backend_name
from .checks import FAIL, run_suite
from .config import ConfigError, RunConfig, load_config
from .errors import SolverError, SpecError
from .lq import mc_cost, solve_lq, value_duality_residual
from .mv import mc_verify
from .sensitivity import check_lq, check_mv, solve_mv

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
CSV_COLUMNS = ("label", "adjoint_value", "fd_value", "abs_gap", "rel_gap", "mc_stderr", "runtime_ms")


# ------------------------------------------------------------------ output


def fmt(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, cfg: RunConfig) -> None:
    out = cfg.output["path"]
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _flatten(record, prefix="") -> list[tuple[str, object]]:
    rows = []
    if isinstance(record, dict):
        for k, v in record.items():
            rows += _flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(record, list):
        for i, v in enumerate(record):
            rows += _flatten(v, f"{prefix}[{i}]")
    else:
        rows.append((prefix, record))
    return rows


def _summary_text(record: dict, fmt_name: str) -> str:
    record = _jsonable(record)
    if fmt_name == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("key", "value"))
        for k, v in _flatten(record):
            w.writerow((k, fmt(v) if isinstance(v, float) else ("" if v is None else v)))
        return buf.getvalue()
    return json.dumps(record, indent=2) + "\n"


# ---------------------------------------------------------------- commands


def run_solve(cfg: RunConfig, expect: str) -> dict:
    if cfg.problem != expect:
        raise ConfigError("problem", f"solve-{expect} needs a '{expect}' config, got '{cfg.problem}'")
    spec, _ = cfg.build()
    grid = cfg.grid
    W = cfg.ensemble(spec.d)
    rec = {"problem": cfg.problem, "grid": {"T": grid.horizon, "K": grid.steps},
           "ensemble": {"n_paths": cfg.n_paths, "seed": cfg.seed}, "backend": backend_name()}
    if expect == "lq":
        sol = solve_lq(spec, grid, W)
        P0, phi0 = sol.riccati.P[0], sol.riccati.phi[0]
        resid = value_duality_residual(spec, sol)
        cost = mc_cost(sol)
        rec.update(value=sol.value, P0=P0, phi0=phi0, c0=float(sol.riccati.c[0]),
                   p_bar0=P0 @ spec.x0 + phi0, u0=sol.loop.U[0, 0] @ spec.x0 + sol.loop.u0[0, 0],
                   residuals={"duality": {"mean": resid.mean, "stderr": resid.stderr},
                              "mc_cost_gap": {"mean": cost.mean - sol.value, "stderr": cost.stderr}})
    else:
        sol = solve_mv(spec, grid, solver=cfg.mv_solver)
        ver = mc_verify(spec, sol, W)
        p0 = float(sol.p_gain[0, 0] * spec.x + sol.p_off[0, 0])
        pi0 = sol.pi_gain[0, 0] * spec.x + sol.pi_off[0, 0]
        rec.update(value=sol.value, lambda_E=sol.lambda_E, solver=sol.kind, p_bar0=p0, pi0=pi0,
                   residuals={"terminal_mean_error": ver.mean_error, "terminal_mean_stderr": ver.mean_stderr,
                              "variance_gap": ver.variance_gap, "variance_stderr": ver.variance_stderr,
                              "adjoint_residual": ver.adjoint_residual,
                              "martingale_zscore": ver.martingale_zscore})
    return rec


def run_sens(cfg: RunConfig) -> list[dict]:
    spec, perts = cfg.build()
    if not perts:
        raise ConfigError("perturbations", "sens needs at least one perturbation block")
    grid = cfg.grid
    method = cfg.method
    W = cfg.ensemble(spec.d) if method == "mc" else None
    if cfg.problem == "lq":
        sol = solve_lq(spec, grid, W)
        run = lambda p: check_lq(spec, p, grid, W, cfg.fd["tau"], method, sol)  # noqa: E731
    else:
        sol = solve_mv(spec, grid, W, solver=cfg.mv_solver)
        run = lambda p: check_mv(spec, p, grid, W, cfg.fd["tau"], method, sol, cfg.mv_solver)  # noqa: E731
    rows = []
    for label, pert in perts:
        t0 = time.perf_counter()
        rep = run(pert)
        if not cfg.fd["richardson"]:
            rep = rep.with_fd(rep.fd_central, rep.fd_step, rep.fd_central)
        ms = 1e3 * (time.perf_counter() - t0)
        rows.append({"label": label, "adjoint_value": rep.adjoint_value, "fd_value": rep.fd_value,
                     "abs_gap": rep.abs_gap, "rel_gap": rep.rel_gap, "mc_stderr": rep.mc_stderr,
                     "runtime_ms": ms if cfg.output["timing"] else None})
    for row in rows:
        for key in CSV_COLUMNS[1:6]:
            v = row[key]
            if v is not None and not np.isfinite(v):
                raise SolverError(f"{row['label']}: non-finite {key}")
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["label"]] + [fmt(r[k]) for k in CSV_COLUMNS[1:]])
    return buf.getvalue()


def run_check(cfg: RunConfig) -> dict:
    results = run_suite(cfg)
    failures = [r.name for r in results if r.status == FAIL]
    return {"passed": not failures, "failures": failures, "checks": [r.as_dict() for r in results]}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochsens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"solve-lq": "solve a linear-quadratic problem and print a summary",
             "solve-mv": "solve a mean-variance problem and print a summary",
             "sens": "adjoint sensitivities with finite-difference checks, one row per perturbation",
             "check": "run the invariant suites; exit 1 if any check fails"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config path or builtin:<name>")
        p.add_argument("--seed", type=_u64, help="override ensemble.seed")
        p.add_argument("--paths", type=_positive, help="override ensemble.n_paths")
        p.add_argument("--steps", type=_positive, help="override grid.K")
        p.add_argument("--out", help="write the result here (atomically) instead of stdout")
        p.add_argument("--format", choices=("csv", "json"), help="output format")
    return parser


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _error(exc: Exception, kind: str) -> None:
    sys.stderr.write(f"stochsens: error[{kind}]: {exc}\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.paths, args.steps, args.out, args.format)
        cmd = args.command
        if cmd in ("solve-lq", "solve-mv"):
            rec = run_solve(cfg, cmd.split("-")[1])
            _emit(_summary_text(rec, args.format or "json"), cfg)
            return EXIT_OK
        if cmd == "sens":
            rows = run_sens(cfg)
            text = rows_to_csv(rows) if cfg.output["format"] == "csv" else json.dumps(_jsonable(rows), indent=2) + "\n"
            _emit(text, cfg)
            return EXIT_OK
        report = run_check(cfg)
        text = json.dumps(_jsonable(report), indent=2) + "\n"
        _emit(text, cfg)
        if not report["passed"]:
            sys.stderr.write("stochsens: failed checks: " + ", ".join(report["failures"]) + "\n")
            return EXIT_CHECK
        return EXIT_OK
    except SpecError as exc:
        _error(exc, "config" if isinstance(exc, ConfigError) else exc.kind)
        return EXIT_CONFIG
    except SolverError as exc:
        _error(exc, exc.kind)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
