"""Invariant suites run by ``stochsens check``.

Each check returns a ``CheckResult``. Checks whose tolerance assumes a resolved
time grid are reported as skipped when the grid is coarser than ``min_steps``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import BrownianEnsemble, ItoTriple, inner_product_I, integration_by_parts_residual, isometry_gap
from .errors import SolverError
from .lq import LQSolution, LQSpec, riccati_integrate, solve_lq, value_duality_residual
from .mv import MVSpec, mc_verify, solve_closed_form, solve_dual
from .picard import fbsde_picard_oracle
from .sensitivity import (LQPerturbation, MVPerturbation, check_lq, check_mv, dv_lq, dv_mv, linearity_check,
                          solve_mv)

PASS, FAIL, SKIP = "pass", "fail", "skip"
ROUNDOFF = 1e-9


@dataclass
class CheckResult:
    name: str
    status: str
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _status(ok: bool) -> str:
    return PASS if bool(ok) else FAIL


def _guarded(name, fn, *args):
    try:
        return fn(*args)
    except SolverError as exc:
        return CheckResult(name, FAIL, {"error": exc.kind, "message": str(exc)})


def _coarse(name, cfg) -> CheckResult | None:
    K, need = cfg.grid.steps, int(cfg.check["min_steps"])
    if K < need:
        return CheckResult(name, SKIP, {"reason": f"grid-resolution check skipped: K={K} < min_steps={need}"})
    return None


# ----------------------------------------------------------- stochastic core


def _isometry(diffusion: np.ndarray, W: BrownianEnsemble) -> CheckResult:
    n = diffusion.shape[1]
    tri = ItoTriple(np.zeros(n), np.zeros((1, W.grid.steps, n)), diffusion[None])
    est = isometry_gap(tri, W)
    return CheckResult("isometry", _status(est.within(0.0, 4.0)), {"mean": est.mean, "stderr": est.stderr})


def _by_parts(a: ItoTriple, b: ItoTriple, W: BrownianEnsemble) -> CheckResult:
    est = integration_by_parts_residual(a, b, W)
    dt = W.grid.dt
    bias = dt * dt * float((a.drift[0] * b.drift[0]).sum())
    return CheckResult("integration_by_parts", _status(est.within(bias, 4.0)),
                       {"mean": est.mean, "stderr": est.stderr, "discretisation_bias": bias})


def _inner_product(a: ItoTriple, b: ItoTriple, c: ItoTriple, W: BrownianEnsemble) -> CheckResult:
    ab, ba = inner_product_I(a, b, W), inner_product_I(b, a, W)
    aa, bb = inner_product_I(a, a, W), inner_product_I(b, b, W)
    lhs = inner_product_I(a.scaled_add(2.5, c), b, W)
    rhs = 2.5 * ab + inner_product_I(c, b, W)
    scale = max(1.0, abs(ab), abs(rhs))
    ok = abs(ab - ba) <= 1e-12 * scale and abs(lhs - rhs) <= 1e-10 * scale and ab * ab <= aa * bb * (1 + 1e-12)
    return CheckResult("inner_product", _status(ok), {"symmetry_gap": abs(ab - ba), "bilinearity_gap": abs(lhs - rhs),
                                                      "cauchy_schwarz_slack": aa * bb - ab * ab})


def _core_suite(x0, drift, diffusion, W) -> list[CheckResult]:
    K, n = drift.shape
    d = diffusion.shape[2]
    if not np.any(diffusion):
        diffusion = np.ones((K, n, d))
    a = ItoTriple(x0, drift[None], diffusion[None])
    b = ItoTriple(np.ones(n), np.full((1, K, n), 0.5), np.full((1, K, n, d), 0.3))
    c = ItoTriple(-x0, np.ones((1, K, n)), 0.1 * diffusion[None])
    return [_isometry(diffusion, W), _by_parts(a, b, W), _inner_product(a, b, c, W)]


# -------------------------------------------------------------------- LQ


def _lq_duality(spec, sol, W, cfg) -> CheckResult:
    skip = _coarse("duality_residual", cfg)
    if skip:
        return skip
    est = value_duality_residual(spec, sol, W)
    floor = ROUNDOFF * max(1.0, abs(sol.value))
    return CheckResult("duality_residual", _status(est.within(0.0, 4.0, floor)), {"mean": est.mean, "stderr": est.stderr})


def _lq_duality_halving(spec, W, cfg) -> CheckResult:
    skip = _coarse("duality_residual_halving", cfg)
    if skip:
        return skip
    if W.grid.steps % 2:
        return CheckResult("duality_residual_halving", SKIP, {"reason": "odd number of steps"})
    Wc = W.coarsen(2)
    fine = value_duality_residual(spec, solve_lq(spec, W.grid, W), control_variate=True)
    coarse = value_duality_residual(spec, solve_lq(spec, Wc.grid, Wc), control_variate=True)
    gap = fine.mean - 0.5 * coarse.mean
    noise = np.hypot(fine.stderr, 0.5 * coarse.stderr)
    return CheckResult("duality_residual_halving", _status(abs(gap) <= 4.0 * noise + ROUNDOFF * max(1.0, abs(fine.mean))),
                       {"fine": fine.mean, "coarse": coarse.mean, "gap": gap, "stderr": noise})


def _lq_picard(spec, sol, cfg) -> CheckResult:
    grid = cfg.grid
    W = cfg.ensemble(spec.d, n_paths=min(int(cfg.check["picard_paths"]), cfg.n_paths))
    ps = fbsde_picard_oracle(spec, grid, W, tol=float(cfg.check["picard_tol"]))
    ref = LQSolution(spec, grid, W, sol.riccati, sol.loop, sol.value, sol.P_stage, sol.phi_stage)
    du = ps.u_bar - ref.u_bar
    gap = float(np.sqrt((du ** 2).sum(axis=(1, 2)).mean() * grid.dt))
    tol = max(1e-6, 10.0 * grid.dt)
    return CheckResult("picard_vs_riccati", _status(gap <= tol),
                       {"control_l2_gap": gap, "tolerance": tol, "iterations": ps.iterations,
                        "value_picard": ps.value, "value_riccati": sol.value})


def _lq_riccati_shape(sol) -> CheckResult:
    P = sol.riccati.P
    asym = float(np.abs(P - np.swapaxes(P, -1, -2)).max())
    low = float(np.linalg.eigvalsh(0.5 * (P + np.swapaxes(P, -1, -2))).min())
    scale = max(1.0, float(np.abs(P).max()))
    ok = asym <= 1e-10 * scale and low >= -1e-10 * scale
    return CheckResult("riccati_symmetric_psd", _status(ok), {"asymmetry": asym, "min_eigenvalue": low})


def _lq_riccati_convergence(spec, sol, cfg) -> CheckResult:
    skip = _coarse("riccati_convergence", cfg)
    if skip:
        return skip
    fine = riccati_integrate(spec, cfg.grid.refine(2)).value(spec.x0)
    gap = abs(fine - sol.value)
    return CheckResult("riccati_convergence", _status(gap <= 1e-8 * max(1.0, abs(sol.value))),
                       {"value": sol.value, "value_refined": fine, "gap": gap})


def _fd_suite(name, cfg, perts, run) -> CheckResult:
    skip = _coarse(name, cfg)
    if skip:
        return skip
    if not perts:
        return CheckResult(name, SKIP, {"reason": "no perturbation blocks"})
    rows, ok = {}, True
    for label, pert in perts:
        rep = run(pert)
        good = rep.agrees()
        ok &= good
        rows[label] = {"adjoint_value": rep.adjoint_value, "fd_value": rep.fd_value, "abs_gap": rep.abs_gap,
                       "rel_gap": rep.rel_gap, "pass": bool(good)}
    return CheckResult(name, _status(ok), rows)


def _linearity(perts, dv) -> CheckResult:
    if len(perts) < 2:
        return CheckResult("adjoint_linearity", SKIP, {"reason": "needs two perturbation blocks"})
    p1, p2 = perts[0][1], perts[1][1]
    ok = linearity_check(dv, p1, p2, 0.7, -1.3, tol=1e-10)
    return CheckResult("adjoint_linearity", _status(ok), {"blocks": [perts[0][0], perts[1][0]]})


def lq_suite(cfg, spec: LQSpec, perts: list[tuple[str, LQPerturbation]]) -> list[CheckResult]:
    grid = cfg.grid
    W = cfg.ensemble(spec.d)
    sol = solve_lq(spec, grid, W)
    s = spec.sampled(grid)
    out = _core_suite(spec.x0, s["e"][:, 0], np.swapaxes(s["f"][:, 0], 1, 2), W)
    tau = cfg.fd["tau"]
    fd = lambda p: _fd_report(check_lq(spec, p, grid, tau=tau, sol=sol), cfg)  # noqa: E731
    out += [
        _lq_riccati_shape(sol),
        _lq_riccati_convergence(spec, sol, cfg),
        _guarded("duality_residual", _lq_duality, spec, sol, W, cfg),
        _guarded("duality_residual_halving", _lq_duality_halving, spec, W, cfg),
        _guarded("picard_vs_riccati", _lq_picard, spec, sol, cfg),
        _guarded("fd_agreement", _fd_suite, "fd_agreement", cfg, perts, fd),
        _linearity(perts, lambda p: dv_lq(spec, p, grid, sol=sol)),
    ]
    return out


def _fd_report(rep, cfg):
    if cfg.fd["richardson"]:
        return rep
    return rep.with_fd(rep.fd_central, rep.fd_step, rep.fd_central)


# -------------------------------------------------------------------- MV


def _mv_feasibility(spec, sol, cfg) -> CheckResult:
    skip = _coarse("mv_feasibility", cfg)
    if skip:
        return skip
    ver = mc_verify(spec, sol, cfg.ensemble(spec.d))
    return CheckResult("mv_feasibility", _status(ver.passed()), asdict(ver))


def _mv_multiplier(spec, sol, grid) -> CheckResult:
    rep = dv_mv(spec, MVPerturbation(dA=1.0), grid, sol=sol)
    ok = rep.adjoint_value == -sol.lambda_E
    return CheckResult("multiplier_identity", _status(ok), {"D_A": rep.adjoint_value, "lambda_E": sol.lambda_E})


def _mv_routes(spec, sol, cfg) -> CheckResult:
    skip = _coarse("dual_vs_closed_form", cfg)
    if skip:
        return skip
    if spec.d != 1:
        return CheckResult("dual_vs_closed_form", SKIP, {"reason": "closed form needs a single risky asset"})
    grid = cfg.grid
    cf = sol if sol.kind == "closed_form" else solve_closed_form(spec, grid)
    du = sol if sol.kind == "dual" else solve_dual(spec, grid)
    dlam = abs(cf.lambda_E - du.lambda_E)
    dval = abs(cf.value - du.value) / max(abs(cf.value), 1e-12)
    return CheckResult("dual_vs_closed_form", _status(dlam <= 1e-6 and dval <= 1e-6),
                       {"lambda_gap": dlam, "value_rel_gap": dval})


def _mv_reduction(spec, sol, cfg) -> CheckResult:
    skip = _coarse("change_of_variables", cfg)
    if skip:
        return skip
    direct = solve_dual(spec, cfg.grid, reduce_first=False)
    rel = abs(direct.value - sol.value) / max(abs(sol.value), 1e-12)
    return CheckResult("change_of_variables", _status(rel <= 1e-5),
                       {"value_reduced": sol.value, "value_unreduced": direct.value, "rel_gap": rel})


def mv_suite(cfg, spec: MVSpec, perts: list[tuple[str, MVPerturbation]]) -> list[CheckResult]:
    grid = cfg.grid
    sol = solve_mv(spec, grid, solver=cfg.mv_solver)
    s = spec.sampled(grid)
    W = cfg.ensemble(spec.d, n_paths=min(cfg.n_paths, 10000))
    out = _core_suite(np.full(spec.d, spec.x), s["excess"][:, 0], s["sigma"][:, 0], W)
    tau = cfg.fd["tau"]
    method = "auto" if cfg.mv_solver == "auto" else cfg.mv_solver
    fd = lambda p: _fd_report(check_mv(spec, p, grid, tau=tau, sol=sol, value_method=method), cfg)  # noqa: E731
    out += [
        _guarded("mv_feasibility", _mv_feasibility, spec, sol, cfg),
        _mv_multiplier(spec, sol, grid),
        _guarded("dual_vs_closed_form", _mv_routes, spec, sol, cfg),
        _guarded("change_of_variables", _mv_reduction, spec, sol, cfg),
        _guarded("fd_agreement", _fd_suite, "fd_agreement", cfg, perts, fd),
        _linearity(perts, lambda p: dv_mv(spec, p, grid, sol=sol)),
    ]
    return out


def run_suite(cfg) -> list[CheckResult]:
    spec, perts = cfg.build()
    return lq_suite(cfg, spec, perts) if cfg.problem == "lq" else mv_suite(cfg, spec, perts)
