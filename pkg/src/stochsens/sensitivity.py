"""First-order sensitivities of optimal values and their finite-difference checks.

Directional derivatives are evaluated at the unperturbed optimum from the
state, control and adjoint processes. Every expectation of a time integral is
available two ways: ``method="exact"`` integrates the first two moments of the
optimal state with RK4 (no sampling noise), ``method="mc"`` uses left-point
sums over the solution's Brownian ensemble and reports a standard error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import BrownianEnsemble, TimeGrid
from .errors import InvalidArgumentError
from .lq import LQSolution, LQSpec, affine_pair, riccati_integrate, solve_lq
from .mv import MVSolution, MVSpec, mv_value, solve_closed_form, solve_dual
from .timefn import TimeFunction, as_time_function

LQ_BLOCKS = ("x0", "A", "B", "C", "D", "e", "f")
MV_BLOCKS = ("x", "r", "A", "mu", "sigma")
DEFAULT_TAU = 1e-4


@dataclass(frozen=True)
class SensitivityReport:
    adjoint_value: float
    breakdown: dict
    fd_value: float | None = None
    fd_step: float | None = None
    abs_gap: float | None = None
    rel_gap: float | None = None
    mc_stderr: float | None = None
    fd_central: float | None = None

    def with_fd(self, fd_value: float, fd_step: float, fd_central: float | None = None) -> "SensitivityReport":
        gap = abs(self.adjoint_value - fd_value)
        return replace(self, fd_value=float(fd_value), fd_step=float(fd_step), abs_gap=gap,
                       rel_gap=gap / max(abs(self.adjoint_value), 1e-12), fd_central=fd_central)

    def agrees(self, abs_tol: float = 1e-6, rel_tol: float = 1e-5, k: float = 4.0) -> bool:
        if self.abs_gap is None:
            raise InvalidArgumentError("no finite-difference value attached")
        noise = k * (self.mc_stderr or 0.0)
        return self.abs_gap <= max(abs_tol, noise) or self.rel_gap <= rel_tol


# ------------------------------------------------------------ perturbations


class LQPerturbation:
    """Direction in LQ parameter space. Unset blocks are zero."""

    def __init__(self, dx0=None, dA=None, dB=None, dC=None, dD=None, de=None, df=None):
        self.blocks = {"x0": dx0, "A": dA, "B": dB, "C": dC, "D": dD, "e": de, "f": df}

    def resolve(self, spec: LQSpec) -> dict:
        n, m, d, h = spec.n, spec.m, spec.d, spec.horizon
        b = self.blocks
        out = {"x0": np.zeros(n) if b["x0"] is None else np.broadcast_to(np.asarray(b["x0"], float), (n,)).copy()}
        out["A"] = as_time_function(b["A"], (n, n), "dA", h)
        out["B"] = as_time_function(b["B"], (n, m), "dB", h)
        out["e"] = as_time_function(b["e"], (n,), "de", h)
        for key, shape in (("C", (n, n)), ("D", (n, m)), ("f", (n,))):
            val = b[key]
            if val is None:
                out[key] = [as_time_function(None, shape) for _ in range(d)]
            else:
                if isinstance(val, TimeFunction) or callable(val) or np.ndim(val) == 0:
                    val = [val]
                if isinstance(val, np.ndarray) and val.ndim == len(shape) + 1:
                    val = list(val)
                if len(val) != d:
                    raise InvalidArgumentError(f"d{key}: expected {d} noise channels, got {len(val)}")
                out[key] = [as_time_function(v, shape, f"d{key}[{j}]", h) for j, v in enumerate(val)]
        if not np.all(np.isfinite(out["x0"])):
            raise InvalidArgumentError("dx0 is not finite")
        return out

    def active(self) -> list[str]:
        return [k for k, v in self.blocks.items() if v is not None]

    def __add__(self, other: "LQPerturbation") -> "LQPerturbation":
        return _combine(self, 1.0, other, 1.0)

    def __mul__(self, alpha: float) -> "LQPerturbation":
        return _combine(self, alpha, None, 0.0)

    __rmul__ = __mul__


def _lin(a, x, b, y):
    if x is None and y is None:
        return None
    if x is None:
        return _scale(b, y)
    if y is None:
        return _scale(a, x)
    if isinstance(x, (list, tuple)):
        return [_lin(a, xi, b, yi) for xi, yi in zip(x, y)]
    if isinstance(x, TimeFunction) or isinstance(y, TimeFunction) or callable(x) or callable(y):
        return a * _tf(x) + b * _tf(y)
    return a * np.asarray(x, float) + b * np.asarray(y, float)


def _scale(a, x):
    if isinstance(x, (list, tuple)):
        return [_scale(a, xi) for xi in x]
    if isinstance(x, TimeFunction) or callable(x):
        return a * _tf(x)
    return a * np.asarray(x, float)


def _tf(x):
    if isinstance(x, TimeFunction):
        return x
    from .timefn import FromCallable
    shape = np.shape(x(0.0))
    return FromCallable(x, shape)


def _combine(p, a, q, b):
    if q is None:
        return type(p)(**{_KW[type(p)][k]: _scale(a, v) if v is not None else None for k, v in p.blocks.items()})
    return type(p)(**{_KW[type(p)][k]: _lin(a, p.blocks[k], b, q.blocks[k]) for k in p.blocks})


def perturb_lq(spec: LQSpec, pert: LQPerturbation, eps: float) -> LQSpec:
    r = pert.resolve(spec)
    if eps == 0.0:
        return spec
    return spec.replace(
        x0=spec.x0 + eps * r["x0"],
        A=spec.A + eps * r["A"], B=spec.B + eps * r["B"], e=spec.e + eps * r["e"],
        C=[c + eps * dc for c, dc in zip(spec.C, r["C"])],
        D=[c + eps * dc for c, dc in zip(spec.D, r["D"])],
        f=[c + eps * dc for c, dc in zip(spec.f, r["f"])],
    )


class MVPerturbation:
    def __init__(self, dx=None, dr=None, dA=None, dmu=None, dsigma=None):
        self.blocks = {"x": dx, "r": dr, "A": dA, "mu": dmu, "sigma": dsigma}

    def resolve(self, spec: MVSpec) -> dict:
        d, h = spec.d, spec.horizon
        b = self.blocks
        return {
            "x": 0.0 if b["x"] is None else float(b["x"]),
            "A": 0.0 if b["A"] is None else float(b["A"]),
            "r": as_time_function(b["r"], (), "dr", h),
            "mu": as_time_function(b["mu"], (d,), "dmu", h),
            "sigma": as_time_function(b["sigma"], (d, d), "dsigma", h),
        }

    def active(self) -> list[str]:
        return [k for k, v in self.blocks.items() if v is not None]

    def __add__(self, other):
        return _combine(self, 1.0, other, 1.0)

    def __mul__(self, alpha):
        return _combine(self, alpha, None, 0.0)

    __rmul__ = __mul__


_KW = {
    LQPerturbation: {"x0": "dx0", "A": "dA", "B": "dB", "C": "dC", "D": "dD", "e": "de", "f": "df"},
    MVPerturbation: {"x": "dx", "r": "dr", "A": "dA", "mu": "dmu", "sigma": "dsigma"},
}


def perturb_mv(spec: MVSpec, pert: MVPerturbation, eps: float) -> MVSpec:
    r = pert.resolve(spec)
    if eps == 0.0:
        return spec
    return spec.replace(x=spec.x + eps * r["x"], A=spec.A + eps * r["A"], r=spec.r + eps * r["r"],
                        mu=spec.mu + eps * r["mu"], sigma=spec.sigma + eps * r["sigma"])


# -------------------------------------------------------------- LQ formulas


def _lq_weights(sol: LQSolution, dp: dict):
    """Stage weights (K, 3, L, ...) of the six integral blocks, in LQ_BLOCKS[1:] order."""
    grid = sol.grid
    U, u0 = sol.loop.U, sol.loop.u0
    P, phi = sol.P_stage, sol.phi_stage
    dA, dB, de = dp["A"].sample(grid), dp["B"].sample(grid), dp["e"].sample(grid)
    dC = np.stack([c.sample(grid) for c in dp["C"]], axis=2)
    dD = np.stack([c.sample(grid) for c in dp["D"]], axis=2)
    df = np.stack([c.sample(grid) for c in dp["f"]], axis=2)
    zero_v = np.zeros_like(phi)
    Gq = P[:, :, None] @ sol.loop.Ch
    gq = np.einsum("ksab,ksjb->ksja", P, sol.loop.dh)
    zero_jv = np.zeros_like(gq)
    blocks = [
        affine_pair(P, phi, dA, zero_v),
        affine_pair(P, phi, dB @ U, np.einsum("ksab,ksb->ksa", dB, u0)),
        [a.sum(axis=2) for a in affine_pair(Gq, gq, dC, zero_jv)],
        [a.sum(axis=2) for a in affine_pair(Gq, gq, dD @ U[:, :, None], np.einsum("ksjab,ksb->ksja", dD, u0))],
        affine_pair(P, phi, np.zeros_like(P), de),
        [a.sum(axis=2) for a in affine_pair(Gq, gq, np.zeros_like(Gq), df)],
    ]
    W_ = np.stack([b[0] for b in blocks], axis=2)
    w_ = np.stack([b[1] for b in blocks], axis=2)
    w0_ = np.stack([b[2] for b in blocks], axis=2)
    return W_, w_, w0_


_LQ_ORDER = ("A", "B", "C", "D", "e", "f")


def dv_lq(spec: LQSpec, pert: LQPerturbation, grid: TimeGrid, W: BrownianEnsemble | None = None,
          method: str = "exact", sol: LQSolution | None = None) -> SensitivityReport:
    """Adjoint directional derivative of the LQ value along ``pert``."""
    sol = sol if sol is not None else solve_lq(spec, grid, W)
    dp = pert.resolve(spec)
    p0 = sol.P_stage[0, 0] @ spec.x0 + sol.phi_stage[0, 0]
    W_, w_, w0_ = _lq_weights(sol, dp)
    breakdown = {"x0": float(p0 @ dp["x0"])}
    stderr = None
    if method == "exact":
        _, _, I = sol.expect(W_, w_, w0_)
    elif method == "mc":
        if sol.W is None:
            sol = LQSolution(spec, grid, W, sol.riccati, sol.loop, sol.value, sol.P_stage, sol.phi_stage)
        I, stderr = _with_total(sol.mc_integrals, W_, w_, w0_)
    else:
        raise InvalidArgumentError(f"unknown method {method!r}")
    for key, val in zip(_LQ_ORDER, I):
        breakdown[key] = float(val)
    return SensitivityReport(_sum(breakdown), breakdown, mc_stderr=stderr)


def _with_total(integrate, W_, w_, w0_):
    """Per-block MC means plus the standard error of their sum, tracked as an extra column."""
    ext = [np.concatenate([a, a.sum(axis=2, keepdims=True)], axis=2) for a in (W_, w_, w0_)]
    stats = integrate(*ext)
    return stats.mean[:-1], float(stats.stderr[-1])


def _sum(breakdown: dict) -> float:
    return float(sum(breakdown.values()))


def dv_additive(spec: LQSpec, dx0, df_add, dsigma_add, grid: TimeGrid, W: BrownianEnsemble | None = None,
                method: str = "exact", sol: LQSolution | None = None) -> SensitivityReport:
    """Derivative for an additive perturbation of initial state, drift and diffusion.

    ``df_add`` is an n-vector function and ``dsigma_add`` an n x d matrix
    function; column ``j`` of the latter loads noise channel ``j``.
    """
    n, d = spec.n, spec.d
    sig = as_time_function(dsigma_add, (n, d), "dsigma", spec.horizon)
    df = [sig_col(sig, j) for j in range(d)]
    pert = LQPerturbation(dx0=dx0, de=df_add, df=df)
    rep = dv_lq(spec, pert, grid, W, method, sol)
    b = rep.breakdown
    breakdown = {"x0": b["x0"], "drift": b["e"], "diffusion": b["f"]}
    return SensitivityReport(_sum(breakdown), breakdown, mc_stderr=rep.mc_stderr)


def sig_col(sig: TimeFunction, j: int) -> TimeFunction:
    from .timefn import Mapped
    return Mapped(sig, lambda s, j=j: s[..., :, j], (sig.shape[0],))


def lq_value(spec: LQSpec, grid: TimeGrid) -> float:
    return riccati_integrate(spec, grid).value(spec.x0)


def lq_ray(spec: LQSpec, pert: LQPerturbation, grid: TimeGrid) -> Callable[[float], float]:
    return lambda s: lq_value(perturb_lq(spec, pert, s), grid)


# -------------------------------------------------------------- MV formulas


def _mv_weights(sol: MVSolution, dp: dict):
    grid = sol.grid
    dr = dp["r"].sample(grid)
    dmu = dp["mu"].sample(grid)
    dsig = dp["sigma"].sample(grid)
    pg, po = sol.p_gain, sol.p_off
    ag, ao = sol.pi_gain, sol.pi_off
    qg, qo = sol.q_gain, sol.q_off
    # r: p (X - pi'1) dr
    Hr, hr = (1.0 - ag.sum(axis=-1)) * dr, -ao.sum(axis=-1) * dr
    # mu: (pi'dmu) p
    Hm, hm = np.einsum("ksa,ksa->ks", ag, dmu), np.einsum("ksa,ksa->ks", ao, dmu)
    Wr, wr, w0r = pg * Hr, pg * hr + po * Hr, po * hr
    Wm, wm, w0m = pg * Hm, pg * hm + po * Hm, po * hm
    # sigma: pi' dsigma q'
    Ws = np.einsum("ksi,ksij,ksj->ks", ag, dsig, qg)
    ws = np.einsum("ksi,ksij,ksj->ks", ag, dsig, qo) + np.einsum("ksi,ksij,ksj->ks", ao, dsig, qg)
    w0s = np.einsum("ksi,ksij,ksj->ks", ao, dsig, qo)
    return (np.stack([Wr, Wm, Ws], axis=2), np.stack([wr, wm, ws], axis=2), np.stack([w0r, w0m, w0s], axis=2))


def solve_mv(spec: MVSpec, grid: TimeGrid, W: BrownianEnsemble | None = None, solver: str = "auto") -> MVSolution:
    if solver == "auto":
        solver = "closed_form" if spec.d == 1 else "dual"
    if solver == "closed_form":
        return solve_closed_form(spec, grid, W)
    if solver == "dual":
        return solve_dual(spec, grid, W)
    raise InvalidArgumentError(f"unknown solver {solver!r}")


def dv_mv(spec: MVSpec, pert: MVPerturbation, grid: TimeGrid, W: BrownianEnsemble | None = None,
          method: str = "exact", sol: MVSolution | None = None) -> SensitivityReport:
    """Adjoint directional derivative of the mean-variance value along ``pert``."""
    sol = sol if sol is not None else solve_mv(spec, grid, W)
    dp = pert.resolve(spec)
    p0 = float(sol.p_gain[0, 0] * spec.x + sol.p_off[0, 0])
    W_, w_, w0_ = _mv_weights(sol, dp)
    stderr = None
    if method == "exact":
        I = sol.expect(W_, w_, w0_)
    elif method == "mc":
        if sol.W is None:
            sol.W = W
        I, stderr = _with_total(sol.mc_expect, W_, w_, w0_)
    else:
        raise InvalidArgumentError(f"unknown method {method!r}")
    breakdown = {"x": p0 * dp["x"], "r": float(I[0]), "A": -sol.lambda_E * dp["A"], "mu": float(I[1]),
                 "sigma": float(I[2])}
    return SensitivityReport(_sum(breakdown), breakdown, mc_stderr=stderr)


def mv_ray(spec: MVSpec, pert: MVPerturbation, grid: TimeGrid, method: str = "auto") -> Callable[[float], float]:
    return lambda s: mv_value(perturb_mv(spec, pert, s), grid, method)


# ------------------------------------------------------- finite differences


def fd_check(value_evaluator: Callable[[float], float], tau: float = DEFAULT_TAU) -> tuple[float, float]:
    """Central difference at step ``tau`` and its Richardson extrapolation with ``tau/2``."""
    if not tau > 0:
        raise InvalidArgumentError("tau must be positive")
    central = (value_evaluator(tau) - value_evaluator(-tau)) / (2.0 * tau)
    half = (value_evaluator(0.5 * tau) - value_evaluator(-0.5 * tau)) / tau
    return float(central), float((4.0 * half - central) / 3.0)


def forward_quotient(value_evaluator: Callable[[float], float], tau: float, base: float | None = None) -> float:
    base = value_evaluator(0.0) if base is None else base
    return float((value_evaluator(tau) - base) / tau)


def default_tau(base_scale: float, direction_scale: float) -> float:
    """``1e-4 * max(1, |P|) / |dP|``: a relative step of about 1e-4 along the ray."""
    if not direction_scale > 0:
        return DEFAULT_TAU
    return DEFAULT_TAU * max(1.0, base_scale) / direction_scale


def lq_scales(spec: LQSpec, pert: LQPerturbation, grid: TimeGrid) -> tuple[float, float]:
    s = spec.sampled(grid)
    r = pert.resolve(spec)
    base = max(np.abs(spec.x0).max(initial=0.0), *(np.abs(s[k]).max(initial=0.0) for k in ("A", "B", "C", "D", "e", "f")))
    dirs = [np.abs(r["x0"]).max(initial=0.0), np.abs(r["A"].sample(grid)).max(), np.abs(r["B"].sample(grid)).max(),
            np.abs(r["e"].sample(grid)).max()]
    for k in ("C", "D", "f"):
        dirs += [np.abs(c.sample(grid)).max() for c in r[k]]
    return float(base), float(max(dirs))


def mv_scales(spec: MVSpec, pert: MVPerturbation, grid: TimeGrid) -> tuple[float, float]:
    s = spec.sampled(grid)
    r = pert.resolve(spec)
    base = max(abs(spec.x), abs(spec.A), *(float(np.abs(s[k]).max()) for k in ("r", "mu", "sigma")))
    dirs = [abs(r["x"]), abs(r["A"])] + [float(np.abs(r[k].sample(grid)).max()) for k in ("r", "mu", "sigma")]
    return float(base), float(max(dirs))


def check_lq(spec, pert, grid, W=None, tau=None, method="exact", sol=None) -> SensitivityReport:
    rep = dv_lq(spec, pert, grid, W, method, sol)
    tau = tau if tau is not None else default_tau(*lq_scales(spec, pert, grid))
    central, rich = fd_check(lq_ray(spec, pert, grid), tau)
    return rep.with_fd(rich, tau, central)


def check_mv(spec, pert, grid, W=None, tau=None, method="exact", sol=None, value_method="auto") -> SensitivityReport:
    sol = sol if sol is not None else solve_mv(spec, grid, W)
    rep = dv_mv(spec, pert, grid, W, method, sol)
    tau = tau if tau is not None else default_tau(*mv_scales(spec, pert, grid))
    central, rich = fd_check(mv_ray(spec, pert, grid, value_method), tau)
    return rep.with_fd(rich, tau, central)


def linearity_check(dv: Callable[[object], SensitivityReport], pert1, pert2, alpha: float, beta: float,
                    tol: float = 1e-12) -> bool:
    """``Dv(a P1 + b P2) == a Dv(P1) + b Dv(P2)`` up to ``tol`` (relative to the term sizes)."""
    lhs = dv(alpha * pert1 + beta * pert2).adjoint_value
    v1, v2 = dv(pert1).adjoint_value, dv(pert2).adjoint_value
    rhs = alpha * v1 + beta * v2
    scale = max(1.0, abs(alpha * v1), abs(beta * v2))
    return abs(lhs - rhs) <= tol * scale
