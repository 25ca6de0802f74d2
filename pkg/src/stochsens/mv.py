"""Continuous-time mean-variance portfolio selection.

Wealth follows ``dX = (r X + pi'(mu - r 1)) dt + pi' sigma dW`` and the problem
is to minimise ``E[(X(T) - A)^2]`` subject to ``E[X(T)] = A``. Discounting by
the short rate maps any instance onto one with ``r = 0`` and ``A = 0``; the
one-asset case then has a closed form, and the general case is solved through
the concave dual over the multiplier of the mean constraint, each inner problem
being an unconstrained scalar LQ problem.

Every solution exposes its optimal policy and adjoints as affine functions of
current wealth, sampled at the stage points of the grid:
``pi = pi_gain X + pi_off``, ``p = p_gain X + p_off``, ``q = q_gain X + q_off``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import kernels
from .core import DEFAULT_CHUNK, BrownianEnsemble, MCEstimate, RunningStats, TimeGrid
from .errors import (DegenerateProblemError, EllipticityError, InvalidArgumentError,
                     UnsupportedFeatureError)
from .lq import LQSpec, solve_lq, state_moments
from .timefn import Mapped, TimeFunction, as_time_function, cumulative_stage_integral


@dataclass(frozen=True, eq=False)
class MVSpec:
    x: float
    r: object
    A: float
    mu: object
    sigma: object
    horizon: float = 1.0
    delta: float | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        for name in ("x", "A"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise InvalidArgumentError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        mu = self.mu
        d = mu.shape[0] if isinstance(mu, TimeFunction) and mu.shape else _infer_d(mu)
        h = self.horizon
        object.__setattr__(self, "r", as_time_function(0.0 if self.r is None else self.r, (), "r", h))
        object.__setattr__(self, "mu", as_time_function(mu, (d,), "mu", h))
        object.__setattr__(self, "sigma", as_time_function(self.sigma, (d, d), "sigma", h))

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    def excess(self) -> TimeFunction:
        """``mu - r 1`` as a time function."""
        d = self.d
        return self.mu - Mapped(self.r, lambda s: s[..., None] * np.ones(d), (d,))

    def sampled(self, grid: TimeGrid) -> dict:
        key = (grid.horizon, grid.steps)
        if key not in self._cache:
            if abs(grid.horizon - self.horizon) > 1e-12 * self.horizon:
                raise InvalidArgumentError(f"grid horizon {grid.horizon} differs from spec horizon {self.horizon}")
            s = {"r": self.r.sample(grid), "mu": self.mu.sample(grid), "sigma": self.sigma.sample(grid)}
            s["excess"] = s["mu"] - s["r"][..., None]
            for k, v in s.items():
                if not np.all(np.isfinite(v)):
                    raise InvalidArgumentError(f"{k} is not finite on the grid")
            sig = s["sigma"]
            low = float(np.linalg.eigvalsh(sig @ np.swapaxes(sig, -1, -2)).min())
            bound = self.delta if self.delta is not None else 0.0
            if not low > 0.0 or low < bound:
                raise EllipticityError(
                    f"ellipticity violated: smallest eigenvalue of sigma sigma' on the grid is {low:.6g}"
                    + (f" < delta={bound:g}" if self.delta is not None else ""))
            self._cache[key] = s
        return self._cache[key]

    def replace(self, **changes) -> "MVSpec":
        kw = dict(x=self.x, r=self.r, A=self.A, mu=self.mu, sigma=self.sigma, horizon=self.horizon,
                  delta=self.delta)
        kw.update(changes)
        return MVSpec(**kw)


def _infer_d(mu) -> int:
    if callable(mu):
        mu = mu(0.0)
    arr = np.asarray(mu, dtype=float)
    return 1 if arr.ndim == 0 else arr.shape[-1]


# ------------------------------------------------------------- reduction


class Reduction(NamedTuple):
    """Discounted problem plus what is needed to map its solution back.

    ``R`` holds ``int_0^t r`` at the stage points of ``grid``.
    """

    spec: MVSpec
    scale: float
    R_T: float
    R: np.ndarray
    A: float

    @property
    def kappa(self) -> float:
        return self.A * np.exp(-self.R_T)

    def wealth(self, Xr: np.ndarray, R_nodes: np.ndarray) -> np.ndarray:
        return np.exp(R_nodes) * (Xr + self.kappa)

    def portfolio(self, pir: np.ndarray, R_nodes: np.ndarray) -> np.ndarray:
        return np.exp(R_nodes)[..., None] * pir

    def adjoint(self, pr: np.ndarray, R_nodes: np.ndarray) -> np.ndarray:
        return np.exp(2.0 * self.R_T - R_nodes) * pr

    def multiplier(self, lam_r: float) -> float:
        return float(np.exp(self.R_T) * lam_r)

    def feedback(self, gain, off, adjoint: bool):
        """Map an affine rule in reduced wealth to one in original wealth (stage arrays)."""
        R = self.R if gain.ndim == 2 else self.R[..., None]
        if adjoint:
            return np.exp(2.0 * self.R_T - 2.0 * R) * gain, np.exp(2.0 * self.R_T - R) * (off - gain * self.kappa)
        return gain, np.exp(R) * (off - gain * self.kappa)


def reduce(spec: MVSpec, grid: TimeGrid | None = None) -> Reduction:
    grid = grid if grid is not None else TimeGrid(spec.horizon, 1024)
    R = cumulative_stage_integral(spec.r, grid)
    R_T = float(R[-1, 2])
    excess = spec.excess()
    reduced = MVSpec(spec.x - spec.A * np.exp(-R_T), 0.0, 0.0, excess, spec.sigma,
                     horizon=spec.horizon, delta=spec.delta)
    s = reduced.sampled(grid)
    integral = grid.dt / 6.0 * (s["mu"][:, 0] + 4.0 * s["mu"][:, 1] + s["mu"][:, 2]).sum(axis=0)
    if not np.sum(np.abs(integral)) > 1e-14 * max(1.0, float(np.abs(s["mu"]).max())):
        raise DegenerateProblemError("qualification violated: the integral of mu - r vanishes in every coordinate")
    return Reduction(reduced, float(np.exp(2.0 * R_T)), R_T, R, spec.A)


def _r_is_zero(spec: MVSpec, grid: TimeGrid) -> bool:
    return not np.any(spec.sampled(grid)["r"])


# -------------------------------------------------------------- solution


@dataclass(frozen=True)
class MVClosedForm:
    """One-asset quantities: Sharpe ratio and its cumulative square at stage points."""

    Sigma: TimeFunction
    integrated_Sigma2: float
    Theta: np.ndarray


class MVSolution:
    def __init__(self, spec, grid, W, kind, value, lambda_E, maps, reduction, closed=None, info=None):
        self.spec = spec
        self.grid = grid
        self.W = W
        self.kind = kind
        self.value = float(value)
        self.lambda_E = float(lambda_E)
        self.pi_gain, self.pi_off, self.p_gain, self.p_off, self.q_gain, self.q_off = maps
        self.reduction = reduction
        self.closed = closed
        self.info = info or {}

    # state coefficients of the closed loop, for Euler and moment ODEs ----------
    def closed_loop(self):
        s = self.spec.sampled(self.grid)
        ex, sig = s["excess"], s["sigma"]
        Ah = (s["r"] + np.einsum("ksa,ksa->ks", self.pi_gain, ex))[..., None, None]
        bh = np.einsum("ksa,ksa->ks", self.pi_off, ex)[..., None]
        Ch = np.einsum("ksij,ksi->ksj", sig, self.pi_gain)[..., None, None]
        dh = np.einsum("ksij,ksi->ksj", sig, self.pi_off)[..., None]
        return Ah, bh, Ch, dh

    def _euler(self, dW):
        Ah, bh, Ch, dh = (np.ascontiguousarray(a[:, 0]) for a in self.closed_loop())
        x = kernels.simulate_affine(Ah, bh, Ch, dh, np.array([self.spec.x]), np.ascontiguousarray(dW),
                                    self.grid.dt)
        return x[..., 0]

    def paths(self, dW: np.ndarray):
        """``(X, pi, p, q)`` on the increments ``dW``; closed forms use their pathwise formulas."""
        if self.kind == "closed_form" and dW.shape[1] == self.grid.steps:
            X = self._closed_form_wealth(dW)
        else:
            X = self._euler(dW)
        return (X,) + self.adjoint_paths(X)

    def adjoint_paths(self, X: np.ndarray):
        Xl = X[:, :-1]
        pi = self.pi_gain[None, :, 0] * Xl[..., None] + self.pi_off[None, :, 0]
        pg = np.concatenate([self.p_gain[:, 0], self.p_gain[-1:, 2]])
        po = np.concatenate([self.p_off[:, 0], self.p_off[-1:, 2]])
        p = pg * X + po
        q = self.q_gain[None, :, 0] * Xl[..., None] + self.q_off[None, :, 0]
        return pi, p, q

    def _closed_form_wealth(self, dW):
        red, cf = self.reduction, self.closed
        c = self.info["c"]
        theta = cf.integrated_Sigma2
        Sig = cf.Sigma.sample(self.grid)[:, 0]
        I = np.zeros((dW.shape[0], self.grid.steps + 1))
        np.cumsum(Sig[None, :] * dW[..., 0], axis=1, out=I[:, 1:])
        Th = np.concatenate([cf.Theta[:, 0], cf.Theta[-1:, 2]])
        Z = np.exp(-I - 0.5 * Th)
        Y = Z * np.exp(-Th)
        Xr = c * (np.exp(theta) * Y - 1.0)
        return red.wealth(Xr, _nodes(red.R))

    def path_chunks(self, size: int = DEFAULT_CHUNK, W: BrownianEnsemble | None = None):
        W = W if W is not None else self.W
        if W is None:
            raise InvalidArgumentError("no Brownian ensemble attached to this solution")
        for a, b, dW in W.chunks(size):
            yield (a, b, dW) + self.paths(dW)

    @cached_property
    def _full_paths(self):
        return self.paths(self.W.increments)

    @property
    def X_bar(self):
        return self._full_paths[0]

    @property
    def pi_bar(self):
        return self._full_paths[1]

    @property
    def p_bar(self):
        return self._full_paths[2]

    @property
    def q_bar(self):
        return self._full_paths[3]

    # expectations ---------------------------------------------------------------
    def stage_moments(self):
        """``E[X]`` and ``E[X^2]`` at stage points; analytic for closed forms."""
        if self.kind != "closed_form":
            raise UnsupportedFeatureError("stage moments are analytic only for the closed form")
        red, cf, c = self.reduction, self.closed, self.info["c"]
        theta, Th = cf.integrated_Sigma2, cf.Theta
        m_r = c * (np.exp(theta - Th) - 1.0)
        S_r = c * c * (np.exp(2.0 * theta - Th) - 2.0 * np.exp(theta - Th) + 1.0)
        k = red.kappa
        eR = np.exp(red.R)
        return eR * (m_r + k), eR ** 2 * (S_r + 2.0 * k * m_r + k * k)

    def expect(self, W_, w_, w0_) -> np.ndarray:
        """``E int (W X^2 + w X + w0) dt`` for stage weights of shape (K, 3, L)."""
        if self.kind == "closed_form":
            m, S = self.stage_moments()
            vals = W_ * S[..., None] + w_ * m[..., None] + w0_
            return self.grid.dt / 6.0 * (vals[:, 0] + 4.0 * vals[:, 1] + vals[:, 2]).sum(axis=0)
        Ah, bh, Ch, dh = self.closed_loop()
        _, _, I = kernels.forward_moments(Ah, bh, Ch, dh, np.ascontiguousarray(W_[..., None, None]),
                                          np.ascontiguousarray(w_[..., None]), np.ascontiguousarray(w0_),
                                          np.array([self.spec.x]), self.grid.dt)
        return I

    def mc_expect(self, W_, w_, w0_, chunk: int = DEFAULT_CHUNK) -> RunningStats:
        """Per-path left-point sums of the same weights over the attached ensemble."""
        W0 = np.ascontiguousarray(W_[:, 0, :, None, None])
        wv = np.ascontiguousarray(w_[:, 0, :, None])
        c0 = np.ascontiguousarray(w0_[:, 0])
        stats = RunningStats((W_.shape[2],))
        for _, _, _, X, *_ in self.path_chunks(chunk):
            stats.add(kernels.quad_paths(X[..., None], W0, wv, c0, self.grid.dt))
        return stats


def _nodes(stage):
    return np.concatenate([stage[:, 0], stage[-1:, 2]])


class _Sharpe(TimeFunction):
    """``mu / sigma`` for one asset."""

    shape = ()

    def __init__(self, mu: TimeFunction, sigma: TimeFunction):
        self.mu, self.sigma = mu, sigma

    def __call__(self, t):
        return np.asarray(self.mu(t)[0] / self.sigma(t)[0, 0])

    def sample(self, grid):
        return self.mu.sample(grid)[..., 0] / self.sigma.sample(grid)[..., 0, 0]

    def at(self, times):
        return self.mu.at(times)[..., 0] / self.sigma.at(times)[..., 0, 0]


def solve_closed_form(spec: MVSpec, grid: TimeGrid, W: BrownianEnsemble | None = None) -> MVSolution:
    """Explicit one-asset solution; a nonzero rate is discounted away first."""
    if spec.d != 1:
        raise UnsupportedFeatureError("the closed form needs exactly one risky asset (d = 1)")
    if W is not None and (W.dim != 1 or W.grid.steps != grid.steps):
        raise InvalidArgumentError("ensemble does not match the grid / dimension")
    spec.sampled(grid)
    red = reduce(spec, grid)
    rs = red.spec
    Sigma = _Sharpe(rs.mu, rs.sigma)
    Theta = cumulative_stage_integral(lambda ts: Sigma.at(ts) ** 2, grid)
    theta = float(Theta[-1, 2])
    cf = MVClosedForm(Sigma, theta, Theta)
    xr = rs.x
    denom = np.expm1(theta)
    c = xr / denom
    value_r = xr * xr / denom
    lam_r = 2.0 * c
    s = rs.sampled(grid)
    mu_s, sig_s = s["mu"][..., 0], s["sigma"][..., 0, 0]
    gamma = -c
    decay = np.exp(Theta - theta)
    pi_g = (-mu_s / sig_s ** 2)[..., None]
    pi_o = (mu_s / sig_s ** 2 * gamma)[..., None]
    p_g = 2.0 * decay
    p_o = -2.0 * gamma * decay
    Sig_s = Sigma.sample(grid)
    q_g = (-Sig_s * p_g)[..., None]
    q_o = (-Sig_s * p_o)[..., None]
    maps = _unwind_maps(red, pi_g, pi_o, p_g, p_o, q_g, q_o)
    return MVSolution(spec, grid, W, "closed_form", red.scale * value_r, red.multiplier(lam_r), maps, red,
                      closed=cf, info={"c": c, "value_reduced": value_r, "lambda_reduced": lam_r})


def _unwind_maps(red, pi_g, pi_o, p_g, p_o, q_g, q_o):
    pi_g, pi_o = red.feedback(pi_g, pi_o, adjoint=False)
    p_g, p_o = red.feedback(p_g, p_o, adjoint=True)
    q_g, q_o = red.feedback(q_g, q_o, adjoint=True)
    return pi_g, pi_o, p_g, p_o, q_g, q_o


# --------------------------------------------------------------- dual search


class _Inner:
    """Unconstrained problem ``min E[(X - A)^2 + lam (X - A)]`` as a scalar LQ problem in
    ``Y = X - A + lam/2``."""

    def __init__(self, spec: MVSpec, grid: TimeGrid):
        self.spec, self.grid = spec, grid
        d = spec.d
        self.B = Mapped(spec.excess(), lambda s: s[..., None, :], (1, d))
        self.D = [Mapped(spec.sigma, lambda s, j=j: s[..., :, j][..., None, :], (1, d)) for j in range(d)]
        self.A_lq = Mapped(spec.r, lambda s: s[..., None, None], (1, 1))

    def lq(self, lam: float) -> LQSpec:
        spec = self.spec
        shift = spec.A - 0.5 * lam
        e = Mapped(spec.r, lambda s: s[..., None] * shift, (1,))
        return LQSpec(x0=[spec.x - spec.A + 0.5 * lam], A=self.A_lq, B=self.B, C=[np.zeros((1, 1))] * spec.d,
                      D=self.D, e=e, f=[np.zeros(1)] * spec.d, Q=np.zeros((1, 1)), N=np.zeros((spec.d, spec.d)),
                      M=np.array([[2.0]]), d=spec.d, allow_singular_control=True)

    def __call__(self, lam: float):
        sol = solve_lq(self.lq(lam), self.grid)
        mean_T = float(state_moments(sol).mean[-1, 0])
        return sol.value - 0.25 * lam * lam, mean_T - 0.5 * lam, sol


def _locate_multiplier(inner: _Inner, tol: float, guess: float, max_bisect: int = 200):
    lam0, lam1 = 0.0, guess if guess != 0.0 else 1.0
    J0, g0, s0 = inner(lam0)
    if abs(g0) < tol:
        return lam0, J0, g0, s0, 1
    J1, g1, s1 = inner(lam1)
    evals = 2
    if not np.isfinite(g1 - g0) or g1 == g0:
        raise DegenerateProblemError("the mean constraint cannot be bracketed (qualification failure)")
    lam = lam0 - g0 * (lam1 - lam0) / (g1 - g0)
    J, g, sol = inner(lam)
    evals += 1
    if abs(g) < tol:
        return lam, J, g, sol, evals
    slope = (g1 - g0) / (lam1 - lam0)
    width = max(abs(g / slope), 1e-12 * max(1.0, abs(lam)))
    lo, hi = lam - 2.0 * width, lam + 2.0 * width
    glo, ghi = inner(lo)[1], inner(hi)[1]
    evals += 2
    if glo * ghi > 0:
        raise DegenerateProblemError("the mean constraint cannot be bracketed (qualification failure)")
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        J, g, sol = inner(mid)
        evals += 1
        lam = mid
        if abs(g) < tol or hi - lo < 1e-15 * max(1.0, abs(mid)):
            break
        if (g > 0) == (ghi > 0):
            hi, ghi = mid, g
        else:
            lo, glo = mid, g
    return lam, J, g, sol, evals


def solve_dual(spec: MVSpec, grid: TimeGrid, W: BrownianEnsemble | None = None, tol: float = 1e-10,
               reduce_first: bool = True) -> MVSolution:
    """Maximise the concave dual over the multiplier of the mean constraint.

    ``reduce_first=False`` keeps the rate in the inner problems, which is the
    independent route used to check the reduction.
    """
    if W is not None and (W.dim != spec.d or W.grid.steps != grid.steps):
        raise InvalidArgumentError("ensemble does not match the grid / dimension")
    spec.sampled(grid)
    red = reduce(spec, grid)
    target = red.spec if reduce_first else spec
    if reduce_first:
        guess = 2.0 * target.x / max(np.expm1(1.0), 1e-12)
    else:
        guess = 2.0 * (spec.x * np.exp(red.R_T) - spec.A)
    inner = _Inner(target, grid)
    lam, J, gap, lq_sol, evals = _locate_multiplier(inner, tol, guess)
    h = max(1.0, abs(lam))
    curvature = inner(lam + h)[0] - 2.0 * J + inner(lam - h)[0]

    # policy and adjoints, affine in the wealth of the target problem
    shift = 0.5 * lam - target.A
    P, phi = lq_sol.P_stage[..., 0, 0], lq_sol.phi_stage[..., 0]
    U, u0 = lq_sol.loop.U[..., 0], lq_sol.loop.u0
    pi_g, pi_o = U, u0 + U * shift
    p_g, p_o = P, phi + P * shift
    sig = target.sampled(grid)["sigma"]
    q_g = P[..., None] * np.einsum("ksij,ksi->ksj", sig, pi_g)
    q_o = P[..., None] * np.einsum("ksij,ksi->ksj", sig, pi_o)
    info = {"constraint_gap": gap, "dual_curvature": curvature, "evaluations": evals, "reduced": reduce_first,
            "lambda_target": lam, "value_target": J}
    if reduce_first:
        maps = _unwind_maps(red, pi_g, pi_o, p_g, p_o, q_g, q_o)
        return MVSolution(spec, grid, W, "dual", red.scale * J, red.multiplier(lam), maps, red, info=info)
    maps = (pi_g, pi_o, p_g, p_o, q_g, q_o)
    return MVSolution(spec, grid, W, "dual", J, lam, maps, red, info=info)


def closed_form_value(spec: MVSpec, grid: TimeGrid) -> float:
    return solve_closed_form(spec, grid).value


def dual_value(spec: MVSpec, grid: TimeGrid, tol: float = 1e-12) -> float:
    return solve_dual(spec, grid, None, tol).value


def mv_value(spec: MVSpec, grid: TimeGrid, method: str = "auto") -> float:
    """Path-free optimal value, used as the deterministic evaluator for finite differences."""
    if method == "auto":
        method = "closed_form" if spec.d == 1 else "dual"
    return closed_form_value(spec, grid) if method == "closed_form" else dual_value(spec, grid)


# ---------------------------------------------------------- verification


@dataclass(frozen=True)
class MVVerification:
    mean_error: float
    mean_stderr: float
    variance_gap: float
    variance_stderr: float
    adjoint_residual: float
    martingale_drift: float
    martingale_zscore: float
    n_paths: int

    def passed(self, k: float = 4.0) -> bool:
        return (self.mean_error <= k * self.mean_stderr + 1e-12
                and self.martingale_zscore <= k
                and self.adjoint_residual <= 1e-8)


def mc_verify(spec: MVSpec, sol: MVSolution, W: BrownianEnsemble, chunk: int = DEFAULT_CHUNK) -> MVVerification:
    """Re-simulate wealth under the optimal feedback on ``W`` and check the optimality relations.

    The martingale check uses the discounted adjoint ``exp(int_0^t r) p``, which
    reduces to ``p`` itself when the rate vanishes.
    """
    grid = sol.grid
    s = spec.sampled(grid)
    R = cumulative_stage_integral(spec.r, grid)
    disc = np.exp(_nodes(R))
    ex, sig = s["excess"][:, 0], s["sigma"][:, 0]
    K = grid.steps
    term = RunningStats((2,))
    mart = RunningStats((K + 1,))
    resid = 0.0
    for _, _, dW in W.chunks(chunk):
        X = sol._euler(dW)
        pi, p, q = sol.adjoint_paths(X)
        XT = X[:, -1] - spec.A
        term.add(np.stack([XT, XT * XT], axis=1))
        mart.add(p * disc)
        rel = p[:, :-1, None] * ex[None] + np.einsum("kij,pkj->pki", sig, q)
        resid = max(resid, float(np.abs(rel).max(initial=0.0)))
    mean, se = term.mean, term.stderr
    drift = np.abs(mart.mean - mart.mean[0])
    mse = mart.stderr
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(drift == 0.0, 0.0, drift / mse)
    return MVVerification(float(abs(mean[0])), float(se[0]), float(abs(mean[1] - sol.value)), float(se[1]),
                          resid, float(drift.max()), float(np.nanmax(z)), term.n)
