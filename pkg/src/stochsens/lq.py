"""Stochastic linear-quadratic control with deterministic coefficients.

Minimise ``1/2 E[ int (x'Qx + u'Nu) dt + x(T)'M x(T) ]`` subject to

    dx = (A x + B u + e) dt + sum_j (C_j x + D_j u + f_j) dW_j.

The optimal control is affine in the state, ``u = U x + u0``, with gains built
from the Riccati triple ``(P, phi, c)``; the adjoint pair is ``p = P x + phi``
and ``q_j = P (C_j x + D_j u + f_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .core import DEFAULT_CHUNK, BrownianEnsemble, MCEstimate, RunningStats, TimeGrid
from .errors import (InvalidArgumentError, IntegrationFailureError, SingularRiccatiError,
                     ControlWeightError)
from .timefn import TimeFunction, as_time_function

SYM_TOL = 1e-10
PSD_TOL = 1e-10


def _family(value, d, shape, name, horizon):
    if value is None:
        return tuple(as_time_function(None, shape) for _ in range(d))
    if isinstance(value, np.ndarray) and value.ndim == len(shape) + 1 and value.shape[1:] == shape:
        value = list(value)
    if isinstance(value, (TimeFunction,)) or callable(value) or np.ndim(value) == 0:
        value = [value]
    items = list(value)
    if len(items) != d:
        raise InvalidArgumentError(f"{name}: expected {d} noise channels, got {len(items)}")
    return tuple(as_time_function(v, shape, f"{name}[{j}]", horizon) for j, v in enumerate(items))


def _count(value):
    if value is None:
        return 0
    if isinstance(value, TimeFunction) or callable(value) or np.ndim(value) == 0:
        return 1
    if isinstance(value, np.ndarray):
        return value.shape[0]
    return len(value)


def _control_dim(B, n):
    if isinstance(B, TimeFunction):
        return B.shape[1]
    if callable(B):
        B = B(0.0)
    arr = np.asarray(B, dtype=float)
    if arr.ndim == 0:
        return 1
    if arr.ndim >= 2 and arr.shape[-2] == n:
        return arr.shape[-1]
    raise InvalidArgumentError(f"B: cannot infer control dimension from shape {arr.shape}")


@dataclass(frozen=True, eq=False)
class LQSpec:
    x0: np.ndarray
    A: object = None
    B: object = None
    C: Sequence = None
    D: Sequence = None
    e: object = None
    f: Sequence = None
    Q: object = None
    N: object = None
    M: object = None
    d: int | None = None
    delta: float | None = None
    horizon: float | None = None
    allow_singular_control: bool = False
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.ndim != 1 or not np.all(np.isfinite(x0)):
            raise InvalidArgumentError("x0 must be a finite vector")
        n = x0.shape[0]
        if self.B is None:
            raise InvalidArgumentError("B is required")
        m = _control_dim(self.B, n)
        d = self.d if self.d is not None else max(_count(self.C), _count(self.D), _count(self.f), 1)
        h = self.horizon
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("x0", x0)
        set_("d", int(d))
        set_("A", as_time_function(self.A, (n, n), "A", h))
        set_("B", as_time_function(self.B, (n, m), "B", h))
        set_("C", _family(self.C, d, (n, n), "C", h))
        set_("D", _family(self.D, d, (n, m), "D", h))
        set_("e", as_time_function(self.e, (n,), "e", h))
        set_("f", _family(self.f, d, (n,), "f", h))
        set_("Q", as_time_function(self.Q, (n, n), "Q", h))
        if self.N is None and not self.allow_singular_control:
            raise ControlWeightError("N is required and must be uniformly positive definite")
        set_("N", as_time_function(self.N, (m, m), "N", h))
        M = np.zeros((n, n)) if self.M is None else np.asarray(self.M, dtype=float)
        if M.size == 1 and n == 1:
            M = M.reshape(1, 1)
        if M.shape != (n, n) or not np.all(np.isfinite(M)):
            raise InvalidArgumentError(f"M must be a finite {n}x{n} matrix")
        if np.abs(M - M.T).max() > SYM_TOL or np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -PSD_TOL:
            raise InvalidArgumentError("M must be symmetric positive semidefinite")
        set_("M", 0.5 * (M + M.T))

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def sampled(self, grid: TimeGrid) -> dict:
        """Stage samples of every coefficient on ``grid`` (validated, cached)."""
        key = (grid.horizon, grid.steps)
        if key not in self._cache:
            s = {
                "A": self.A.sample(grid), "B": self.B.sample(grid),
                "C": np.stack([c.sample(grid) for c in self.C], axis=2),
                "D": np.stack([c.sample(grid) for c in self.D], axis=2),
                "e": self.e.sample(grid),
                "f": np.stack([c.sample(grid) for c in self.f], axis=2),
                "Q": self.Q.sample(grid), "N": self.N.sample(grid), "M": self.M,
            }
            self._validate(s)
            for v in s.values():
                v.setflags(write=False)
            self._cache[key] = s
        return self._cache[key]

    def _validate(self, s):
        for name in ("A", "B", "C", "D", "e", "f", "Q", "N"):
            if not np.all(np.isfinite(s[name])):
                raise InvalidArgumentError(f"{name} is not finite on the grid")
        Q, N = s["Q"], s["N"]
        if np.abs(Q - np.swapaxes(Q, -1, -2)).max() > SYM_TOL:
            raise InvalidArgumentError("Q must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -PSD_TOL:
            raise InvalidArgumentError("Q must be positive semidefinite")
        if np.abs(N - np.swapaxes(N, -1, -2)).max() > SYM_TOL:
            raise InvalidArgumentError("N must be symmetric")
        if self.allow_singular_control:
            return
        low = float(np.linalg.eigvalsh(N).min())
        bound = self.delta if self.delta is not None else 0.0
        if not low > 0.0 or low < bound:
            raise ControlWeightError(
                f"N must be uniformly positive definite; smallest eigenvalue on the grid is {low:.6g}"
                + (f" < delta={bound:g}" if self.delta is not None else "")
            )

    def replace(self, **changes) -> "LQSpec":
        kw = dict(x0=self.x0, A=self.A, B=self.B, C=self.C, D=self.D, e=self.e, f=self.f, Q=self.Q,
                  N=self.N, M=self.M, d=self.d, delta=self.delta, horizon=self.horizon,
                  allow_singular_control=self.allow_singular_control)
        kw.update(changes)
        return LQSpec(**kw)


# ---------------------------------------------------------------- Riccati


def stage_stack(nodes: np.ndarray, mid: np.ndarray) -> np.ndarray:
    """(K+1, ...) node values and (K, ...) midpoints -> (K, 3, ...) stage values."""
    return np.stack([nodes[:-1], mid, nodes[1:]], axis=1)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray
    phi: np.ndarray
    scalar_offset: np.ndarray
    P_mid: np.ndarray
    phi_mid: np.ndarray

    @property
    def c(self) -> np.ndarray:
        return self.scalar_offset

    def stage_P(self) -> np.ndarray:
        return stage_stack(self.P, self.P_mid)

    def stage_phi(self) -> np.ndarray:
        return stage_stack(self.phi, self.phi_mid)

    def value(self, x0) -> float:
        x0 = np.asarray(x0, dtype=float)
        return float(0.5 * x0 @ self.P[0] @ x0 + self.phi[0] @ x0 + self.scalar_offset[0])


def riccati_integrate(spec: LQSpec, grid: TimeGrid) -> RiccatiSolution:
    s = spec.sampled(grid)
    P, phi, c, Pm, phim, status, k = kernels.riccati_backward(
        s["A"], s["B"], s["C"], s["D"], s["e"], s["f"], s["Q"], s["N"], s["M"], grid.dt)
    if status == kernels.SINGULAR:
        raise SingularRiccatiError(f"N + sum D'PD is not positive definite near t={k * grid.dt:.6g}")
    if status == kernels.BLOWN_UP:
        raise IntegrationFailureError(f"Riccati solution exceeded {kernels.BLOWUP:g} near t={k * grid.dt:.6g}")
    return RiccatiSolution(grid, P, phi, c, Pm, phim)


# ----------------------------------------------------------- closed loop


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """Affine feedback ``u = U x + u0`` and the resulting state coefficients, at stages."""

    U: np.ndarray
    u0: np.ndarray
    Ah: np.ndarray
    bh: np.ndarray
    Ch: np.ndarray
    dh: np.ndarray

    def left(self):
        return self.Ah[:, 0], self.bh[:, 0], self.Ch[:, 0], self.dh[:, 0]


def closed_loop_from_feedback(s: dict, U: np.ndarray, u0: np.ndarray) -> ClosedLoop:
    Ah = s["A"] + s["B"] @ U
    bh = s["e"] + np.einsum("ksab,ksb->ksa", s["B"], u0)
    Ch = s["C"] + s["D"] @ U[:, :, None]
    dh = s["f"] + np.einsum("ksjab,ksb->ksja", s["D"], u0)
    return ClosedLoop(U, u0, Ah, bh, Ch, dh)


def riccati_feedback(s: dict, Ps: np.ndarray, phis: np.ndarray):
    """Gains ``U = -K^{-1} S`` and ``u0 = -K^{-1} g`` from stage values of ``P`` and ``phi``."""
    B, C, D, f = s["B"], s["C"], s["D"], s["f"]
    Bt = np.swapaxes(B, -1, -2)
    Dt = np.swapaxes(D, -1, -2)
    PD = Ps[:, :, None] @ D
    Km = s["N"] + (Dt @ PD).sum(axis=2)
    S = Bt @ Ps + (Dt @ Ps[:, :, None] @ C).sum(axis=2)
    Pf = np.einsum("ksab,ksjb->ksja", Ps, f)
    g = np.einsum("ksba,ksb->ksa", B, phis) + np.einsum("ksjba,ksjb->ksa", D, Pf)
    U = -np.linalg.solve(Km, S)
    u0 = -np.linalg.solve(Km, g[..., None])[..., 0]
    return U, u0


def affine_pair(G, g, H, h):
    """Weights of ``E[(G x + g)'(H x + h)] = tr(W S) + w'm + w0``."""
    W = np.swapaxes(G, -1, -2) @ H
    w = np.einsum("...ab,...a->...b", G, h) + np.einsum("...ab,...a->...b", H, g)
    w0 = np.einsum("...a,...a->...", g, h)
    return W, w, w0


# ----------------------------------------------------------- solution


class LQSolution:
    """Optimal feedback solution; path quantities are simulated on first access."""

    def __init__(self, spec: LQSpec, grid: TimeGrid, W: BrownianEnsemble | None,
                 riccati: RiccatiSolution | None, loop: ClosedLoop, value: float, P_stage=None, phi_stage=None):
        self.spec = spec
        self.grid = grid
        self.W = W
        self.riccati = riccati
        self.loop = loop
        self.value = float(value)
        self._P_stage = P_stage if P_stage is not None else riccati.stage_P()
        self._phi_stage = phi_stage if phi_stage is not None else riccati.stage_phi()

    @property
    def P_stage(self) -> np.ndarray:
        return self._P_stage

    @property
    def phi_stage(self) -> np.ndarray:
        return self._phi_stage

    def _require_W(self):
        if self.W is None:
            raise InvalidArgumentError("no Brownian ensemble attached to this solution")
        return self.W

    def simulate(self, dW: np.ndarray) -> np.ndarray:
        Ah, bh, Ch, dh = self.loop.left()
        return kernels.simulate_affine(Ah, bh, Ch, dh, self.spec.x0, np.ascontiguousarray(dW), self.grid.dt)

    def path_chunks(self, size: int = DEFAULT_CHUNK, W: BrownianEnsemble | None = None):
        W = W if W is not None else self._require_W()
        for a, b, dW in W.chunks(size):
            yield a, b, dW, self.simulate(dW)

    # adjoint maps; nodes use the node values, per-step quantities the left stage
    def control(self, x: np.ndarray) -> np.ndarray:
        xl = x[:, :-1]
        return np.einsum("kab,pkb->pka", self.loop.U[:, 0], xl) + self.loop.u0[:, 0]

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        P, phi = self._nodes()
        return np.einsum("kab,pkb->pka", P, x) + phi

    def adjoint_diffusion(self, x: np.ndarray) -> np.ndarray:
        xl = x[:, :-1]
        Ps = self._P_stage[:, 0]
        vol = np.einsum("kjab,pkb->pkja", self.loop.Ch[:, 0], xl) + self.loop.dh[:, 0]
        return np.einsum("kab,pkjb->pkaj", Ps, vol)

    def _nodes(self):
        P = np.concatenate([self._P_stage[:, 0], self._P_stage[-1:, 2]])
        phi = np.concatenate([self._phi_stage[:, 0], self._phi_stage[-1:, 2]])
        return P, phi

    @cached_property
    def x_bar(self) -> np.ndarray:
        return self.simulate(self._require_W().increments)

    @cached_property
    def u_bar(self) -> np.ndarray:
        return self.control(self.x_bar)

    @cached_property
    def p_bar(self) -> np.ndarray:
        return self.adjoint(self.x_bar)

    @cached_property
    def q_bar(self) -> np.ndarray:
        return self.adjoint_diffusion(self.x_bar)

    # quadratic functionals ------------------------------------------------
    def expect(self, W_, w_, w0_):
        """Deterministic ``E int (x'Wx + w'x + w0) dt`` for stage weights of shape (K, 3, L, ...)."""
        Ah, bh, Ch, dh = self.loop.Ah, self.loop.bh, self.loop.Ch, self.loop.dh
        m, S, I = kernels.forward_moments(Ah, bh, Ch, dh, np.ascontiguousarray(W_), np.ascontiguousarray(w_),
                                          np.ascontiguousarray(w0_), self.spec.x0, self.grid.dt)
        return m, S, I

    def mc_integrals(self, W_, w_, w0_, chunk: int = DEFAULT_CHUNK) -> RunningStats:
        """Per-path left-point sums of the stage-0 weights, accumulated over the ensemble."""
        W0 = np.ascontiguousarray(W_[:, 0])
        w0v = np.ascontiguousarray(w_[:, 0])
        c0 = np.ascontiguousarray(w0_[:, 0])
        stats = RunningStats((W_.shape[2],))
        for _, _, _, x in self.path_chunks(chunk):
            stats.add(kernels.quad_paths(x, W0, w0v, c0, self.grid.dt))
        return stats

    def cost_weights(self):
        """Stage weights of the running cost ``x'Qx + u'Nu`` under the feedback."""
        s = self.spec.sampled(self.grid)
        U, u0, N = self.loop.U, self.loop.u0, s["N"]
        W_ = s["Q"] + np.swapaxes(U, -1, -2) @ N @ U
        w_ = 2.0 * np.einsum("ksba,ksbc,ksc->ksa", U, N, u0)
        w0_ = np.einsum("ksa,ksab,ksb->ks", u0, N, u0)
        return W_[:, :, None], w_[:, :, None], w0_[:, :, None]


def solve_lq(spec: LQSpec, grid: TimeGrid, W: BrownianEnsemble | None = None) -> LQSolution:
    if W is not None and (W.grid.steps != grid.steps or W.dim != spec.d):
        raise InvalidArgumentError(f"ensemble ({W.grid.steps} steps, d={W.dim}) does not match "
                                   f"grid ({grid.steps} steps) and spec (d={spec.d})")
    ric = riccati_integrate(spec, grid)
    s = spec.sampled(grid)
    Ps, phis = ric.stage_P(), ric.stage_phi()
    U, u0 = riccati_feedback(s, Ps, phis)
    loop = closed_loop_from_feedback(s, U, u0)
    return LQSolution(spec, grid, W, ric, loop, ric.value(spec.x0), Ps, phis)


# ------------------------------------------------------- MC diagnostics


def mc_cost(sol: LQSolution, chunk: int = DEFAULT_CHUNK) -> MCEstimate:
    """Monte-Carlo estimate of ``1/2 E[ x(T)'Mx(T) + int (x'Qx + u'Nu) dt ]``."""
    W_, w_, w0_ = sol.cost_weights()
    M = sol.spec.M
    stats = RunningStats()
    for _, _, _, x in sol.path_chunks(chunk):
        run = kernels.quad_paths(x, np.ascontiguousarray(W_[:, 0]), np.ascontiguousarray(w_[:, 0]),
                                 np.ascontiguousarray(w0_[:, 0]), sol.grid.dt)[:, 0]
        term = np.einsum("pa,ab,pb->p", x[:, -1], M, x[:, -1])
        stats.add(0.5 * (term + run))
    return stats.estimate()


def _duality_weights(sol: LQSolution):
    s = sol.spec.sampled(sol.grid)
    Ps, phis = sol.P_stage, sol.phi_stage
    Wc, wc, w0c = sol.cost_weights()
    # p'e and sum_j q_j'f_j as affine functions of x
    w_e = np.einsum("ksab,ksb->ksa", Ps, s["e"])
    w0_e = np.einsum("ksa,ksa->ks", phis, s["e"])
    Pf = np.einsum("ksab,ksjb->ksja", Ps, s["f"])
    w_f = np.einsum("ksjba,ksjb->ksa", sol.loop.Ch, Pf)
    w0_f = np.einsum("ksja,ksja->ks", sol.loop.dh, Pf)
    W_ = Wc[:, :, 0]
    w_ = wc[:, :, 0] - w_e - w_f
    w0_ = w0c[:, :, 0] - w0_e - w0_f
    return W_[:, :, None], w_[:, :, None], w0_[:, :, None]


def value_duality_residual(spec: LQSpec, sol: LQSolution, W: BrownianEnsemble | None = None,
                           control_variate: bool = False, chunk: int = DEFAULT_CHUNK) -> MCEstimate:
    """MC estimate of ``E[x(T)'Mx(T) + int(x'Qx + u'Nu)] - p(0)'x0 - E int (p'e + sum_j q_j'f_j)``.

    With ``control_variate`` the first- and second-order Ito terms of ``p'x`` along each step,
    ``(2 P x + phi)' v dW`` and ``v' P v (dW dW' - dt I)`` with ``v = C x + D u + f``, are
    subtracted path by path. Both have mean zero, so only the variance changes.
    """
    if W is not None and W is not sol.W:
        sol = LQSolution(spec, sol.grid, W, sol.riccati, sol.loop, sol.value, sol.P_stage, sol.phi_stage)
    W_, w_, w0_ = _duality_weights(sol)
    W0 = np.ascontiguousarray(W_[:, 0])
    wv = np.ascontiguousarray(w_[:, 0])
    c0 = np.ascontiguousarray(w0_[:, 0])
    P0, phi0 = sol.P_stage[0, 0], sol.phi_stage[0, 0]
    x0 = spec.x0
    p0x0 = float((P0 @ x0 + phi0) @ x0)
    Pl, phil = sol.P_stage[:, 0], sol.phi_stage[:, 0]
    Ch, dh = sol.loop.Ch[:, 0], sol.loop.dh[:, 0]
    stats = RunningStats()
    for _, _, dW, x in sol.path_chunks(chunk):
        run = kernels.quad_paths(x, W0, wv, c0, sol.grid.dt)[:, 0]
        term = np.einsum("pa,ab,pb->p", x[:, -1], spec.M, x[:, -1])
        r = term + run - p0x0
        if control_variate:
            xl = x[:, :-1]
            vol = np.einsum("kjab,pkb->pkja", Ch, xl) + dh
            lin = 2.0 * np.einsum("kab,pkb->pka", Pl, xl) + phil
            r = r - np.einsum("pka,pkja,pkj->p", lin, vol, dW)
            quad = np.einsum("pkia,kab,pkjb->pkij", vol, Pl, vol)
            dd = np.einsum("pki,pkj->pkij", dW, dW) - sol.grid.dt * np.eye(dW.shape[2])
            r = r - np.einsum("pkij,pkij->p", quad, dd)
        stats.add(r)
    return stats.estimate()


def simulate_open_loop(spec: LQSpec, grid: TimeGrid, dW: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Euler paths of the state under an arbitrary control path ``u`` of shape (P, K, m)."""
    s = spec.sampled(grid)
    A, B, C, D, e, f = (s[k][:, 0] for k in ("A", "B", "C", "D", "e", "f"))
    P, K = dW.shape[0], grid.steps
    x = np.empty((P, K + 1, spec.n))
    x[:, 0] = spec.x0
    for k in range(K):
        xk, uk = x[:, k], u[:, k]
        drift = xk @ A[k].T + uk @ B[k].T + e[k]
        vol = np.einsum("jab,pb->pja", C[k], xk) + np.einsum("jab,pb->pja", D[k], uk) + f[k]
        x[:, k + 1] = xk + drift * grid.dt + np.einsum("pja,pj->pa", vol, dW[:, k])
    return x


def discrete_cost(spec: LQSpec, grid: TimeGrid, dW: np.ndarray, u: np.ndarray) -> float:
    """Sample mean of ``1/2 [x(T)'Mx(T) + sum_k (x'Qx + u'Nu) dt]`` under the given control paths."""
    s = spec.sampled(grid)
    x = simulate_open_loop(spec, grid, dW, u)
    Q, N = s["Q"][:, 0], s["N"][:, 0]
    xl = x[:, :-1]
    run = np.einsum("pka,kab,pkb->p", xl, Q, xl) + np.einsum("pka,kab,pkb->p", u, N, u)
    term = np.einsum("pa,ab,pb->p", x[:, -1], spec.M, x[:, -1])
    return float(0.5 * np.mean(term + grid.dt * run))


@dataclass(frozen=True)
class LQMoments:
    """First and second moments of the optimal state at the grid nodes."""

    mean: np.ndarray
    second: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.second - np.einsum("ka,kb->kab", self.mean, self.mean)


def state_moments(sol: LQSolution) -> LQMoments:
    K, n = sol.grid.steps, sol.spec.n
    zW = np.zeros((K, 3, 1, n, n))
    m, S, _ = sol.expect(zW, np.zeros((K, 3, 1, n)), np.zeros((K, 3, 1)))
    return LQMoments(m, S)


def expected_cost(sol: LQSolution) -> float:
    """Deterministic (moment ODE) evaluation of the cost functional; matches ``value`` to O(dt^4)."""
    W_, w_, w0_ = sol.cost_weights()
    m, S, I = sol.expect(W_, w_, w0_)
    return float(0.5 * (np.trace(sol.spec.M @ S[-1]) + I[0]))
