"""Fixed-point forward-backward solver, used to cross-check the Riccati route.

Given an affine control iterate ``u = U x + u0``, the adjoint of the resulting
closed loop is ``p = Pi x + pi`` where ``(Pi, pi)`` solve *linear* backward
ODEs. The first-order condition then produces a new control, and the iterate
is relaxed towards it until successive controls agree.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .core import BrownianEnsemble, RunningStats, TimeGrid
from .errors import ConvergenceFailureError, IntegrationFailureError, SingularRiccatiError
from .lq import LQSolution, LQSpec, affine_pair, closed_loop_from_feedback, stage_stack


def _update(s, Pis, pis):
    """Control solving the first-order condition for adjoint ``Pi x + pi``.

    The diffusion loading of the adjoint depends on the control through ``D``;
    solving for it implicitly keeps the iteration stable when ``N`` is small
    relative to the control-dependent noise.
    """
    B, C, D, f, N = s["B"], s["C"], s["D"], s["f"], s["N"]
    Bt = np.swapaxes(B, -1, -2)
    Dt = np.swapaxes(D, -1, -2)
    PD = Pis[:, :, None] @ D
    gain = N + (Dt @ PD).sum(axis=2)
    lin = Bt @ Pis + (Dt @ (Pis[:, :, None] @ C)).sum(axis=2)
    off = np.einsum("ksba,ksb->ksa", B, pis) + np.einsum("ksjba,ksjb->ksa", PD, f)
    try:
        U = -np.linalg.solve(gain, lin)
        u0 = -np.linalg.solve(gain, off[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularRiccatiError("first-order condition is singular") from exc
    return U, u0


def _l2_gap(loop, dU, du0, W: BrownianEnsemble, x0, dt) -> float:
    Wq, wq, w0q = affine_pair(dU[:, 0], du0[:, 0], dU[:, 0], du0[:, 0])
    Wq, wq, w0q = (np.ascontiguousarray(a[:, None]) for a in (Wq, wq, w0q))
    Ah, bh, Ch, dh = loop.left()
    stats = RunningStats((1,))
    for _, _, dW in W.chunks():
        x = kernels.simulate_affine(Ah, bh, Ch, dh, x0, dW, dt)
        stats.add(kernels.quad_paths(x, Wq, wq, w0q, dt))
    return float(np.sqrt(max(stats.mean[0], 0.0)))


def fbsde_picard_oracle(spec: LQSpec, grid: TimeGrid, W: BrownianEnsemble, max_iters: int = 200,
                        tol: float = 1e-8, damping: float = 0.5) -> LQSolution:
    """Damped fixed-point iteration on the optimality system.

    Iterates live on the stage points of the grid. The stopping rule is the
    Monte-Carlo L2 norm ``sqrt(E int |u_new - u|^2 dt)`` under the current
    iterate. The returned solution carries ``iterations`` and ``residuals``.
    """
    s = spec.sampled(grid)
    K, n, m = grid.steps, spec.n, spec.m
    U = np.zeros((K, 3, m, n))
    u0 = np.zeros((K, 3, m))
    history = []
    for it in range(1, max_iters + 1):
        loop = closed_loop_from_feedback(s, U, u0)
        Pi, pi, Pim, pim, status = kernels.linear_backward(loop.Ah, loop.bh, loop.Ch, loop.dh,
                                                          s["A"], s["C"], s["Q"], s["M"], grid.dt)
        if status != kernels.OK:
            raise IntegrationFailureError(f"adjoint ODE blew up at Picard iteration {it}")
        Pis, pis = stage_stack(Pi, Pim), stage_stack(pi, pim)
        U_new, u0_new = _update(s, Pis, pis)
        gap = _l2_gap(loop, U_new - U, u0_new - u0, W, spec.x0, grid.dt)
        history.append(gap)
        if not np.isfinite(gap):
            break
        if gap < tol:
            U, u0 = U_new, u0_new
            loop = closed_loop_from_feedback(s, U, u0)
            break
        U = (1.0 - damping) * U + damping * U_new
        u0 = (1.0 - damping) * u0 + damping * u0_new
    else:
        raise ConvergenceFailureError(
            f"Picard iteration did not reach tol={tol:g} in {max_iters} iterations", history[-1])
    if not history or not history[-1] < tol:
        raise ConvergenceFailureError("Picard iteration diverged", history[-1] if history else float("nan"))
    sol = LQSolution(spec, grid, W, None, loop, 0.0, Pis, pis)
    sol.value = _duality_value(sol, s)
    sol.iterations = it
    sol.residuals = history
    return sol


def _duality_value(sol: LQSolution, s) -> float:
    """``1/2 [p(0)'x0 + E int (p'e + sum_j q_j'f_j) dt]`` from the moment ODEs."""
    Ps, phis = sol.P_stage, sol.phi_stage
    w_e = np.einsum("ksba,ksb->ksa", Ps, s["e"])
    w0_e = np.einsum("ksa,ksa->ks", phis, s["e"])
    Ptf = np.einsum("ksba,ksjb->ksja", Ps, s["f"])
    w_f = np.einsum("ksjba,ksjb->ksa", sol.loop.Ch, Ptf)
    w0_f = np.einsum("ksja,ksja->ks", sol.loop.dh, Ptf)
    K, n = sol.grid.steps, sol.spec.n
    _, _, I = sol.expect(np.zeros((K, 3, 1, n, n)), (w_e + w_f)[:, :, None], (w0_e + w0_f)[:, :, None])
    x0 = sol.spec.x0
    p0 = Ps[0, 0] @ x0 + phis[0, 0]
    return float(0.5 * (p0 @ x0 + I[0]))
