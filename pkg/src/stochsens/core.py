"""Time grids, Brownian ensembles and discrete Ito processes."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .errors import InvalidArgumentError
from .rng import standard_normals

DEFAULT_CHUNK = 8192


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgumentError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


def build_grid(horizon: float, steps: int) -> TimeGrid:
    return TimeGrid(horizon, steps)


@dataclass(frozen=True)
class MCEstimate:
    """A Monte-Carlo mean with its standard error."""

    mean: float
    stderr: float
    n: int

    @classmethod
    def from_samples(cls, samples) -> "MCEstimate":
        s = np.asarray(samples, dtype=float).ravel()
        n = s.size
        se = float(s.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(s.mean()), se, n)

    @classmethod
    def exact(cls, value: float) -> "MCEstimate":
        return cls(float(value), 0.0, 1)

    def within(self, target: float, k: float = 4.0, floor: float = 0.0) -> bool:
        return abs(self.mean - target) <= k * self.stderr + floor

    def __float__(self):
        return self.mean


class RunningStats:
    """Streaming sum / sum-of-squares accumulator for chunked Monte Carlo."""

    def __init__(self, shape=()):
        self.n = 0
        self.s1 = np.zeros(shape)
        self.s2 = np.zeros(shape)

    def add(self, samples):
        samples = np.asarray(samples, dtype=float)
        self.n += samples.shape[0]
        self.s1 = self.s1 + samples.sum(axis=0)
        self.s2 = self.s2 + (samples * samples).sum(axis=0)

    @property
    def mean(self):
        return self.s1 / self.n

    @property
    def stderr(self):
        if self.n < 2:
            return np.zeros_like(self.s1)
        var = (self.s2 - self.s1 ** 2 / self.n) / (self.n - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.n)

    def estimate(self) -> MCEstimate:
        return MCEstimate(float(self.mean), float(self.stderr), self.n)


@dataclass(frozen=True)
class BrownianEnsemble:
    """Brownian increments, generated lazily and deterministically from ``seed``.

    ``substeps > 1`` means every increment is the sum of that many draws on a
    finer grid; ``coarsen`` uses this so a coarse ensemble shares its noise with
    the fine one it came from.
    """

    grid: TimeGrid
    n_paths: int
    dim: int
    seed: int
    substeps: int = 1
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise InvalidArgumentError(f"n_paths must be >= 1, got {self.n_paths}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidArgumentError(f"dim must be >= 1, got {self.dim}")
        if self.substeps < 1:
            raise InvalidArgumentError("substeps must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_paths, self.grid.steps, self.dim)

    def chunk(self, start: int, stop: int) -> np.ndarray:
        """Increments of paths ``start..stop-1``, shape ``(stop-start, K, d)``."""
        if not 0 <= start <= stop <= self.n_paths:
            raise InvalidArgumentError(f"bad path range [{start}, {stop})")
        K, d, s = self.grid.steps, self.dim, self.substeps
        z = standard_normals(self.seed, start, stop - start, K * s * d)
        z = z.reshape(stop - start, K, s, d).sum(axis=2)
        return z * np.sqrt(self.grid.dt / s)

    def chunks(self, size: int = DEFAULT_CHUNK) -> Iterator[tuple[int, int, np.ndarray]]:
        for start in range(0, self.n_paths, size):
            stop = min(start + size, self.n_paths)
            yield start, stop, self.chunk(start, stop)

    @cached_property
    def increments(self) -> np.ndarray:
        inc = self.chunk(0, self.n_paths)
        inc.setflags(write=False)
        return inc

    def terminal(self) -> np.ndarray:
        """``W(T)`` per path, computed chunk by chunk."""
        out = np.empty((self.n_paths, self.dim))
        for a, b, inc in self.chunks():
            out[a:b] = inc.sum(axis=1)
        return out

    def coarsen(self, factor: int) -> "BrownianEnsemble":
        if self.grid.steps % factor:
            raise InvalidArgumentError(f"{self.grid.steps} steps not divisible by {factor}")
        return BrownianEnsemble(TimeGrid(self.grid.horizon, self.grid.steps // factor),
                                self.n_paths, self.dim, self.seed, self.substeps * factor)

    def with_paths(self, n_paths: int) -> "BrownianEnsemble":
        return BrownianEnsemble(self.grid, n_paths, self.dim, self.seed, self.substeps)


def sample_brownian(grid: TimeGrid, n_paths: int, dim: int, seed: int) -> BrownianEnsemble:
    return BrownianEnsemble(grid, int(n_paths), int(dim), int(seed))


@dataclass(frozen=True)
class ItoTriple:
    """``x0 + int drift dt + int diffusion dW`` sampled on a grid.

    ``drift`` has shape ``(P, K, n)`` and ``diffusion`` ``(P, K, n, d)`` where
    ``P`` is either the ensemble size or 1 for path-independent integrands.
    """

    x0: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        drift = np.asarray(self.drift, dtype=float)
        diff = np.asarray(self.diffusion, dtype=float)
        if x0.ndim != 1:
            raise InvalidArgumentError("x0 must be a vector")
        n = x0.shape[0]
        if drift.ndim != 3 or drift.shape[2] != n:
            raise InvalidArgumentError(f"drift must have shape (paths, K, {n}), got {drift.shape}")
        if diff.ndim != 4 or diff.shape[2] != n or diff.shape[1] != drift.shape[1]:
            raise InvalidArgumentError(f"diffusion must have shape (paths, K, {n}, d), got {diff.shape}")
        for name, arr in (("x0", x0), ("drift", drift), ("diffusion", diff)):
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} contains NaN or Inf")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "diffusion", diff)

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def steps(self) -> int:
        return self.drift.shape[1]

    @classmethod
    def constant(cls, x0, drift, diffusion, steps: int) -> "ItoTriple":
        """Triple whose integrands do not depend on time or path."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        drift = np.broadcast_to(np.asarray(drift, dtype=float), x0.shape)
        diffusion = np.asarray(diffusion, dtype=float)
        diffusion = diffusion.reshape(x0.shape[0], -1) if diffusion.ndim < 2 else diffusion
        return cls(x0, np.tile(drift, (1, steps, 1)), np.tile(diffusion, (1, steps, 1, 1)))

    def scaled_add(self, alpha: float, other: "ItoTriple") -> "ItoTriple":
        """``alpha * self + other``."""
        return ItoTriple(alpha * self.x0 + other.x0, alpha * self.drift + other.drift,
                         alpha * self.diffusion + other.diffusion)


def _check_compatible(W: BrownianEnsemble, *triples: ItoTriple):
    for tr in triples:
        if tr.steps != W.grid.steps:
            raise InvalidArgumentError(f"triple has {tr.steps} steps, grid has {W.grid.steps}")
        for arr in (tr.drift, tr.diffusion):
            if arr.shape[0] not in (1, W.n_paths):
                raise InvalidArgumentError(f"path dimension {arr.shape[0]} vs ensemble {W.n_paths}")
        if tr.diffusion.shape[3] != W.dim:
            raise InvalidArgumentError(f"diffusion has {tr.diffusion.shape[3]} noise columns, ensemble has {W.dim}")
    if len(triples) == 2 and triples[0].n != triples[1].n:
        raise InvalidArgumentError("triples have different state dimensions")


def ito_evaluate(triple: ItoTriple, W: BrownianEnsemble) -> np.ndarray:
    """Left-point Euler sums of the triple on ``W``; shape ``(n_paths, K+1, n)``."""
    _check_compatible(W, triple)
    dW = W.increments
    inc = triple.drift * W.grid.dt + np.einsum("pknd,pkd->pkn", triple.diffusion, dW)
    inc = np.broadcast_to(inc, (W.n_paths,) + inc.shape[1:])
    out = np.empty((W.n_paths, W.grid.steps + 1, triple.n))
    out[:, 0] = triple.x0
    np.cumsum(inc, axis=1, out=out[:, 1:])
    out[:, 1:] += triple.x0
    return out


def _paths_mean(per_path: np.ndarray) -> float:
    return float(per_path.mean())


def inner_product_I(a: ItoTriple, b: ItoTriple, W: BrownianEnsemble) -> float:
    """``x0.y0 + E int x1.y1 dt + E int tr(x2^T y2) dt`` with left-point sums."""
    _check_compatible(W, a, b)
    dt = W.grid.dt
    drift = (a.drift * b.drift).sum(axis=(1, 2))
    diff = (a.diffusion * b.diffusion).sum(axis=(1, 2, 3))
    return float(a.x0 @ b.x0) + dt * _paths_mean(drift) + dt * _paths_mean(diff)


def integration_by_parts_residual(a: ItoTriple, b: ItoTriple, W: BrownianEnsemble) -> MCEstimate:
    """``E[x(T).y(T)] - x0.y0 - E int (x.y1 + y.x1 + sum_j x2^j.y2^j) dt`` per path, averaged."""
    _check_compatible(W, a, b)
    x = ito_evaluate(a, W)
    y = ito_evaluate(b, W)
    dt = W.grid.dt
    x1 = np.broadcast_to(a.drift, x[:, :-1].shape)
    y1 = np.broadcast_to(b.drift, y[:, :-1].shape)
    integrand = (x[:, :-1] * y1).sum(axis=2) + (y[:, :-1] * x1).sum(axis=2)
    integrand = integrand + np.broadcast_to((a.diffusion * b.diffusion).sum(axis=(2, 3)), integrand.shape)
    per_path = (x[:, -1] * y[:, -1]).sum(axis=1) - a.x0 @ b.x0 - dt * integrand.sum(axis=1)
    return MCEstimate.from_samples(per_path)


def isometry_gap(triple: ItoTriple, W: BrownianEnsemble) -> MCEstimate:
    """``|x(T)|^2 - int |x2|^2 dt`` per path for a diffusion-only triple started at 0."""
    x = ito_evaluate(triple, W)
    quad = np.broadcast_to((triple.diffusion ** 2).sum(axis=(1, 2, 3)), (W.n_paths,))
    per_path = ((x[:, -1] - triple.x0) ** 2).sum(axis=1) - W.grid.dt * quad
    return MCEstimate.from_samples(per_path)
