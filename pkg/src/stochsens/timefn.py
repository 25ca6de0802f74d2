"""Deterministic coefficient functions of time.

Every coefficient of the control problems is a ``TimeFunction``. Solvers never
call them point-by-point inside hot loops; they ask for ``sample(grid)``, an
array of shape ``(K, 3, *shape)`` holding the values at the left end, midpoint
and right end of each step. Sampling per step (rather than per node) keeps
piecewise-constant inputs exact under RK4.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import TimeGrid
from .errors import InvalidArgumentError, UnsupportedFeatureError

STAGES = (0.0, 0.5, 1.0)


class TimeFunction:
    shape: tuple = ()

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def sample(self, grid: TimeGrid) -> np.ndarray:
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False

    def at(self, times) -> np.ndarray:
        """Values at an array of times, shape ``(len(times), *shape)``."""
        times = np.asarray(times, dtype=float).ravel()
        return np.stack([self(t) for t in times]) if times.size else np.zeros((0,) + self.shape)

    def left(self, grid: TimeGrid) -> np.ndarray:
        return self.sample(grid)[:, 0]

    def __add__(self, other):
        if other is None:
            return self
        return Combination([(1.0, self), (1.0, other)], self.shape)

    __radd__ = __add__

    def __mul__(self, scalar):
        return Combination([(float(scalar), self)], self.shape)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)


class Constant(TimeFunction):
    def __init__(self, value):
        self.value = np.array(value, dtype=float)
        _check_finite(self.value, "constant")
        self.shape = self.value.shape

    def __call__(self, t):
        return self.value.copy()

    def sample(self, grid):
        out = np.empty((grid.steps, 3) + self.shape)
        out[...] = self.value
        return out

    def at(self, times):
        out = np.empty((np.size(times),) + self.shape)
        out[...] = self.value
        return out

    @property
    def is_zero(self):
        return not np.any(self.value)

    def __repr__(self):
        return f"Constant({self.value.tolist()!r})"


class FromCallable(TimeFunction):
    """Wraps ``fn(t) -> array``; samples are cached per grid."""

    def __init__(self, fn: Callable[[float], object], shape: Sequence[int], name: str = "coefficient"):
        self.fn = fn
        self.shape = tuple(shape)
        self.name = name
        self._cache: dict = {}
        self(0.0)

    def __call__(self, t):
        out = np.asarray(self.fn(float(t)), dtype=float)
        if out.shape != self.shape and out.size == int(np.prod(self.shape)) and out.ndim <= len(self.shape):
            out = out.reshape(self.shape)
        if out.shape != self.shape:
            if out.ndim > len(self.shape) and out.shape[-len(self.shape) or None:] == self.shape:
                raise UnsupportedFeatureError(
                    f"{self.name}: random (path-dependent) coefficients are not supported; "
                    f"got shape {out.shape}, expected {self.shape}"
                )
            raise InvalidArgumentError(f"{self.name}: expected shape {self.shape}, got {out.shape}")
        _check_finite(out, self.name)
        return out

    def sample(self, grid):
        key = (grid.horizon, grid.steps)
        cached = self._cache.get(key)
        if cached is None:
            times = grid.dt * (np.arange(grid.steps)[:, None] + np.asarray(STAGES)[None, :])
            cached = np.empty((grid.steps, 3) + self.shape)
            for k in range(grid.steps):
                for s in range(3):
                    cached[k, s] = self(times[k, s])
            cached.setflags(write=False)
            self._cache[key] = cached
        return cached.copy()


class PiecewiseConstant(TimeFunction):
    """``L`` equal pieces over ``[0, horizon]``; piece ``i`` covers ``[i h, (i+1) h)``."""

    def __init__(self, values, horizon: float):
        self.values = np.array(values, dtype=float)
        if self.values.ndim < 1 or self.values.shape[0] < 1:
            raise InvalidArgumentError("piecewise-constant function needs at least one piece")
        _check_finite(self.values, "piecewise-constant")
        self.horizon = float(horizon)
        self.shape = self.values.shape[1:]

    def _piece(self, t):
        n = self.values.shape[0]
        idx = np.floor(np.asarray(t) / self.horizon * n).astype(int)
        return np.clip(idx, 0, n - 1)

    def __call__(self, t):
        return self.values[int(self._piece(t))].copy()

    def at(self, times):
        return self.values[self._piece(np.asarray(times, dtype=float).ravel())]

    def sample(self, grid):
        mids = grid.dt * (np.arange(grid.steps) + 0.5)
        vals = self.values[self._piece(mids)]
        return np.repeat(vals[:, None], 3, axis=1)

    @property
    def is_zero(self):
        return not np.any(self.values)


class Combination(TimeFunction):
    """Weighted sum ``sum_i w_i f_i``; a scalar-valued ``f_i`` may carry an array weight."""

    def __init__(self, terms, shape):
        self.terms = [(np.asarray(w, dtype=float), f) for w, f in terms if f is not None]
        self.shape = tuple(shape)

    def __call__(self, t):
        out = np.zeros(self.shape)
        for w, f in self.terms:
            out = out + w * f(t)
        return out

    def _sum(self, lead, values):
        out = np.zeros(lead + self.shape)
        for (w, f), s in zip(self.terms, values):
            if f.shape == () and self.shape != ():
                s = s.reshape(s.shape + (1,) * len(self.shape))
            out = out + w * s
        return out

    def sample(self, grid):
        return self._sum((grid.steps, 3), [f.sample(grid) for _, f in self.terms])

    def at(self, times):
        return self._sum((np.size(times),), [f.at(times) for _, f in self.terms])

    @property
    def is_zero(self):
        return all(f.is_zero or not np.any(w) for w, f in self.terms)


class Mapped(TimeFunction):
    """``func(fn(t))`` for an array map ``func`` that broadcasts over leading axes."""

    def __init__(self, fn: TimeFunction, func, shape):
        self.fn = fn
        self.func = func
        self.shape = tuple(shape)

    def __call__(self, t):
        return np.asarray(self.func(self.fn(t)), dtype=float).reshape(self.shape)

    def sample(self, grid):
        s = np.asarray(self.func(self.fn.sample(grid)), dtype=float)
        return s.reshape((grid.steps, 3) + self.shape)

    def at(self, times):
        s = np.asarray(self.func(self.fn.at(times)), dtype=float)
        return s.reshape((np.size(times),) + self.shape)

    @property
    def is_zero(self):
        return self.fn.is_zero and not np.any(self.func(np.zeros(self.fn.shape)))


def zeros(shape) -> Constant:
    return Constant(np.zeros(shape))


def as_time_function(value, shape, name: str = "coefficient", horizon: float | None = None) -> TimeFunction:
    """Coerce constants, stacked arrays, callables and ``TimeFunction``s to a ``TimeFunction``."""
    shape = tuple(shape)
    if value is None:
        return zeros(shape)
    if isinstance(value, TimeFunction):
        if value.shape != shape:
            raise InvalidArgumentError(f"{name}: expected shape {shape}, got {value.shape}")
        return value
    if callable(value):
        return FromCallable(value, shape, name)
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return Constant(arr)
    if arr.size == 1 and int(np.prod(shape)) == 1:
        return Constant(arr.reshape(shape))
    if arr.ndim == len(shape) + 1 and arr.shape[1:] == shape:
        if arr.shape[0] == 1:
            return Constant(arr[0])
        if horizon is None:
            raise InvalidArgumentError(f"{name}: stacked samples need a horizon")
        return PiecewiseConstant(arr, horizon)
    raise InvalidArgumentError(f"{name}: expected shape {shape} (or stacked), got {arr.shape}")


def integrate(fn: TimeFunction, grid: TimeGrid) -> np.ndarray:
    """Simpson integral over each step from the left/mid/right samples; returns (K, *shape)."""
    s = fn.sample(grid)
    return grid.dt / 6.0 * (s[:, 0] + 4.0 * s[:, 1] + s[:, 2])


_GL_NODES = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GL_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


def cumulative_stage_integral(fn, grid: TimeGrid) -> np.ndarray:
    """``int_0^t fn`` at the stage points of every step, shape ``(K, 3, *shape)``.

    ``fn`` is a ``TimeFunction`` or a vectorised callable of a time array. Each
    half step is integrated with 3-point Gauss-Legendre, so the result stays
    exact for piecewise-constant inputs whose breaks sit on the grid.
    """
    K, dt = grid.steps, grid.dt
    h = dt / 2.0
    starts = h * np.arange(2 * K)
    nodes = (starts[:, None] + h / 2.0 * (1.0 + _GL_NODES)[None, :]).ravel()
    vals = fn.at(nodes) if isinstance(fn, TimeFunction) else np.asarray(fn(nodes), dtype=float)
    vals = vals.reshape((2 * K, 3) + vals.shape[1:])
    halves = h / 2.0 * np.tensordot(_GL_WEIGHTS, vals, axes=([0], [1]))
    run = np.concatenate([np.zeros((1,) + halves.shape[1:]), np.cumsum(halves, axis=0)])
    return np.stack([run[0:-1:2], run[1::2], run[2::2]], axis=1)


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name}: non-finite values (NaN/Inf) are rejected")
