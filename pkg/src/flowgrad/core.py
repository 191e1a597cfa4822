"""Shared data types, errors, seeded noise and the EDM noise-level grid."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np


class FlowgradError(Exception):
    """Base class for all library errors."""


class ConfigurationError(FlowgradError, ValueError):
    pass


class ContractError(FlowgradError, ValueError):
    pass


class DomainError(FlowgradError, ValueError):
    pass


class RangeError(FlowgradError, ValueError):
    pass


class DivergenceError(FlowgradError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridMeta:
    n_lat: int
    n_lon: int
    lats: tuple[float, ...]

    def __post_init__(self):
        if len(self.lats) != self.n_lat:
            raise ContractError(f"expected {self.n_lat} latitudes, got {len(self.lats)}")
        lats = np.asarray(self.lats, dtype=float)
        if np.any(np.abs(lats) > 90.0):
            raise ContractError("latitudes must lie in [-90, 90]")
        if self.n_lat > 1:
            d = np.diff(lats)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise ContractError("latitudes must be strictly monotone")


@dataclass(frozen=True, eq=False)
class StateVector:
    """Flat float64 sample with a logical shape and optional lat-lon grid.

    The stored array is read-only. ``np.asarray(sv)`` gives the flat data.
    """

    data: np.ndarray
    shape: tuple[int, ...]
    grid: GridMeta | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64).reshape(-1)
        shape = tuple(int(s) for s in self.shape)
        if int(np.prod(shape, dtype=np.int64)) != data.size:
            raise ContractError(f"shape {shape} does not match data length {data.size}")
        if not np.all(np.isfinite(data)):
            raise ContractError("state contains non-finite entries")
        if self.grid is not None and self.grid.n_lat * self.grid.n_lon != data.size:
            raise ContractError("grid size does not match data length")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, arr, grid: GridMeta | None = None) -> "StateVector":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.reshape(-1), arr.shape, grid)

    def like(self, data) -> "StateVector":
        """New state with this state's shape and grid."""
        return StateVector(data, self.shape, self.grid)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return self.data.size

    @property
    def size(self) -> int:
        return self.data.size

    def grid_view(self) -> np.ndarray:
        """2-D view for maps: (n_lat, n_lon) if gridded, else (1, n) or the 2-D shape."""
        if self.grid is not None:
            return self.data.reshape(self.grid.n_lat, self.grid.n_lon)
        if len(self.shape) == 2:
            return self.data.reshape(self.shape)
        return self.data.reshape(1, -1)


def as_state(x, like: StateVector | None = None) -> StateVector:
    if isinstance(x, StateVector):
        return x
    if like is not None:
        return like.like(np.asarray(x, dtype=float))
    return StateVector.from_array(x)


@dataclass(frozen=True)
class Conditioning:
    """Vector conditioner ``c`` plus ordered named scalar conditioners.

    ``tau`` is day of year plus day fraction (1.5 is Jan 1, 12:00 UTC);
    ``zeta`` is the UTC second of day.
    """

    c: StateVector
    scalars: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not isinstance(self.c, StateVector):
            object.__setattr__(self, "c", as_state(self.c))
        scalars = tuple((str(k), float(v)) for k, v in self.scalars)
        names = [k for k, _ in scalars]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate scalar conditioner names: {names}")
        for k, v in scalars:
            if not np.isfinite(v):
                raise ContractError(f"scalar {k} is not finite")
            if k == "tau" and v < 0:
                raise ContractError("tau must be >= 0")
        object.__setattr__(self, "scalars", scalars)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.scalars)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.scalars], dtype=float)

    def scalar(self, name: str) -> float:
        for k, v in self.scalars:
            if k == name:
                return v
        raise ContractError(f"no scalar conditioner named {name!r}")

    def replace(self, c=None, scalars: dict[str, float] | None = None) -> "Conditioning":
        new_c = self.c if c is None else as_state(c, like=self.c)
        vals = dict(self.scalars)
        if scalars:
            unknown = set(scalars) - set(vals)
            if unknown:
                raise ContractError(f"unknown scalar conditioners {sorted(unknown)}")
            vals.update(scalars)
        return Conditioning(new_c, tuple((k, vals[k]) for k in self.names))

    def perturbed(self, delta_c, delta_scalars: Sequence[float] | np.ndarray, eps: float = 1.0):
        """``self + eps * (delta_c, delta_scalars)``; scalar deltas follow ``self.names`` order."""
        ds = np.asarray(delta_scalars, dtype=float).reshape(-1)
        if ds.size != len(self.scalars):
            raise ContractError("scalar delta length does not match conditioning")
        c = np.asarray(self.c) + eps * np.asarray(delta_c, dtype=float).reshape(-1)
        new = {k: v + eps * d for (k, v), d in zip(self.scalars, ds)}
        return self.replace(c=c, scalars=new)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    levels: np.ndarray
    rho: float
    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        lv = np.array(self.levels, dtype=np.float64)
        if lv.ndim != 1 or lv.size < 2:
            raise ContractError("time grid needs at least two levels")
        if not np.all(np.diff(lv) < 0):
            raise ContractError("time grid must be strictly decreasing")
        if lv[-1] != 0.0 or lv[0] != self.sigma_max:
            raise ContractError("time grid must run from sigma_max to exactly 0")
        if np.any(lv[:-1] < self.sigma_min):
            raise ContractError("interior levels must be >= sigma_min")
        object.__setattr__(self, "levels", _frozen(lv))

    @property
    def n_steps(self) -> int:
        return self.levels.size - 1

    @property
    def T(self) -> float:
        return float(self.levels[0])

    def describe(self) -> dict[str, Any]:
        return {
            "n_steps": self.n_steps,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
        }


def edm_time_grid(
    n_steps: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0
) -> TimeGrid:
    """Rho-spaced EDM noise levels from ``sigma_max`` to ``sigma_min``, then a final 0."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps}")
    if not (0 < sigma_min < sigma_max) or not np.isfinite(sigma_max):
        raise ConfigurationError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not rho > 0:
        raise ConfigurationError(f"rho must be positive, got {rho}")
    n_steps = int(n_steps)
    if n_steps == 1:
        sig = np.array([sigma_max], dtype=float)
    else:
        i = np.arange(n_steps, dtype=float)
        lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
        sig = (hi + i / (n_steps - 1) * (lo - hi)) ** rho
        # pin the endpoints against pow round-off
        sig[0], sig[-1] = sigma_max, sigma_min
    return TimeGrid(np.append(sig, 0.0), float(rho), float(sigma_min), float(sigma_max))


def gaussian_noise(shape: Sequence[int] | int, seed: int | Sequence[int]) -> StateVector:
    """I.i.d. standard normals from numpy's PCG64 bit generator.

    ``seed`` may be an int or a tuple of ints (hashed by ``SeedSequence``),
    which is how per-sample seeds are derived in batch runs.
    """
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    return StateVector(rng.standard_normal(int(np.prod(shape))), shape)


@dataclass(frozen=True)
class AdjointState:
    """Snapshot of the augmented adjoint system at one time level."""

    x: np.ndarray
    a: np.ndarray
    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.a.shape != self.x.shape:
            raise ContractError("adjoint and state shapes differ")


@dataclass(frozen=True)
class SensitivityResult:
    dq_dc: StateVector
    dq_dscalar: tuple[tuple[str, float], ...] = ()
    metadata: dict[str, Any] = field(default_factory=dict)
    dq_dxi: StateVector | None = None

    def scalar_grad(self, name: str) -> float:
        for k, v in self.dq_dscalar:
            if k == name:
                return v
        raise ContractError(f"result has no gradient for scalar {name!r}")

    @property
    def scalar_names(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.dq_dscalar)


def running_mean(arrays: Iterable[np.ndarray]) -> np.ndarray:
    """Order-fixed incremental mean; exact for one input or identical inputs."""
    mean = None
    for k, arr in enumerate(arrays, start=1):
        arr = np.asarray(arr, dtype=float)
        mean = arr.copy() if mean is None else mean + (arr - mean) / k
    if mean is None:
        raise ContractError("mean of an empty collection")
    return mean


def pmap(fn: Callable, items: Sequence, parallel: int = 1) -> list:
    """Ordered map, optionally over a process pool. Output order never depends on ``parallel``."""
    if parallel <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, items))
