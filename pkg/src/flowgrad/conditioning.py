"""Mid-month piecewise-linear conditioning c(tau) and delta extraction.

``tau`` is a continuous day coordinate (day of year plus day fraction), so
1.5 is Jan 1, 12:00 UTC.  Calendar mapping across years is left to callers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ContractError, GridMeta, RangeError, StateVector

MAX_NODE_GAP = 31.0
# cumulative day of year at the start of each month, non-leap
MONTH_STARTS = np.cumsum([0, 31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30])


@dataclass(frozen=True, eq=False)
class ConditioningSeries:
    taus: np.ndarray
    values: np.ndarray  # (n_nodes, n_cells)
    shape: tuple[int, ...]
    grid: GridMeta | None = None

    def __post_init__(self):
        taus = np.array(self.taus, dtype=float).reshape(-1)
        vals = np.array(self.values, dtype=float).reshape(taus.size, -1)
        if taus.size < 2:
            raise ContractError("a conditioning series needs at least two nodes")
        gaps = np.diff(taus)
        if np.any(gaps <= 0):
            raise ContractError("node taus must be strictly increasing")
        if np.any(gaps >= MAX_NODE_GAP):
            raise ContractError(f"consecutive nodes must be less than {MAX_NODE_GAP:g} days apart")
        if int(np.prod(self.shape)) != vals.shape[1]:
            raise ContractError(f"shape {self.shape} does not match {vals.shape[1]} values per node")
        if not np.all(np.isfinite(vals)):
            raise ContractError("series values must be finite")
        taus.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def span(self) -> tuple[float, float]:
        return float(self.taus[0]), float(self.taus[-1])

    def _segment(self, tau: float) -> int:
        lo, hi = self.span
        if not lo <= tau <= hi:
            raise RangeError(f"tau {tau} outside series range [{lo}, {hi}]")
        return int(np.searchsorted(self.taus, tau, side="right")) - 1

    def state(self, data) -> StateVector:
        return StateVector(data, self.shape, self.grid)


def interp(series: ConditioningSeries, tau: float) -> StateVector:
    i = series._segment(tau)
    if i == series.taus.size - 1:
        return series.state(series.values[i])
    t0, t1 = series.taus[i], series.taus[i + 1]
    c0, c1 = series.values[i], series.values[i + 1]
    return series.state(c0 + (tau - t0) / (t1 - t0) * (c1 - c0))


def interp_derivative(series: ConditioningSeries, tau: float) -> StateVector:
    """Segment slope; at an interior node the right-hand segment wins."""
    i = min(series._segment(tau), series.taus.size - 2)
    t0, t1 = series.taus[i], series.taus[i + 1]
    return series.state((series.values[i + 1] - series.values[i]) / (t1 - t0))


def series_deltas(series: ConditioningSeries, taus: Sequence[float]) -> list[tuple[StateVector, float]]:
    taus = [float(t) for t in taus]
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ContractError("taus must be non-decreasing")
    cs = [np.asarray(interp(series, t)) for t in taus]
    return [(series.state(c1 - c0), t1 - t0) for c0, c1, t0, t1 in zip(cs, cs[1:], taus, taus[1:])]


def telescoped_sum(deltas: Sequence[tuple[StateVector, float]]) -> np.ndarray:
    """Correctly rounded elementwise sum of the delta maps."""
    stack = np.stack([np.asarray(d) for d, _ in deltas])
    return np.array([math.fsum(col) for col in stack.T])


def cadence_taus(start: float, end: float, hours: float = 169.0) -> np.ndarray:
    """Evaluation times ``start + k * hours / 24`` that do not pass ``end``."""
    if hours <= 0:
        raise ContractError("cadence must be positive")
    step = hours / 24.0
    n = int(math.floor((end - start) / step + 1e-12))
    return start + step * np.arange(n + 1)


def month_of(tau: float) -> int:
    """0-based calendar month of a day-of-year coordinate (non-leap year)."""
    day = (float(tau) - 1.0) % 365.0
    return int(np.searchsorted(MONTH_STARTS, day, side="right")) - 1


def load_series(csv_path) -> ConditioningSeries:
    """CSV rows ``tau, c_1, ..., c_n`` plus ``<csv>.json`` holding ``shape`` and optional ``lats``."""
    csv_path = Path(csv_path)
    rows = []
    for line in csv_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ContractError(f"{csv_path}: no data rows")
    arr = np.array(rows)
    side = Path(str(csv_path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    shape = tuple(meta.get("shape", (arr.shape[1] - 1,)))
    grid = None
    if "lats" in meta:
        grid = GridMeta(shape[0], shape[1], tuple(meta["lats"]))
    return ConditioningSeries(arr[:, 0], arr[:, 1:], shape, grid)


def save_series(csv_path, series: ConditioningSeries) -> None:
    from .io import format_float, write_json

    header = "tau," + ",".join(f"c{i}" for i in range(series.values.shape[1]))
    lines = [header] + [
        ",".join(format_float(v) for v in (t, *row)) for t, row in zip(series.taus, series.values)
    ]
    Path(csv_path).write_text("\n".join(lines) + "\n")
    meta = {"shape": list(series.shape)}
    if series.grid is not None:
        meta["lats"] = list(series.grid.lats)
    write_json(str(csv_path) + ".json", meta)
