"""Deterministic probability-flow ODE integration from X_T = T xi down to X_0."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Conditioning, ConfigurationError, ContractError, DivergenceError, TimeGrid, StateVector
from .velocity import VelocityField

SOLVERS = ("euler", "heun")
FGT1 = b"FGT1"


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    solver: str
    cond: Conditioning
    xi: np.ndarray
    x_final: np.ndarray
    # (n_levels, dim) when stored, else None
    states: np.ndarray | None = None

    @property
    def stored(self) -> bool:
        return self.states is not None

    def x0(self, like: StateVector | None = None) -> StateVector:
        return like.like(self.x_final) if like is not None else StateVector.from_array(self.x_final)


def check_solver(solver: str) -> str:
    if solver not in SOLVERS:
        raise ConfigurationError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    return solver


def step(field: VelocityField, x, t_cur: float, t_next: float, cond: Conditioning, solver: str, final: bool):
    """One solver step from ``t_cur`` to ``t_next``; Heun degrades to Euler on the final step."""
    h = t_next - t_cur
    k1 = field.eval(x, t_cur, cond)
    x_eul = x + h * k1
    if solver == "euler" or final:
        return x_eul
    k2 = field.eval(x_eul, t_next, cond)
    return x + 0.5 * h * (k1 + k2)


def sample(
    field: VelocityField,
    xi,
    cond: Conditioning,
    grid: TimeGrid,
    solver: str = "heun",
    store: bool = False,
) -> Trajectory:
    """Integrate ``dX = u dt`` backwards from ``grid.T * xi`` to t = 0.

    ``xi`` may also be a ``(batch, dim)`` array when the field supports batched
    evaluation; the final state then has the same leading axis.
    """
    check_solver(solver)
    xi = np.array(xi, dtype=float)
    if xi.shape[-1] != field.state_dim:
        raise ContractError(f"noise has {xi.shape[-1]} entries, field state has {field.state_dim}")
    lv = grid.levels
    x = lv[0] * xi
    states = [x] if store else None
    n = lv.size - 1
    for i in range(n):
        x = step(field, x, lv[i], lv[i + 1], cond, solver, final=i == n - 1)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state after step {i}", step=i)
        if store:
            states.append(x)
    return Trajectory(grid, solver, cond, xi, x, np.stack(states) if store else None)


def save_trajectory(path, traj: Trajectory) -> None:
    """FGT1 container (levels then states) with a JSON sidecar for solver and conditioning."""
    from .io import write_container, write_json

    if not traj.stored:
        raise ContractError("only stored trajectories can be serialised")
    n_levels, dim = traj.states.shape
    write_container(path, FGT1, [2, n_levels, dim], np.concatenate([traj.grid.levels, traj.states.reshape(-1)]))
    write_json(
        str(path) + ".json",
        {
            "solver": traj.solver,
            "grid": traj.grid.describe(),
            "xi": traj.xi,
            "c": np.asarray(traj.cond.c),
            "c_shape": traj.cond.c.shape,
            "scalars": [[k, v] for k, v in traj.cond.scalars],
        },
    )


def load_trajectory(path) -> Trajectory:
    from .io import read_container

    ints, flat = read_container(path, FGT1)
    if ints[0] != 2:
        raise ContractError(f"{path}: expected 2 dims, got {ints[0]}")
    n_levels, dim = ints[1], ints[2]
    if flat.size != n_levels * (dim + 1):
        raise ContractError(f"{path}: payload size mismatch")
    meta = json.loads(Path(str(path) + ".json").read_text())
    g = meta["grid"]
    grid = TimeGrid(flat[:n_levels].copy(), g["rho"], g["sigma_min"], g["sigma_max"])
    states = flat[n_levels:].reshape(n_levels, dim).copy()
    c = StateVector(np.asarray(meta["c"], float), tuple(meta["c_shape"]))
    cond = Conditioning(c, tuple((k, v) for k, v in meta["scalars"]))
    return Trajectory(grid, meta["solver"], cond, np.asarray(meta["xi"], float), states[-1].copy(), states)
