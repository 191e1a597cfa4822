"""Fixed-noise gradient self-consistency checks.

For a conditioning series c_0, c_1, ... sampled with one noise draw, compare
the model's own differences dq_k = q_{k+1} - q_k with the first-order
prediction from gradients at c_k, and summarise the residuals by RMSE.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .adjoint import sensitivity
from .core import Conditioning, ContractError, SensitivityResult, StateVector, TimeGrid, pmap
from .quantities import QuantitySpec, evaluate
from .sampler import sample
from .velocity import VelocityField


@dataclass(frozen=True)
class CheckRecord:
    k: int
    q: float
    delta_q: float
    linearized: float
    delta_c: np.ndarray
    delta_scalars: tuple[tuple[str, float], ...] = ()

    @property
    def residual(self) -> float:
        return self.delta_q - self.linearized


@dataclass(frozen=True)
class CheckResult:
    records: list[CheckRecord]
    rmse: float
    relative_rmse: float
    q_values: list[float]

    def summary(self) -> dict:
        return {
            "records": len(self.records),
            "rmse": self.rmse,
            "relative_rmse": self.relative_rmse,
            "std_delta_q": float(np.std([r.delta_q for r in self.records])),
        }


def linearized_delta(result: SensitivityResult, delta_c, delta_scalars: Sequence[tuple[str, float]] = ()) -> float:
    """<dq/dc, dc> + sum_k dq/ds_k * ds_k."""
    dc = np.asarray(delta_c, dtype=float).reshape(-1)
    if dc.size != result.dq_dc.size:
        raise ContractError(f"delta_c has {dc.size} entries, gradient has {result.dq_dc.size}")
    total = float(np.dot(np.asarray(result.dq_dc), dc))
    grads = dict(result.dq_dscalar)
    for name, d in delta_scalars:
        if name not in grads:
            raise ContractError(f"no gradient for scalar {name!r}")
        total += grads[name] * float(d)
    return total


def rmse(records: Sequence[CheckRecord]) -> float:
    if not records:
        raise ContractError("rmse of an empty record list")
    r = np.array([rec.residual for rec in records])
    return float(np.sqrt(np.mean(r * r)))


def relative_rmse(records: Sequence[CheckRecord]) -> float:
    """RMSE divided by the (population) std of dq; 0/0 counts as 0."""
    err = rmse(records)
    spread = float(np.std([rec.delta_q for rec in records]))
    if spread == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return err / spread


def total_derivative(result: SensitivityResult, dtau_dc) -> StateVector:
    """dq/dc + dq/dtau * dtau/dc."""
    v = result.scalar_grad("tau")
    d = np.asarray(dtau_dc, dtype=float).reshape(-1)
    if d.size != result.dq_dc.size:
        raise ContractError("dtau_dc must have the shape of c")
    return result.dq_dc.like(np.asarray(result.dq_dc) + v * d)


def _check_item(k, field, q_spec, conds, xi, grid, solver, mode, template):
    cond = conds[k]
    if k == len(conds) - 1:
        traj = sample(field, xi, cond, grid, solver)
        x0 = template.like(traj.x_final) if template is not None else StateVector.from_array(traj.x_final)
        return evaluate(q_spec, x0), None
    return sensitivity(field, cond, xi, q_spec, grid, solver, mode, template)


def run_check(
    field: VelocityField,
    q_spec: QuantitySpec,
    conds: Sequence[Conditioning],
    xi,
    grid: TimeGrid,
    solver: str = "heun",
    gradient_mode: str = "discrete",
    parallel: int = 1,
    state_template: StateVector | None = None,
) -> CheckResult:
    """Forward-difference self-consistency over a conditioning series with fixed ``xi``."""
    if len(conds) < 2:
        raise ContractError("a consistency check needs at least two conditionings")
    xi = np.asarray(xi, dtype=float)
    fn = partial(
        _check_item, field=field, q_spec=q_spec, conds=list(conds), xi=xi,
        grid=grid, solver=solver, mode=gradient_mode, template=state_template,
    )
    outs = pmap(fn, list(range(len(conds))), parallel)
    qs = [q for q, _ in outs]
    records = []
    for k in range(len(conds) - 1):
        c0, c1 = conds[k], conds[k + 1]
        if c0.names != c1.names:
            raise ContractError(f"conditionings {k} and {k + 1} carry different scalars")
        dc = np.asarray(c1.c) - np.asarray(c0.c)
        ds = tuple((n, v1 - v0) for (n, v0), (_, v1) in zip(c0.scalars, c1.scalars))
        res = outs[k][1]
        tracked = set(res.scalar_names)
        lin = linearized_delta(res, dc, [(n, d) for n, d in ds if n in tracked])
        records.append(CheckRecord(k, qs[k], qs[k + 1] - qs[k], lin, dc, ds))
    return CheckResult(records, rmse(records), relative_rmse(records), qs)


def scale_walk(conds: Sequence[Conditioning], factor: float) -> list[Conditioning]:
    """Shrink every deviation from the first conditioning by ``factor``."""
    base = conds[0]
    c0, s0 = np.asarray(base.c), base.values
    out = []
    for cond in conds:
        c = c0 + factor * (np.asarray(cond.c) - c0)
        s = s0 + factor * (cond.values - s0)
        out.append(base.replace(c=c, scalars=dict(zip(base.names, s))))
    return out


def amplitude_sweep(
    field: VelocityField,
    q_spec: QuantitySpec,
    conds: Sequence[Conditioning],
    xi,
    grid: TimeGrid,
    factors: Sequence[float] = (1.0, 0.5, 0.25),
    **kw,
) -> list[CheckResult]:
    return [run_check(field, q_spec, scale_walk(conds, f), xi, grid, **kw) for f in factors]
