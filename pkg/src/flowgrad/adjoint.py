"""Gradients of q(X_0) with respect to conditioning.

Two routes:

* :func:`adjoint_solve` integrates the augmented system

      d/dt [X, a, w, v] = [u, -a du/dX, -a du/dc, -a du/ds_k]

  from t = 0 (a = dq/dX_0, w = v = 0) up to t = T, so that w_T = dq/dc and
  v_T = dq/ds_k.  In ``stored`` mode X_t is read from a recorded trajectory;
  in ``recompute`` mode X is integrated forward alongside (a, w, v).
* :func:`discrete_adjoint` is exact reverse mode through the recorded solver
  steps and serves as the reference for everything else.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Hashable, Sequence

import numpy as np

from .core import (
    Conditioning,
    ConfigurationError,
    ContractError,
    DivergenceError,
    SensitivityResult,
    StateVector,
    TimeGrid,
    gaussian_noise,
    pmap,
    running_mean,
)
from . import quantities
from .sampler import Trajectory, check_solver, sample
from .velocity import VelocityField

MODES = ("stored", "recompute", "discrete")


def _scalar_index(cond: Conditioning, scalars: Sequence[str] | None) -> list[int]:
    names = cond.names
    if scalars is None:
        return list(range(len(names)))
    missing = [s for s in scalars if s not in names]
    if missing:
        raise ContractError(f"cannot track scalars {missing}; conditioning has {list(names)}")
    return [names.index(s) for s in scalars]


def _rhs(field: VelocityField, a, x, t, cond):
    gx, gc, gs = field.vjp(a, x, t, cond)
    return -gx, -gc, -gs


def _finish(field, traj, w, v, idx, mode, solver, metadata, dq_dxi=None):
    cond = traj.cond
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
        raise DivergenceError("non-finite gradient accumulator")
    meta = {
        "solver": solver,
        "mode": mode,
        "grid": traj.grid.describe(),
        "field": field.name,
        **(metadata or {}),
    }
    names = cond.names
    return SensitivityResult(
        dq_dc=cond.c.like(w),
        dq_dscalar=tuple((names[i], float(v[i])) for i in idx),
        metadata=meta,
        dq_dxi=None if dq_dxi is None else StateVector.from_array(dq_dxi),
    )


def adjoint_solve(
    field: VelocityField,
    traj: Trajectory,
    dq_dx0,
    mode: str = "stored",
    solver: str | None = None,
    scalars: Sequence[str] | None = None,
    metadata: dict[str, Any] | None = None,
) -> SensitivityResult:
    """Continuous adjoint on the reversed sampler grid.

    ``scalars`` selects which scalar conditioners get an accumulator (all by
    default); tracking more of them never changes ``dq_dc``.

    The segment touching t = 0 is always taken with the velocity Jacobian at
    the nonzero end, which mirrors the sampler's final Euler step and keeps
    EDM fields away from their 1/t singularity.
    """
    solver = check_solver(solver or traj.solver)
    cond = traj.cond
    a = np.array(dq_dx0, dtype=float).reshape(-1)
    if a.size != field.state_dim:
        raise ContractError(f"dq_dx0 has {a.size} entries, state has {field.state_dim}")
    idx = _scalar_index(cond, scalars)
    w = np.zeros(field.cond_dim)
    v = np.zeros(len(cond.scalars))
    lv = traj.grid.levels
    n = lv.size - 1

    if mode == "stored":
        if not traj.stored:
            raise ConfigurationError("stored mode needs a trajectory sampled with store=True")
        xs = traj.states
        for j in range(n, 0, -1):
            dt = lv[j - 1] - lv[j]
            if j == n:
                fx, fc, fs = _rhs(field, a, xs[j - 1], lv[j - 1], cond)
                a, w, v = a + dt * fx, w + dt * fc, v + dt * fs
            elif solver == "euler":
                fx, fc, fs = _rhs(field, a, xs[j], lv[j], cond)
                a, w, v = a + dt * fx, w + dt * fc, v + dt * fs
            else:
                fx1, fc1, fs1 = _rhs(field, a, xs[j], lv[j], cond)
                fx2, fc2, fs2 = _rhs(field, a + dt * fx1, xs[j - 1], lv[j - 1], cond)
                a = a + 0.5 * dt * (fx1 + fx2)
                w = w + 0.5 * dt * (fc1 + fc2)
                v = v + 0.5 * dt * (fs1 + fs2)
            if not np.all(np.isfinite(a)):
                raise DivergenceError(f"non-finite adjoint at level {j - 1}", step=j - 1)
    elif mode == "recompute":
        if field.singular_at_zero:
            raise ConfigurationError(f"recompute mode needs a field regular at t = 0; {field.name} is not")
        x = np.array(traj.x_final, dtype=float)
        for j in range(n, 0, -1):
            t0, t1 = lv[j], lv[j - 1]
            dt = t1 - t0
            u1 = field.eval(x, t0, cond)
            fx1, fc1, fs1 = _rhs(field, a, x, t0, cond)
            if solver == "euler":
                x, a, w, v = x + dt * u1, a + dt * fx1, w + dt * fc1, v + dt * fs1
            else:
                xe, ae = x + dt * u1, a + dt * fx1
                u2 = field.eval(xe, t1, cond)
                fx2, fc2, fs2 = _rhs(field, ae, xe, t1, cond)
                x = x + 0.5 * dt * (u1 + u2)
                a = a + 0.5 * dt * (fx1 + fx2)
                w = w + 0.5 * dt * (fc1 + fc2)
                v = v + 0.5 * dt * (fs1 + fs2)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(x))):
                raise DivergenceError(f"non-finite adjoint at level {j - 1}", step=j - 1)
    else:
        raise ConfigurationError(f"unknown adjoint mode {mode!r}; expected stored or recompute")
    return _finish(field, traj, w, v, idx, mode, solver, metadata)


def discrete_adjoint(
    field: VelocityField,
    traj: Trajectory,
    dq_dx0,
    scalars: Sequence[str] | None = None,
    metadata: dict[str, Any] | None = None,
) -> SensitivityResult:
    """Exact gradient of the recorded map (xi, c, scalars) -> q(X_0).

    Walks the solver steps in reverse and re-evaluates each Heun predictor so
    both stage evaluations are differentiated.  ``dq_dxi`` is filled in.
    """
    if not traj.stored:
        raise ContractError("discrete adjoint needs a trajectory sampled with store=True")
    cond = traj.cond
    a = np.array(dq_dx0, dtype=float).reshape(-1)
    if a.size != field.state_dim:
        raise ContractError(f"dq_dx0 has {a.size} entries, state has {field.state_dim}")
    idx = _scalar_index(cond, scalars)
    w = np.zeros(field.cond_dim)
    v = np.zeros(len(cond.scalars))
    lv, xs = traj.grid.levels, traj.states
    n = lv.size - 1
    for i in range(n - 1, -1, -1):
        t0, t1 = lv[i], lv[i + 1]
        h = t1 - t0
        x = xs[i]
        if traj.solver == "euler" or i == n - 1:
            gx, gc, gs = field.vjp(h * a, x, t0, cond)
            a, w, v = a + gx, w + gc, v + gs
        else:
            x_pred = x + h * field.eval(x, t0, cond)
            gx2, gc2, gs2 = field.vjp(0.5 * h * a, x_pred, t1, cond)
            gx1, gc1, gs1 = field.vjp(0.5 * h * a + h * gx2, x, t0, cond)
            a = a + gx2 + gx1
            w = w + gc2 + gc1
            v = v + gs2 + gs1
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite cotangent at step {i}", step=i)
    return _finish(field, traj, w, v, idx, "discrete", traj.solver, metadata, dq_dxi=lv[0] * a)


def sensitivity(
    field: VelocityField,
    cond: Conditioning,
    xi,
    q_spec: quantities.QuantitySpec,
    grid: TimeGrid,
    solver: str = "heun",
    mode: str = "stored",
    state_template: StateVector | None = None,
    scalars: Sequence[str] | None = None,
    metadata: dict[str, Any] | None = None,
) -> tuple[float, SensitivityResult]:
    """Sample, evaluate q, and return ``(q, gradients)`` for one conditioning."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    traj = sample(field, xi, cond, grid, solver, store=mode != "recompute")
    x0 = state_template.like(traj.x_final) if state_template is not None else StateVector.from_array(traj.x_final)
    q = quantities.evaluate(q_spec, x0)
    g = np.asarray(quantities.gradient(q_spec, x0))
    if mode == "discrete":
        res = discrete_adjoint(field, traj, g, scalars=scalars, metadata=metadata)
    else:
        res = adjoint_solve(field, traj, g, mode=mode, solver=solver, scalars=scalars, metadata=metadata)
    return q, res


# --------------------------------------------------------------------------
# batches


@dataclass
class BatchResult:
    mean: SensitivityResult | None
    per_sample: list[SensitivityResult | None]
    q_values: list[float | None]
    failures: list[tuple[int, str]] = field(default_factory=list)
    groups: dict[Hashable, SensitivityResult] = field(default_factory=dict)
    group_counts: dict[Hashable, int] = field(default_factory=dict)


def sample_noise(state_dim: int, seed: int, k: int, policy: str) -> np.ndarray:
    if policy == "fixed":
        return np.asarray(gaussian_noise(state_dim, seed))
    if policy == "fresh":
        return np.asarray(gaussian_noise(state_dim, (seed, k)))
    raise ConfigurationError(f"unknown seed policy {policy!r}; expected fixed or fresh")


def _batch_item(args, field, q_spec, seed, policy, grid, solver, mode, template):
    k, cond = args
    xi = sample_noise(field.state_dim, seed, k, policy)
    try:
        q, res = sensitivity(field, cond, xi, q_spec, grid, solver, mode, template, metadata={"seed": seed, "sample": k})
    except DivergenceError as exc:
        return None, None, f"{exc} (sample {k})"
    return q, res, None


def _mean_result(results: list[SensitivityResult], metadata: dict) -> SensitivityResult:
    first = results[0]
    w = running_mean(np.asarray(r.dq_dc) for r in results)
    names = first.scalar_names
    v = running_mean(np.array([g for _, g in r.dq_dscalar]) for r in results) if names else np.zeros(0)
    return SensitivityResult(
        dq_dc=first.dq_dc.like(w),
        dq_dscalar=tuple((n, float(x)) for n, x in zip(names, v)),
        metadata={**first.metadata, **metadata},
    )


def batch_sensitivity(
    field: VelocityField,
    conds: Sequence[Conditioning],
    q_spec: quantities.QuantitySpec,
    grid: TimeGrid,
    seed: int = 0,
    seed_policy: str = "fresh",
    solver: str = "heun",
    mode: str = "stored",
    group_keys: Sequence[Hashable] | None = None,
    parallel: int = 1,
    state_template: StateVector | None = None,
) -> BatchResult:
    """Gradient for every conditioning and their order-fixed mean.

    Diverging samples are reported in ``failures`` and left out of every mean.
    """
    if not conds:
        raise ContractError("batch_sensitivity needs at least one conditioning")
    if group_keys is not None and len(group_keys) != len(conds):
        raise ContractError("need one group key per conditioning")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    sample_noise(field.state_dim, seed, 0, seed_policy)
    fn = partial(
        _batch_item,
        field=field, q_spec=q_spec, seed=seed, policy=seed_policy,
        grid=grid, solver=solver, mode=mode, template=state_template,
    )
    outs = pmap(fn, list(enumerate(conds)), parallel)
    per = [r for _, r, _ in outs]
    qs = [q for q, _, _ in outs]
    failures = [(k, err) for k, (_, _, err) in enumerate(outs) if err is not None]
    ok = [r for r in per if r is not None]
    meta = {"samples": len(conds), "failed": len(failures), "seed_policy": seed_policy}
    out = BatchResult(_mean_result(ok, meta) if ok else None, per, qs, failures)
    if group_keys is not None:
        for key in dict.fromkeys(group_keys):
            members = [r for r, g in zip(per, group_keys) if g == key and r is not None]
            if members:
                out.groups[key] = _mean_result(members, {"group": key, "samples": len(members)})
                out.group_counts[key] = len(members)
    return out


# --------------------------------------------------------------------------
# serialisation


def save_result(prefix, result: SensitivityResult) -> tuple[Path, Path]:
    """``prefix.csv`` holds the dq/dc map; ``prefix.json`` the metadata and scalar gradients."""
    from .io import write_json, write_map_csv

    prefix = Path(prefix)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    write_map_csv(csv_path, result.dq_dc.grid_view())
    write_json(
        json_path,
        {
            "c_shape": list(result.dq_dc.shape),
            "dq_dscalar": [[k, v] for k, v in result.dq_dscalar],
            "metadata": result.metadata,
        },
    )
    return csv_path, json_path


def load_result(prefix) -> SensitivityResult:
    from .io import read_map_csv

    prefix = Path(prefix)
    grid = read_map_csv(prefix.with_suffix(".csv"))
    meta = json.loads(prefix.with_suffix(".json").read_text())
    dq_dc = StateVector(grid.reshape(-1), tuple(meta["c_shape"]))
    return SensitivityResult(dq_dc, tuple((k, float(v)) for k, v in meta["dq_dscalar"]), meta["metadata"])
