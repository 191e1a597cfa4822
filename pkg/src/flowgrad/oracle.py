"""Independent ground truth: central differences through the sampler and the
closed-form endpoint map of the linear-Gaussian field.

Nothing in the library imports this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Conditioning, ConfigurationError, StateVector, TimeGrid
from .quantities import QuantitySpec, evaluate
from .sampler import sample
from .velocity import VelocityField

DEFAULT_EPS = 1e-5


def _q(field, q_spec, cond, xi, grid, solver, template):
    x0 = sample(field, xi, cond, grid, solver).x_final
    return evaluate(q_spec, template.like(x0) if template is not None else StateVector.from_array(x0))


def fd_directional(
    field: VelocityField,
    q_spec: QuantitySpec,
    cond: Conditioning,
    xi,
    direction: tuple,
    eps: float = DEFAULT_EPS,
    grid: TimeGrid | None = None,
    solver: str = "heun",
    state_template: StateVector | None = None,
) -> float:
    """``(q(cond + eps d) - q(cond - eps d)) / (2 eps)`` with ``xi`` held fixed.

    ``direction`` is ``(delta_c, delta_scalars)`` with scalar deltas in the
    conditioning's own order.
    """
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    if grid is None:
        raise ConfigurationError("fd_directional needs a time grid")
    dc, ds = direction
    ds = np.zeros(len(cond.scalars)) if ds is None else ds
    plus = _q(field, q_spec, cond.perturbed(dc, ds, eps), xi, grid, solver, state_template)
    minus = _q(field, q_spec, cond.perturbed(dc, ds, -eps), xi, grid, solver, state_template)
    return (plus - minus) / (2.0 * eps)


@dataclass(frozen=True)
class SweepResult:
    eps: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    best_eps: float
    best_error: float
    slope: float | None


def loglog_slope(eps: np.ndarray, errors: np.ndarray) -> float | None:
    """Least-squares slope over the leading run where the error keeps falling.

    That run is the truncation regime; once round-off takes over the error
    stops decreasing and later points are excluded.
    """
    order = np.argsort(eps)[::-1]
    e, err = np.asarray(eps)[order], np.asarray(errors)[order]
    k = 1
    while k < len(err) and err[k] < err[k - 1] and err[k] > 0:
        k += 1
    if k < 3 or err[0] <= 0:
        return None
    return float(np.polyfit(np.log(e[:k]), np.log(err[:k]), 1)[0])


def eps_sweep(
    reference: float,
    fd: callable,
    eps_values: Sequence[float] = tuple(10.0 ** -np.arange(1.0, 8.5, 0.5)),
) -> SweepResult:
    """Evaluate ``fd(eps)`` over a range of steps and compare with ``reference``."""
    eps = np.asarray(eps_values, dtype=float)
    vals = np.array([fd(e) for e in eps])
    scale = max(abs(reference), np.max(np.abs(vals)), np.finfo(float).tiny)
    errs = np.abs(vals - reference) / scale
    i = int(np.argmin(errs))
    return SweepResult(eps, vals, errs, float(eps[i]), float(errs[i]), loglog_slope(eps, errs))


def gaussian_closed_form(M, s: float, T: float, xi, c, B=None, scalars=None):
    """Exact X_0 and dX_0/dc for data ~ N(M c + B s, s^2 I) started at X_T = T xi.

    Along the probability-flow ODE the offset from the mean scales with
    sqrt(s^2 + t^2), so it shrinks by s / sqrt(s^2 + T^2) between T and 0.
    """
    if not (s > 0 and T > 0):
        raise ConfigurationError("need s > 0 and T > 0")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    mean = M @ np.asarray(c, dtype=float).reshape(-1)
    if B is not None:
        mean = mean + np.asarray(B, float).reshape(M.shape[0], -1) @ np.asarray(scalars, float).reshape(-1)
    shrink = s / np.sqrt(s * s + T * T)
    x0 = mean + (T * np.asarray(xi, dtype=float).reshape(-1) - mean) * shrink
    return x0, (1.0 - shrink) * M


# --------------------------------------------------------------------------
# verification report (backend of ``flowgrad verify``)

TOLERANCES = {
    "vjp_dot_product": 1e-7,
    "discrete_vs_fd": 1e-6,
    "continuous_vs_discrete": 1e-3,
    "recompute_vs_discrete": 1e-3,
}
FD_ORDER_RANGE = (1.5, 2.5)


def _case(name, value, tol=None, passed=None, **extra):
    tol = TOLERANCES.get(name) if tol is None else tol
    value = float(value) if np.isfinite(value) else float("inf")
    ok = bool(value <= tol) if passed is None else bool(passed)
    return {"name": name, "value": value, "tolerance": tol, "passed": ok, **extra}


def dot_product_error(field, cond, t, rng, eps_values=(1e-3, 1e-4, 1e-5, 1e-6)) -> float:
    """Relative mismatch between <a, J d> (central differences) and the VJP route."""
    n, nc, ns = field.state_dim, field.cond_dim, len(cond.scalars)
    x = rng.standard_normal(n) * np.sqrt(0.25 + t * t)
    a, dx = rng.standard_normal(n), rng.standard_normal(n)
    dc, ds = rng.standard_normal(nc), rng.standard_normal(ns)
    gx, gc, gs = field.vjp(a, x, t, cond)
    terms = np.array([gx @ dx, gc @ dc, gs @ ds])
    adj = terms.sum()
    scale = np.abs(terms).sum()
    best = np.inf
    for eps in eps_values:
        up = field.eval(x + eps * dx, t, cond.perturbed(dc, ds, eps))
        dn = field.eval(x - eps * dx, t, cond.perturbed(dc, ds, -eps))
        fwd = a @ (up - dn) / (2 * eps)
        best = min(best, abs(fwd - adj) / max(scale, np.finfo(float).tiny))
    return best if np.isfinite(best) else np.inf


def verify_field(field, cond, q_spec, grid, solver="heun", seed=0, template=None, n_dirs=5, sweep=False) -> dict:
    from .adjoint import adjoint_solve, discrete_adjoint
    from .quantities import gradient

    rng = np.random.default_rng([seed, 11])
    cases = []
    den = getattr(field, "denoiser", None)
    if den is not None and hasattr(den, "net"):
        bad = sum(int(np.count_nonzero(~np.isfinite(p))) for p in den.net.parameters())
        cases.append(_case("parameters_finite", bad, tol=0))

    try:
        times = [grid.T, 1.0, 0.1, grid.sigma_min]
        errs = [dot_product_error(field, cond, t, rng) for t in times]
        cases.append(_case("vjp_dot_product", max(errs), times=times, errors=errs))
    except (ArithmeticError, ValueError) as exc:
        cases.append(_case("vjp_dot_product", np.inf, error=str(exc)))

    xi = rng.standard_normal(field.state_dim)
    try:
        traj = sample(field, xi, cond, grid, solver, store=True)
        x0 = template.like(traj.x_final) if template is not None else StateVector.from_array(traj.x_final)
        g = np.asarray(gradient(q_spec, x0))
        ref = discrete_adjoint(field, traj, g)
    except (ArithmeticError, ValueError) as exc:
        cases.append(_case("discrete_vs_fd", np.inf, error=str(exc)))
        return {"cases": cases, "passed": False}

    w, v = np.asarray(ref.dq_dc), np.array([val for _, val in ref.dq_dscalar])
    fd_errs, sweeps = [], []
    for k in range(n_dirs):
        dc, ds = rng.standard_normal(field.cond_dim), rng.standard_normal(len(cond.scalars))
        # unit directions keep the widest sweep step inside the scalar domain (tau >= 0)
        norm = np.sqrt(dc @ dc + ds @ ds)
        dc, ds = dc / norm, ds / norm
        directional = float(w @ dc + v @ ds)
        fd = lambda e: fd_directional(field, q_spec, cond, xi, (dc, ds), e, grid, solver, template)
        eps_values = tuple(10.0 ** -np.arange(1.0, 8.5, 0.5)) if sweep and k == 0 else (1e-3, 1e-4, 1e-5, 1e-6)
        res = eps_sweep(directional, fd, eps_values)
        fd_errs.append(res.best_error)
        if sweep and k == 0:
            sweeps.append(res)
    cases.append(_case("discrete_vs_fd", max(fd_errs), errors=fd_errs))

    scale = max(np.max(np.abs(w)), np.finfo(float).tiny)
    cont = adjoint_solve(field, traj, g, mode="stored")
    cases.append(_case("continuous_vs_discrete", np.max(np.abs(np.asarray(cont.dq_dc) - w)) / scale))
    if not field.singular_at_zero:
        rec = adjoint_solve(field, traj, g, mode="recompute")
        cases.append(_case("recompute_vs_discrete", np.max(np.abs(np.asarray(rec.dq_dc) - w)) / scale))

    if sweeps:
        s = sweeps[0]
        lo, hi = FD_ORDER_RANGE
        if s.slope is None:
            # no truncation regime: the map is linear in the direction, FD is exact up to round-off
            cases.append(_case("fd_order", s.best_error, tol=1e-8, eps=s.eps, errors=s.errors, slope=None))
        else:
            cases.append(_case("fd_order", s.slope, tol=hi, passed=lo <= s.slope <= hi, eps=s.eps, errors=s.errors, slope=s.slope))
    return {"cases": cases, "passed": all(c["passed"] for c in cases)}
