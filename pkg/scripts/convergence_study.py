"""Solver and adjoint convergence on the analytic field and a small trained model.

Writes three CSV tables under --out:
  endpoint.csv   endpoint error vs the closed form for Euler and Heun
  adjoint.csv    stored continuous adjoint vs the discrete adjoint
  fd_sweep.csv   central-difference error vs step size against the discrete adjoint
"""

import argparse
from pathlib import Path

import numpy as np

from flowgrad.adjoint import adjoint_solve, discrete_adjoint
from flowgrad.core import Conditioning, StateVector, edm_time_grid
from flowgrad.io import write_table_csv
from flowgrad.oracle import eps_sweep, fd_directional, gaussian_closed_form
from flowgrad.quantities import QuantitySpec
from flowgrad.sampler import sample
from flowgrad.training import SyntheticTask, TrainConfig, train
from flowgrad.velocity import AnalyticGaussianField, EDMField

STEPS = (16, 32, 64, 128, 256, 512)


def endpoint_table():
    field = AnalyticGaussianField([[1.0]], 1.0)
    cond = Conditioning(StateVector.from_array([0.7]))
    exact = gaussian_closed_form([[1.0]], 1.0, 80.0, [1.0], [0.7])[0][0]
    rows = []
    for n in STEPS:
        errs = [abs(sample(field, [1.0], cond, edm_time_grid(n), s).x_final[0] - exact) for s in ("euler", "heun")]
        rows.append((n, *errs))
    return rows


def adjoint_table(field, cond, xi, g):
    rows = []
    for n in STEPS:
        traj = sample(field, xi, cond, edm_time_grid(n), "heun", store=True)
        d = np.asarray(discrete_adjoint(field, traj, g).dq_dc)
        c = np.asarray(adjoint_solve(field, traj, g, "stored").dq_dc)
        rows.append((n, float(np.max(np.abs(c - d)) / np.max(np.abs(d)))))
    return rows


def orders(values):
    v = np.asarray(values)
    return np.log2(v[:-1] / v[1:])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/convergence")
    p.add_argument("--train-steps", type=int, default=3000)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ep = endpoint_table()
    write_table_csv(out / "endpoint.csv", ["n_steps", "euler_error", "heun_error"], ep)
    print("endpoint error vs closed form")
    for (n, e, h) in ep:
        print(f"  {n:5d}  euler {e:.3e}  heun {h:.3e}")
    print("  observed orders euler", np.round(orders([r[1] for r in ep]), 2), "heun", np.round(orders([r[2] for r in ep]), 2))

    task = SyntheticTask(data_dim=4, cond_dim=3, std=0.2, scalar_names=("tau",))
    field = EDMField(train(task, TrainConfig(steps=args.train_steps, hidden=(32, 32))).denoiser)
    cond = Conditioning(StateVector.from_array([0.1, -0.2, 0.3]), (("tau", 0.5),))
    rng = np.random.default_rng(0)
    xi, g = rng.standard_normal(4), rng.standard_normal(4)
    adj = adjoint_table(field, cond, xi, g)
    write_table_csv(out / "adjoint.csv", ["n_steps", "relative_gap"], adj)
    print("continuous vs discrete adjoint (trained toy model)")
    for n, gap in adj:
        print(f"  {n:5d}  {gap:.3e}")
    print("  observed orders", np.round(orders([r[1] for r in adj]), 2))

    grid = edm_time_grid(32)
    spec = QuantitySpec("component", index=0)
    traj = sample(field, xi, cond, grid, "heun", store=True)
    res = discrete_adjoint(field, traj, np.eye(4)[0])
    dc, ds = np.array([1.0, 0.5, -0.5]), np.array([0.5])
    ref = float(np.asarray(res.dq_dc) @ dc + res.scalar_grad("tau") * ds[0])
    sweep = eps_sweep(ref, lambda e: fd_directional(field, spec, cond, xi, (dc, ds), e, grid))
    write_table_csv(out / "fd_sweep.csv", ["eps", "fd", "relative_error"], zip(sweep.eps, sweep.values, sweep.errors))
    print(f"finite-difference sweep: best error {sweep.best_error:.2e} at eps {sweep.best_eps:.0e}, slope {sweep.slope:.2f}")


if __name__ == "__main__":
    main()
