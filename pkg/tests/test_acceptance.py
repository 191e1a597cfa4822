"""Acceptance criteria, one test each.

Run ``pytest tests/test_acceptance.py`` (or execute this file directly); the
terminal summary lists one PASS/FAIL line per criterion with the measured
numbers attached via ``record_property``.
"""

import json
import time

import numpy as np
import pytest

from flowgrad.adjoint import adjoint_solve, discrete_adjoint
from flowgrad.cli import main
from flowgrad.conditioning import ConditioningSeries, cadence_taus, interp, save_series, series_deltas, telescoped_sum
from flowgrad.consistency import amplitude_sweep
from flowgrad.core import Conditioning, StateVector, edm_time_grid
from flowgrad.oracle import fd_directional
from flowgrad.quantities import QuantitySpec
from flowgrad.sampler import sample
from flowgrad.velocity import AnalyticGaussianField, LinearField, save_denoiser

T = 80.0
SHRINK = 1.0 / np.sqrt(1.0 + T * T)


def cond_of(c, **s):
    return Conditioning(StateVector.from_array(c), tuple(s.items()))


def outputs(res):
    return np.concatenate([np.asarray(res.dq_dc), [v for _, v in res.dq_dscalar]])


def test_criterion_1_closed_form_oracle(record_property):
    """stored Heun adjoint vs closed form on the analytic field"""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    field = AnalyticGaussianField(rng.standard_normal((4, 3)), 1.0)
    errors = {}
    for n, tol in ((128, 1e-3), (512, 1e-5)):
        worst = 0.0
        for _ in range(20):
            g = rng.standard_normal(4)
            cond = cond_of(rng.standard_normal(3))
            traj = sample(field, rng.standard_normal(4), cond, edm_time_grid(n), "heun", store=True)
            got = np.asarray(adjoint_solve(field, traj, g, "stored").dq_dc)
            exact = g @ field.M * (1 - SHRINK)
            worst = max(worst, np.max(np.abs(got - exact)) / np.max(np.abs(exact)))
        errors[n] = worst
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {errors[128]:.2e} @128, {errors[512]:.2e} @512; {elapsed:.1f}s")
    assert errors[128] < 1e-3 and errors[512] < 1e-5
    assert elapsed < 10.0


def test_criterion_2_discrete_adjoint_vs_fd(toy_field, record_property):
    """discrete adjoint vs central differences, 50 directions, eps-sweep optimum"""
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    grid = edm_time_grid(32)
    spec = QuantitySpec("patch_mean", mask=(0, 2))
    eps_values = 10.0 ** -np.arange(2.0, 8.5, 0.5)
    cond = cond_of([0.2, -0.1, 0.4], tau=0.6, zeta=0.5)
    xi = rng.standard_normal(4)
    traj = sample(toy_field, xi, cond, grid, "heun", store=True)
    res = discrete_adjoint(toy_field, traj, [0.5, 0.0, 0.5, 0.0])
    w, v = np.asarray(res.dq_dc), np.array([x for _, x in res.dq_dscalar])
    worst = 0.0
    for _ in range(50):
        dc, ds = rng.standard_normal(3), rng.standard_normal(2)
        norm = np.sqrt(dc @ dc + ds @ ds)
        dc, ds = dc / norm, ds / norm
        adj = w @ dc + v @ ds
        best = min(abs(fd_directional(toy_field, spec, cond, xi, (dc, ds), e, grid) - adj) for e in eps_values)
        worst = max(worst, best / abs(adj))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {worst:.2e} over 50 directions; {elapsed:.1f}s")
    assert worst < 1e-6
    assert elapsed < 60.0


def test_criterion_3_continuous_converges_to_discrete(toy_field, record_property):
    """stored continuous adjoint -> discrete adjoint, order >= 1.8"""
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cond = cond_of([0.1, -0.2, 0.3], tau=0.3, zeta=0.4)
    xi = rng.standard_normal(4)
    g = rng.standard_normal(4)
    gaps = []
    for n in (32, 64, 128, 256):
        traj = sample(toy_field, xi, cond, edm_time_grid(n), "heun", store=True)
        d = outputs(discrete_adjoint(toy_field, traj, g))
        c = outputs(adjoint_solve(toy_field, traj, g, "stored"))
        gaps.append(np.max(np.abs(c - d)) / np.max(np.abs(d)))
    orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
    elapsed = time.perf_counter() - t0
    record_property("detail", "gaps " + ", ".join(f"{x:.2e}" for x in gaps) + "; orders " + ", ".join(f"{o:.2f}" for o in orders) + f"; {elapsed:.1f}s")
    assert np.all(orders >= 1.8)
    assert elapsed < 60.0


def test_criterion_4_self_consistency(toy_field, record_property):
    """fixed-noise walk: relative RMSE < 0.05 and quartering under halving"""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    c, s = np.array([0.1, -0.2, 0.3]), np.array([0.3, 0.4])
    conds = []
    for _ in range(24):
        conds.append(cond_of(c.copy(), tau=s[0], zeta=s[1]))
        c = c + 0.04 * rng.standard_normal(3)
        s = s + 0.04 * np.abs(rng.standard_normal(2))
    xi = np.random.default_rng(0).standard_normal(4)
    spec = QuantitySpec("weighted_global_mean")
    sweep = amplitude_sweep(toy_field, spec, conds, xi, edm_time_grid(32), gradient_mode="discrete")
    r = [res.rmse for res in sweep]
    ratios = [r[0] / r[1], r[1] / r[2]]
    elapsed = time.perf_counter() - t0
    record_property("detail", f"relative RMSE {sweep[0].relative_rmse:.4f}; halving ratios {ratios[0]:.2f}, {ratios[1]:.2f}; {elapsed:.1f}s")
    assert sweep[0].relative_rmse < 0.05
    assert min(ratios) >= 4.0
    assert elapsed < 120.0


@pytest.mark.parametrize("n_steps", [128, 256])
def test_criterion_5_scalar_accumulators(toy_field, analytic, analytic_cond, record_property, n_steps):
    """extra scalar accumulators leave w_T bit-identical; joint linearization matches FD"""
    rng = np.random.default_rng(n_steps)
    grid = edm_time_grid(n_steps)
    spec = QuantitySpec("component", index=1)
    g = np.eye(4)[1]
    details = []
    for field, cond in [(toy_field, cond_of([0.1, -0.2, 0.3], tau=0.5, zeta=0.6)), (analytic, analytic_cond)]:
        xi = rng.standard_normal(4)
        traj = sample(field, xi, cond, grid, "heun", store=True)
        bare = adjoint_solve(field, traj, g, "stored", scalars=())
        full = adjoint_solve(field, traj, g, "stored")
        assert np.array_equal(np.asarray(bare.dq_dc), np.asarray(full.dq_dc))
        dc, ds = rng.standard_normal(3), rng.standard_normal(len(cond.scalars))
        lin = np.asarray(full.dq_dc) @ dc + np.array([v for _, v in full.dq_dscalar]) @ ds
        fd = fd_directional(field, spec, cond, xi, (dc, ds), 1e-5, grid)
        rel = abs(lin - fd) / abs(fd)
        details.append(f"{field.name} {rel:.1e}")
        assert rel < 1e-4
    record_property("detail", f"{n_steps} steps: w_T bit-identical; joint rel err " + ", ".join(details))


def test_criterion_6_interpolation(record_property):
    """node exactness, midpoints, telescoping, 169 h cadence"""
    rng = np.random.default_rng(5)
    taus = 16.0 + 30.4 * np.arange(12)
    vals = 285.0 + 15.0 * rng.random((12, 10))
    series = ConditioningSeries(taus, vals, (10,))
    assert all(np.array_equal(np.asarray(interp(series, t)), row) for t, row in zip(taus, vals))
    worst_mid = 0.0
    for i in range(11):
        mid = np.asarray(interp(series, 0.5 * (taus[i] + taus[i + 1])))
        avg = 0.5 * (vals[i] + vals[i + 1])
        worst_mid = max(worst_mid, np.max(np.abs(mid - avg) / np.abs(avg)))
    assert worst_mid <= 1e-15
    walk = cadence_taus(taus[0], taus[-1], 169.0)
    deltas = series_deltas(series, walk)
    total = telescoped_sum(deltas)
    assert np.array_equal(total, np.asarray(interp(series, walk[-1])) - np.asarray(interp(series, walk[0])))
    assert all(dt == pytest.approx(169.0 / 24.0, rel=1e-14) for _, dt in deltas)
    record_property("detail", f"nodes bit-exact; midpoint rel err {worst_mid:.1e}; telescoping exact over {len(deltas)} steps")


def test_criterion_7_zero_and_linearity_laws(toy_field, record_property):
    """conditioning-free field gives zero; seed linearity exact / <= 1e-12"""
    free = LinearField(-0.3 * np.eye(4), np.zeros((4, 3)))
    free_traj = sample(free, np.ones(4), cond_of([1.0, 2.0, 3.0]), edm_time_grid(32), "heun", store=True)
    for res in (discrete_adjoint(free, free_traj, np.ones(4)),
                adjoint_solve(free, free_traj, np.ones(4), "stored"),
                adjoint_solve(free, free_traj, np.ones(4), "recompute")):
        assert np.array_equal(np.asarray(res.dq_dc), np.zeros(3))

    rng = np.random.default_rng(11)
    traj = sample(toy_field, rng.standard_normal(4), cond_of([0.1, -0.2, 0.3], tau=0.3, zeta=0.4),
                  edm_time_grid(32), "heun", store=True)
    g1, g2 = rng.standard_normal(4), rng.standard_normal(4)
    # discrete: exact under scaling by a power of two and for superposition of disjoint seeds
    base = outputs(discrete_adjoint(toy_field, traj, g1))
    assert np.array_equal(outputs(discrete_adjoint(toy_field, traj, 8.0 * g1)), 8.0 * base)
    worst = {}
    for name, fn in (("discrete", discrete_adjoint), ("stored", adjoint_solve)):
        drift = 0.0
        for alpha, beta in ((1.5, -0.7), (-2.0, 3.25), (0.1, 0.9)):
            lhs = outputs(fn(toy_field, traj, alpha * g1 + beta * g2))
            rhs = alpha * outputs(fn(toy_field, traj, g1)) + beta * outputs(fn(toy_field, traj, g2))
            drift = max(drift, np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
        worst[name] = drift
    record_property("detail", f"zero law exact; linearity drift discrete {worst['discrete']:.1e}, continuous {worst['stored']:.1e}")
    assert worst["discrete"] <= 1e-12 and worst["stored"] <= 1e-12


def test_criterion_8_cli_determinism(tmp_path, toy_denoiser, record_property):
    """every subcommand reruns byte-identically, independent of --parallel"""
    save_denoiser(tmp_path / "model.fgv1", toy_denoiser)
    save_series(tmp_path / "sst.csv", ConditioningSeries([16.0, 46.0, 76.0], [[0.1, -0.2, 0.3], [0.12, -0.18, 0.27], [0.13, -0.2, 0.31]], (3,)))
    model = {"kind": "checkpoint", "path": "model.fgv1"}
    q = {"kind": "weighted_global_mean"}
    cond = {"c": [0.1, 0.2, 0.3], "scalars": {"tau": 0.3, "zeta": 0.4}}
    cfgs = {
        "train": {"task": {"data_dim": 2, "cond_dim": 2, "size": 2000}, "train": {"steps": 50, "hidden": [16]}},
        "sample": {"field": model, "conditioning": cond, "store": True},
        "grad": {"field": model, "conditioning": cond, "quantity": q},
        "check": {"field": model, "quantity": q, "series": {"csv": "sst.csv", "fixed_scalars": {"tau": 0.3, "zeta": 0.4}}},
        "map": {"field": model, "quantity": q, "grouping": "key",
                "conditionings": [{**cond, "c": [0.05 * k, 0.2, 0.3], "group": k % 3} for k in range(6)]},
        "verify": {"field": model, "quantity": q, "directions": 2},
    }
    checked = 0
    for cmd, cfg in cfgs.items():
        path = tmp_path / f"{cmd}.json"
        path.write_text(json.dumps(cfg))
        runs = []
        for tag, par in (("a", "1"), ("b", "1"), ("c", "3")):
            out = tmp_path / cmd / tag
            assert main([cmd, "--config", str(path), "--out", str(out), "--seed", "5", "--parallel", par]) == 0
            runs.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
        assert runs[0] and runs[0] == runs[1] == runs[2], cmd
        checked += len(runs[0])
    record_property("detail", f"6 subcommands x 3 runs, {checked} files byte-identical")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
