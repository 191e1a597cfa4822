"""``flowgrad`` command line: train, sample, grad, check, map, verify.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adjoint, conditioning, consistency, io, oracle, quantities
from .core import (
    Conditioning,
    ConfigurationError,
    DivergenceError,
    FlowgradError,
    GridMeta,
    StateVector,
    edm_time_grid,
    gaussian_noise,
)
from .sampler import sample, save_trajectory
from .velocity import AnalyticGaussianField, EDMField, load_denoiser, save_denoiser

log = logging.getLogger("flowgrad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


# --------------------------------------------------------------------------
# config helpers


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return cfg, path.parent


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigurationError(f"config is missing {key!r}")
    return cfg[key]


def build_field(spec: dict, base: Path, require_finite: bool = True):
    kind = spec.get("kind")
    if kind == "analytic":
        if "M" in spec:
            M = np.asarray(spec["M"], float)
        else:
            r = spec.get("random", {})
            rng = np.random.default_rng(int(r.get("seed", 0)))
            M = rng.standard_normal((int(r["rows"]), int(r["cols"])))
        names = tuple(spec.get("scalar_names", ()))
        B = np.asarray(spec["B"], float) if "B" in spec else None
        return AnalyticGaussianField(M, float(spec.get("std", 1.0)), B, names)
    if kind == "checkpoint":
        return EDMField(load_denoiser(_resolve(base, _require(spec, "path")), require_finite=require_finite))
    raise ConfigurationError(f"unknown field kind {kind!r}; expected analytic or checkpoint")


def build_grid(cfg: dict, args):
    g = dict(cfg.get("grid", {}))
    if args.steps is not None:
        g["n_steps"] = args.steps
    return edm_time_grid(
        int(g.get("n_steps", 32)),
        float(g.get("sigma_min", 0.002)),
        float(g.get("sigma_max", 80.0)),
        float(g.get("rho", 7.0)),
    )


def _grid_meta(shape, lats):
    if lats is None:
        return None
    if len(shape) != 2:
        raise ConfigurationError("latitudes need a 2-D (n_lat, n_lon) shape")
    return GridMeta(int(shape[0]), int(shape[1]), tuple(float(v) for v in lats))


def _scalars(obj) -> tuple[tuple[str, float], ...]:
    if obj is None:
        return ()
    if isinstance(obj, dict):
        return tuple((k, float(v)) for k, v in obj.items())
    return tuple((str(k), float(v)) for k, v in obj)


def build_conditioning(spec: dict, field) -> Conditioning:
    c = np.asarray(_require(spec, "c"), float)
    shape = tuple(spec.get("shape", c.shape if c.ndim > 1 else (c.size,)))
    sv = StateVector(c.reshape(-1), shape, _grid_meta(shape, spec.get("lats")))
    return Conditioning(sv, _scalars(spec.get("scalars")))


def state_template(cfg: dict, field) -> StateVector:
    st = cfg.get("state", {})
    shape = tuple(st.get("shape", (field.state_dim,)))
    return StateVector(np.zeros(field.state_dim), shape, _grid_meta(shape, st.get("lats")))


def build_quantity(cfg: dict) -> quantities.QuantitySpec:
    return quantities.QuantitySpec.from_json(cfg.get("quantity", {"kind": "weighted_global_mean"}))


def _common(cfg, args):
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    solver = args.solver or cfg.get("solver", "heun")
    mode = args.mode or cfg.get("mode", "stored")
    parallel = args.parallel if args.parallel is not None else int(cfg.get("parallel", 1))
    return seed, solver, mode, max(1, parallel)


def _out_dir(cfg, args, base) -> Path:
    out = Path(args.out) if args.out else _resolve(base, cfg.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg, args, **resolved) -> dict:
    return {"config": cfg, "resolved": resolved}


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .training import (
        SyntheticTask, TrainConfig, edm_loss, evaluation_draws, generate_dataset, identity_loss, train,
    )

    cfg, base = load_config(args.config)
    try:
        task = SyntheticTask(**cfg.get("task", {}))
        tc = dict(cfg.get("train", {}))
        if args.seed is not None:
            tc["seed"] = args.seed
        if args.steps is not None:
            tc["steps"] = args.steps
        tcfg = TrainConfig(**tc)
    except TypeError as exc:
        raise ConfigurationError(f"bad training config: {exc}") from exc
    out = _out_dir(cfg, args, base)
    data = generate_dataset(task)
    res = train(task, tcfg, data)
    save_denoiser(out / "model.fgv1", res.denoiser)
    io.write_table_csv(out / "loss.csv", ["step", "loss"], [(i, l) for i, l in enumerate(res.losses)])
    x0, c, s, sig, noise = evaluation_draws(task, data, cfg=tcfg)
    final = edm_loss(res.denoiser, x0, c, s, sig, noise)[0]
    baseline = identity_loss(x0, sig, noise, tcfg.sigma_data)
    io.write_json(
        out / "train.json",
        {
            **_echo(cfg, args, task=task.__dict__, train=tcfg.to_json()),
            "eval_loss": final,
            "identity_baseline_loss": baseline,
        },
    )
    print(f"eval loss {final:.6g} (identity baseline {baseline:.6g}) -> {out / 'model.fgv1'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, base = load_config(args.config)
    seed, solver, _, _ = _common(cfg, args)
    field = build_field(_require(cfg, "field"), base)
    cond = build_conditioning(_require(cfg, "conditioning"), field)
    grid = build_grid(cfg, args)
    out = _out_dir(cfg, args, base)
    xi = gaussian_noise(field.state_dim, seed)
    store = bool(cfg.get("store", False))
    traj = sample(field, xi, cond, grid, solver, store=store)
    x0 = state_template(cfg, field).like(traj.x_final)
    io.write_map_csv(out / "x0.csv", x0.grid_view())
    if store:
        save_trajectory(out / "trajectory.fgt1", traj)
    io.write_json(out / "sample.json", _echo(cfg, args, seed=seed, solver=solver, grid=grid.describe()))
    return EXIT_OK


def cmd_grad(args) -> int:
    cfg, base = load_config(args.config)
    seed, solver, mode, _ = _common(cfg, args)
    field = build_field(_require(cfg, "field"), base)
    cond = build_conditioning(_require(cfg, "conditioning"), field)
    q_spec = build_quantity(cfg)
    grid = build_grid(cfg, args)
    out = _out_dir(cfg, args, base)
    xi = gaussian_noise(field.state_dim, seed)
    q, res = adjoint.sensitivity(
        field, cond, xi, q_spec, grid, solver, mode, state_template(cfg, field),
        metadata={"seed": seed, "q": None},
    )
    res.metadata["q"] = q
    adjoint.save_result(out / "dq_dc", res)
    io.write_json(out / "grad_config.json", _echo(cfg, args, seed=seed, solver=solver, mode=mode))
    print(f"q = {q:.17g}; |dq/dc| = {np.linalg.norm(np.asarray(res.dq_dc)):.6g}")
    return EXIT_OK


def _series_conditionings(cfg, base, field) -> tuple[list[Conditioning], list[float]]:
    s = _require(cfg, "series")
    series = conditioning.load_series(_resolve(base, _require(s, "csv")))
    lo, hi = series.span
    if "taus" in s:
        taus = [float(t) for t in s["taus"]]
    else:
        start = float(s.get("start", lo))
        end = float(s.get("end", hi))
        taus = list(conditioning.cadence_taus(start, end, float(s.get("cadence_hours", 169.0))))
    names = list(s.get("scalars", ["tau"] if "tau" in field.scalar_names else []))
    for n in field.scalar_names:
        if n not in names:
            names.append(n)
    extra = dict(_scalars(s.get("fixed_scalars")))
    conds = []
    for t in taus:
        vals = []
        for n in names:
            if n in extra:
                vals.append((n, extra[n]))
            elif n == "tau":
                vals.append((n, t))
            elif n == "zeta":
                # UTC second of day from the day fraction
                vals.append((n, (t - np.floor(t)) * 86400.0))
            else:
                raise ConfigurationError(f"no value for scalar conditioner {n!r}")
        conds.append(Conditioning(conditioning.interp(series, t), tuple(vals)))
    return conds, taus


def cmd_check(args) -> int:
    cfg, base = load_config(args.config)
    seed, solver, mode, parallel = _common(cfg, args)
    if args.mode is None and "mode" not in cfg:
        mode = "discrete"
    field = build_field(_require(cfg, "field"), base)
    q_spec = build_quantity(cfg)
    grid = build_grid(cfg, args)
    conds, taus = _series_conditionings(cfg, base, field)
    if len(conds) < 2:
        raise ConfigurationError("check needs at least two evaluation times")
    out = _out_dir(cfg, args, base)
    xi = gaussian_noise(field.state_dim, seed)
    template = state_template(cfg, field)
    factors = (1.0, 0.5, 0.25) if args.amplitude_sweep or cfg.get("amplitude_sweep") else (1.0,)
    summaries = []
    for i, f in enumerate(factors):
        walk = consistency.scale_walk(conds, f) if f != 1.0 else conds
        res = consistency.run_check(field, q_spec, walk, xi, grid, solver, mode, parallel, template)
        suffix = "" if i == 0 else f"_amp{i}"
        io.write_table_csv(
            out / f"check{suffix}.csv",
            ["k", "q", "delta_q", "linearized", "residual"],
            [(r.k, r.q, r.delta_q, r.linearized, r.residual) for r in res.records],
        )
        summaries.append({"amplitude": f, **res.summary()})
    io.write_json(
        out / "summary.json",
        {
            **summaries[0],
            "sweep": summaries if len(summaries) > 1 else [],
            "taus": taus,
            **_echo(cfg, args, seed=seed, solver=solver, mode=mode, grid=grid.describe()),
        },
    )
    for s in summaries:
        print(f"amplitude {s['amplitude']:g}: {s['records']} records, rmse {s['rmse']:.6g}, relative {s['relative_rmse']:.6g}")
    return EXIT_OK


def cmd_map(args) -> int:
    cfg, base = load_config(args.config)
    seed, solver, mode, parallel = _common(cfg, args)
    field = build_field(_require(cfg, "field"), base)
    q_spec = build_quantity(cfg)
    grid = build_grid(cfg, args)
    if "conditionings" in cfg:
        conds = [build_conditioning(c, field) for c in cfg["conditionings"]]
        explicit_keys = [c.get("group") for c in cfg["conditionings"]]
    else:
        conds, _ = _series_conditionings(cfg, base, field)
        explicit_keys = [None] * len(conds)
    if not conds:
        raise ConfigurationError("map needs at least one conditioning")
    grouping = cfg.get("grouping", "none")
    if grouping == "none":
        keys = None
    elif grouping == "month":
        keys = [conditioning.month_of(c.scalar("tau")) for c in conds]
    elif grouping == "key":
        keys = explicit_keys
    else:
        raise ConfigurationError(f"unknown grouping {grouping!r}")
    out = _out_dir(cfg, args, base)
    batch = adjoint.batch_sensitivity(
        field, conds, q_spec, grid, seed, cfg.get("seed_policy", "fresh"), solver, mode,
        keys, parallel, state_template(cfg, field),
    )
    if batch.mean is None:
        io.write_json(out / "map.json", {"failures": batch.failures})
        print("all samples failed", file=sys.stderr)
        return EXIT_NUMERIC
    adjoint.save_result(out / "mean", batch.mean)
    lo, hi = io.write_pgm(out / "mean.pgm", batch.mean.dq_dc.grid_view())
    groups = {}
    if batch.groups:
        gdir = out / "groups"
        gdir.mkdir(exist_ok=True)
        for key, res in batch.groups.items():
            adjoint.save_result(gdir / f"group_{key}", res)
            glo, ghi = io.write_pgm(gdir / f"group_{key}.pgm", res.dq_dc.grid_view())
            groups[str(key)] = {"samples": batch.group_counts[key], "min": glo, "max": ghi}
    io.write_json(
        out / "map.json",
        {
            "samples": len(conds),
            "failures": [[k, msg] for k, msg in batch.failures],
            "heatmap": {"min": lo, "max": hi},
            "groups": groups,
            "q_values": batch.q_values,
            **_echo(cfg, args, seed=seed, solver=solver, mode=mode, grid=grid.describe()),
        },
    )
    print(f"{len(conds) - len(batch.failures)}/{len(conds)} samples averaged -> {out / 'mean.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, base = load_config(args.config)
    seed, solver, _, _ = _common(cfg, args)
    field = build_field(_require(cfg, "field"), base, require_finite=False)
    if "conditioning" in cfg:
        cond = build_conditioning(cfg["conditioning"], field)
    else:
        rng = np.random.default_rng(seed)
        cond = Conditioning(
            StateVector.from_array(rng.uniform(-0.5, 0.5, field.cond_dim)),
            tuple((n, float(rng.uniform(0.5, 1.0))) for n in field.scalar_names),
        )
    grid = build_grid(cfg, args)
    out = _out_dir(cfg, args, base)
    report = oracle.verify_field(
        field, cond, build_quantity(cfg), grid, solver, seed, state_template(cfg, field),
        n_dirs=int(cfg.get("directions", 5)), sweep=bool(args.eps_sweep or cfg.get("eps_sweep")),
    )
    report["config"] = _echo(cfg, args, seed=seed, solver=solver, grid=grid.describe())
    io.write_json(out / "verify.json", report)
    failed = [c["name"] for c in report["cases"] if not c["passed"]]
    for c in report["cases"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3g} (tol {c['tolerance']:g})")
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "grad": cmd_grad,
    "check": cmd_check,
    "map": cmd_map,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowgrad", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="solver steps (training steps for train)")
    p.add_argument("--solver", choices=["euler", "heun"])
    p.add_argument("--mode", choices=["stored", "recompute", "discrete"])
    p.add_argument("--parallel", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--amplitude-sweep", action="store_true", help="check: also run at 1/2 and 1/4 amplitude")
    p.add_argument("--eps-sweep", action="store_true", help="verify: report the finite-difference step sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FlowgradError, FileNotFoundError, KeyError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
