"""Command-line entry point: design, simulate, bench and check workflows.

One flat key=value config file drives everything; see the README for the
documented key set.  Exit codes are stable: 0 success, 1 internal or
numerical failure, 2 I/O or configuration failure, 3 dimension or
consistency failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import bundle as bundle_mod
from . import design, fgm, fileio, sim
from .errors import ConfigError, DimensionError, OrbitMpcError
from .model import PlantConfig, load_plant_config, synthetic_plant

BENCH_STAGES = fgm.SOLVE_STAGES


@dataclasses.dataclass
class RunConfig:
    plant: PlantConfig
    plant_is_synthetic: bool
    weights_mode: str
    q_min: float | None
    q_max: float | None
    imc_lambda: float | None
    horizon: int
    i_max: int
    sigma_v: float
    sigma_w: float
    sigma_m: float
    epsilon: float
    delta: float | None
    dist: sim.DisturbanceSpec
    T: int
    n_workers: int
    seed: int
    output_dir: str
    imc_bandwidth_hz: float
    bench_cycles: int
    mu_declared: int
    observer_dump: bool


def _parse_components(raw: str):
    """'freq:amp:mode;freq:amp:mode' triples for the sinusoid mix."""
    components = []
    for token in raw.split(";"):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad disturbance component {token!r}, expected freq:amp:mode")
        components.append((float(parts[0]), float(parts[1]), int(parts[2])))
    return tuple(components)


def load_run_config(path, seed_override=None, workers_override=None, out_override=None) -> RunConfig:
    pairs = fileio.read_kv(path)
    version = fileio.kv_get(pairs, "schema_version", int, default=1)
    if version != 1:
        raise ConfigError(f"unsupported schema_version {version}")
    seed = seed_override if seed_override is not None else fileio.kv_get(pairs, "seed", int, default=0)

    plant_key = fileio.kv_get(pairs, "plant", str, default="synthetic")
    if plant_key == "synthetic":
        plant = synthetic_plant(
            n_y=fileio.kv_get(pairs, "synthetic_n_y", int, default=8),
            n_u=fileio.kv_get(pairs, "synthetic_n_u", int, default=8),
            kappa_target=fileio.kv_get(pairs, "synthetic_kappa", float, default=1e4),
            seed=seed,
            dt=fileio.kv_get(pairs, "synthetic_dt", float, default=1e-3),
            mu=fileio.kv_get(pairs, "synthetic_mu", int, default=3),
            bandwidth=2.0 * np.pi * fileio.kv_get(pairs, "synthetic_bandwidth_hz", float, default=70.0),
            alpha=fileio.kv_get(pairs, "synthetic_alpha", float, default=1.0),
            rho=fileio.kv_get(pairs, "synthetic_rho", float, default=0.1),
        )
        synthetic = True
    else:
        plant_path = fileio.resolve_path(path, plant_key)
        if not os.path.exists(plant_path):
            raise ConfigError(f"plant config not found: {plant_path}")
        plant = load_plant_config(plant_path)
        synthetic = False

    lam_raw = fileio.kv_get(pairs, "lambda", str, default="auto")
    delta_raw = fileio.kv_get(pairs, "delta", str, default="auto")
    dist_kind = fileio.kv_get(pairs, "dist_kind", str, default="white")
    dist_path = pairs.get("dist_path")
    if dist_path is not None:
        dist_path = fileio.resolve_path(path, dist_path)
    dist = sim.DisturbanceSpec(
        kind=dist_kind,
        sigma=fileio.kv_get(pairs, "dist_sigma", float, default=1.0),
        seed=seed,
        components=_parse_components(pairs.get("dist_components", "")),
        path=dist_path,
        dt=plant.dt,
    )
    horizon = fileio.kv_get(pairs, "horizon", int, default=1)
    if horizon not in (1, 2):
        raise ConfigError(f"horizon must be 1 or 2, got {horizon}")
    n_workers = workers_override if workers_override is not None else fileio.kv_get(pairs, "n_workers", int, default=1)
    if n_workers < 1:
        raise ConfigError("n_workers must be >= 1")
    return RunConfig(
        plant=plant,
        plant_is_synthetic=synthetic,
        weights_mode=fileio.kv_get(pairs, "weights", str, default="saturated"),
        q_min=fileio.kv_get(pairs, "q_min", float, default=None) if "q_min" in pairs else None,
        q_max=fileio.kv_get(pairs, "q_max", float, default=None) if "q_max" in pairs else None,
        imc_lambda=None if lam_raw == "auto" else float(lam_raw),
        horizon=horizon,
        i_max=fileio.kv_get(pairs, "i_max", int, default=fgm.DEFAULT_I_MAX),
        sigma_v=fileio.kv_get(pairs, "sigma_v", float, default=1.0),
        sigma_w=fileio.kv_get(pairs, "sigma_w", float, default=1e-4),
        sigma_m=fileio.kv_get(pairs, "sigma_m", float, default=1e-2),
        epsilon=fileio.kv_get(pairs, "epsilon", float, default=1e-3),
        delta=None if delta_raw == "auto" else float(delta_raw),
        dist=dist,
        T=fileio.kv_get(pairs, "T", int, default=65536),  # 2**16 for spectral runs
        n_workers=n_workers,
        seed=seed,
        output_dir=out_override or fileio.kv_get(pairs, "output_dir", str, default="out"),
        imc_bandwidth_hz=fileio.kv_get(pairs, "imc_bandwidth_hz", float, default=200.0),
        bench_cycles=fileio.kv_get(pairs, "bench_cycles", int, default=1000),
        mu_declared=plant.mu,
        observer_dump=bool(fileio.kv_get(pairs, "observer_dump", int, default=0)),
    )


def _build_bundle(cfg: RunConfig, horizon: int) -> bundle_mod.DesignBundle:
    return bundle_mod.design_controller(
        cfg.plant,
        horizon=horizon,
        weights_mode=cfg.weights_mode,
        q_min=cfg.q_min,
        q_max=cfg.q_max,
        imc_lambda=cfg.imc_lambda,
        sigma_v=cfg.sigma_v,
        sigma_w=cfg.sigma_w,
        sigma_m=cfg.sigma_m,
        epsilon=cfg.epsilon,
        delta=cfg.delta,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_design(cfg: RunConfig) -> int:
    b = _build_bundle(cfg, cfg.horizon)
    bundle_mod.save_bundle(b, cfg.output_dir)
    print(f"design bundle written to {cfg.output_dir}")
    print(f"kappa(J) = {b.kappa:.6g}, beta = {b.condensed.beta:.6g}, "
          f"i_max_bound = {b.i_max_bound}")
    return 0


def _write_trace(path, trace: sim.SimTrace, seed: int) -> None:
    T, n_y = trace.y.shape
    n_u = trace.u.shape[1]
    cols = (["step"] + [f"y{i}" for i in range(n_y)] + [f"u{i}" for i in range(n_u)]
            + [f"d{i}" for i in range(n_y)])
    body = np.column_stack([np.arange(T), trace.y, trace.u, trace.d])
    fileio.write_matrix(path, body, header={
        "schema_version": bundle_mod.SCHEMA_VERSION,
        "seed": seed,
        "columns": ",".join(cols),
    })


def cmd_simulate(cfg: RunConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    bundles = {n: _build_bundle(cfg, n) for n in (1, 2)}
    runs = {}
    runs["off"] = sim.simulate(cfg.plant, None, cfg.dist, cfg.T)
    imc = bundles[1].imc_controller(cfg.imc_bandwidth_hz, clip=False)
    runs["imc"] = sim.simulate(cfg.plant, imc, cfg.dist, cfg.T)
    imc_c = bundles[1].imc_controller(cfg.imc_bandwidth_hz, clip=True)
    runs["imc_constr"] = sim.simulate(cfg.plant, imc_c, cfg.dist, cfg.T)
    mpc_ctrls = {}
    for n in (1, 2):
        mpc_ctrls[n] = bundles[n].mpc_controller(cfg.i_max, cfg.n_workers)
        runs[f"mpc_n{n}"] = sim.simulate(cfg.plant, mpc_ctrls[n], cfg.dist, cfg.T)

    _write_trace(os.path.join(cfg.output_dir, "trace.csv"), runs[f"mpc_n{cfg.horizon}"], cfg.seed)
    if cfg.observer_dump:
        mpc_ctrls[cfg.horizon].observer.to_csv(os.path.join(cfg.output_dir, "observer_state.csv"))

    curves = {}
    freqs = None
    for name, trace in runs.items():
        freqs, curves[name] = sim.ibm(trace, monitor="average")
    body = np.column_stack([freqs, curves["off"], curves["imc"], curves["imc_constr"],
                            curves["mpc_n1"], curves["mpc_n2"]])
    fileio.write_matrix(os.path.join(cfg.output_dir, "ibm.csv"), body, header={
        "schema_version": bundle_mod.SCHEMA_VERSION,
        "seed": cfg.seed,
        "columns": "freq_hz,ibm_off,ibm_imc,ibm_imc_constr,ibm_mpc_n1,ibm_mpc_n2",
        "normalization": "sinusoid amplitude A integrates to A/sqrt(2) (RMS)",
    })
    print(f"trace.csv and ibm.csv written to {cfg.output_dir}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    os.makedirs(cfg.output_dir, exist_ok=True)
    bundle_dir = os.path.join(cfg.output_dir, "bundle")
    b = None
    if os.path.exists(os.path.join(bundle_dir, "bounds.txt")):
        b = bundle_mod.load_bundle(bundle_dir)
        stale = (b.plant.n_y, b.plant.n_u, b.plant.mu, b.condensed.N) != (
            cfg.plant.n_y, cfg.plant.n_u, cfg.plant.mu, cfg.horizon)
        if stale:
            b = None
    if b is None:
        b = _build_bundle(cfg, cfg.horizon)
        bundle_mod.save_bundle(b, bundle_dir)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    totals = {}
    for workers in range(1, cfg.n_workers + 1):
        ctrl = b.mpc_controller(cfg.i_max, workers)
        y_probe = rng.normal(0.0, 1.0, (64, b.ss.n_y))
        for k in range(50):  # warm-up: pools, caches, branch predictors
            ctrl.step(y_probe[k % 64])
        per_stage = {stage: [] for stage in BENCH_STAGES}
        cycle_totals = []
        for k in range(cfg.bench_cycles):
            timers: dict = {}
            t0 = time.perf_counter_ns()
            ctrl.step(y_probe[k % 64], timers=timers)
            cycle_totals.append(time.perf_counter_ns() - t0)
            for stage in BENCH_STAGES:
                per_stage[stage].append(timers.get(stage, 0))
        for stage in BENCH_STAGES:
            values = np.asarray(per_stage[stage], dtype=float) / 1e3
            rows.append((workers, stage, float(values.mean()), float(values.max())))
        totals[workers] = float(np.mean(cycle_totals) / 1e3)
    header = {
        "schema_version": bundle_mod.SCHEMA_VERSION,
        "seed": cfg.seed,
        "columns": "workers,stage,mean_us,max_us",
        "i_max": cfg.i_max,
        "horizon": b.condensed.N,
    }
    for workers, total in totals.items():
        header[f"total_mean_us_workers_{workers}"] = fileio.format_float(total)
    out_path = os.path.join(cfg.output_dir, "timing.csv")
    with open(out_path, "w") as fh:
        for key, value in header.items():
            fh.write(f"# {key}={value}\n")
        for workers, stage, mean_us, max_us in rows:
            fh.write(f"{workers},{stage},{fileio.format_float(mean_us)},{fileio.format_float(max_us)}\n")
    print(f"timing.csv written to {cfg.output_dir}")
    for workers, total in totals.items():
        print(f"  workers={workers}: total {total:.1f} us/sample")
    return 0


def cmd_check(cfg: RunConfig, bundle_dir=None) -> int:
    directory = bundle_dir or cfg.output_dir
    b = bundle_mod.load_bundle(directory)
    results = bundle_mod.run_checks(b)
    if b.plant.mu != cfg.mu_declared:
        results.append(bundle_mod.CheckResult(
            "mu_consistency", False,
            f"config declares mu={cfg.mu_declared}, bundle has mu={b.plant.mu}"))
    else:
        results.append(bundle_mod.CheckResult("mu_consistency", True,
                                              f"mu={b.plant.mu} matches"))
    if (b.plant.n_y, b.plant.n_u) != (cfg.plant.n_y, cfg.plant.n_u):
        results.append(bundle_mod.CheckResult(
            "dimension_consistency", False,
            f"config plant is {cfg.plant.n_y}x{cfg.plant.n_u}, bundle is {b.plant.n_y}x{b.plant.n_u}"))
    else:
        results.append(bundle_mod.CheckResult("dimension_consistency", True,
                                              f"{b.plant.n_y} monitors x {b.plant.n_u} correctors"))
    failed = 0
    for res in results:
        marker = "PASS" if res.passed else "FAIL"
        print(f"[{marker}] {res.name}: {res.detail}")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} check(s) failed")
        return 3
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orbitmpc",
                                     description="beam-orbit MPC design, simulation and benchmarking")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (("design", "write a design bundle"),
                      ("simulate", "closed-loop run, trace + spectra"),
                      ("bench", "per-stage latency benchmark"),
                      ("check", "validate a design bundle")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="flat key=value run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--workers", type=int, default=None, help="solver worker count (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides config)")
        if name == "check":
            p.add_argument("--bundle", default=None, help="bundle directory (defaults to output_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed_override=args.seed,
                              workers_override=args.workers, out_override=args.out)
        if args.command == "design":
            return cmd_design(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_check(cfg, bundle_dir=getattr(args, "bundle", None))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OrbitMpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
