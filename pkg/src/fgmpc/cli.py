"""Command-line entry point.

Subcommands:
    run              execute a scenario file, write trajectory.csv + summary.json
    check-jacobians  finite-difference verification of every factor family
    bench            solve-time statistics over repeated scenario runs

Exit codes: 0 success, 1 verification failure, 2 input error, 3 solver
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .controller import (
    FigureEightReference,
    HoverReference,
    LineReference,
    MpcConfig,
    ReferenceTrajectory,
    WaypointReference,
)
from .factors import (
    CbfParams,
    ControlBoundFactor,
    ControlBounds,
    ControlRateFactor,
    DistanceCbfFactor,
    DynamicsFactor,
    Obstacle,
    StateErrorFactor,
    VelocityCbfFactor,
    cbf_margin,
    vcbf_margin,
)
from .graph_core import (
    NoiseModel,
    PerturbedJacobianFactor,
    SolverParams,
    Values,
    control_key,
    jacobian_fd_errors,
    state_key,
)
from .manifold import State, exp_so3, log_so3, state_boxplus
from .sim import ObstacleMotion, ScenarioConfig, compute_metrics, run_scenario
from .vehicle import QuadrotorModel, QuadrotorParams, UniversalModel, make_model

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3

REL_TOL = 1e-5
ABS_TOL = 1e-7
FD_STEP = 1e-6


class ScenarioError(ValueError):
    """Scenario file problem, naming the offending field."""


# ---------------------------------------------------------------------------
# scenario loading


def load_scenario_dict(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ScenarioError(f"scenario file {path} must contain a JSON object")
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted-path key=value overrides; paths not found at the root
    are retried under the 'mpc' section (so 'cbf.alpha=0.3' works)."""
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} must look like key.path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        root = cfg
        if keys[0] not in cfg and keys[0] in cfg.get("mpc", {}):
            root = cfg["mpc"]
        node = root
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ScenarioError(f"override path {dotted!r} crosses non-object field {key!r}")
        node[keys[-1]] = value
    return cfg


def config_digest(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _get(section: dict, key: str, where: str, default=None, required=False):
    if key not in section:
        if required:
            raise ScenarioError(f"missing required field {where}.{key}")
        return default
    return section[key]


def _build_reference(section: dict) -> ReferenceTrajectory:
    kind = _get(section, "kind", "reference", required=True)
    try:
        if kind == "hover":
            return HoverReference(_get(section, "point", "reference", required=True))
        if kind == "line":
            return LineReference(
                _get(section, "start", "reference", required=True),
                _get(section, "goal", "reference", required=True),
                speed=float(_get(section, "speed", "reference", required=True)),
                accel=float(_get(section, "accel", "reference", default=1.0)),
            )
        if kind == "figure-eight":
            return FigureEightReference(
                _get(section, "center", "reference", required=True),
                amplitude_x=float(_get(section, "amplitude_x", "reference", required=True)),
                amplitude_y=float(_get(section, "amplitude_y", "reference", required=True)),
                period=float(_get(section, "period", "reference", required=True)),
            )
        if kind == "waypoints":
            return WaypointReference(
                _get(section, "points", "reference", required=True),
                _get(section, "speeds", "reference", required=True),
            )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"invalid reference section: {exc}") from exc
    raise ScenarioError(f"unknown reference.kind {kind!r}")


def _build_motion(entry: dict, index: int) -> ObstacleMotion:
    where = f"obstacles[{index}]"
    kind = _get(entry, "motion", where, required=True)
    radius = float(_get(entry, "radius", where, required=True))
    try:
        if kind == "static":
            return ObstacleMotion("static", radius,
                                  position=_get(entry, "position", where, required=True))
        if kind == "constant-velocity":
            return ObstacleMotion("constant-velocity", radius,
                                  position=_get(entry, "position", where, required=True),
                                  velocity=_get(entry, "velocity", where, required=True))
        if kind == "elliptical":
            axes = _get(entry, "semi_axes", where, required=True)
            return ObstacleMotion("elliptical", radius,
                                  center=_get(entry, "center", where, required=True),
                                  semi_axes=(float(axes[0]), float(axes[1])),
                                  rate=float(_get(entry, "rate", where, required=True)),
                                  phase=float(_get(entry, "phase", where, default=0.0)))
    except (ValueError, TypeError, IndexError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"invalid {where}: {exc}") from exc
    raise ScenarioError(f"unknown {where}.motion {kind!r}")


def build_scenario(cfg: dict) -> ScenarioConfig:
    """Validate the scenario dictionary and assemble the run configuration."""
    vehicle = cfg.get("vehicle", {})
    kind = _get(vehicle, "kind", "vehicle", default="quadrotor")
    gravity = float(_get(vehicle, "gravity", "vehicle", default=9.81))
    mass = float(_get(vehicle, "mass", "vehicle", default=1.0))
    drag = _get(vehicle, "drag", "vehicle", default=0.0)
    drag = np.atleast_1d(np.asarray(drag, dtype=float))
    if drag.ndim == 1 and drag.shape[0] == 1:
        drag = np.full(3, drag[0])
    if drag.shape != (3,) or np.any(drag < 0):
        raise ScenarioError("vehicle.drag must be a non-negative scalar or 3-vector")

    try:
        control_model = make_model(kind, mass=mass, gravity=gravity)
        plant_model = make_model(kind, mass=mass, gravity=gravity, drag=-np.diag(drag))
    except ValueError as exc:
        raise ScenarioError(f"invalid vehicle section: {exc}") from exc

    mpc_cfg = cfg.get("mpc", {})
    m = control_model.control_dim
    solver_cfg = mpc_cfg.get("solver", {})
    cbf_cfg = mpc_cfg.get("cbf", {})
    try:
        solver = SolverParams(
            lambda_init=float(_get(solver_cfg, "lambda0", "mpc.solver", default=1e-4)),
            max_iterations=int(_get(solver_cfg, "max_iterations", "mpc.solver", default=50)),
            rel_cost_tol=float(_get(solver_cfg, "rel_cost_tol", "mpc.solver", default=1e-6)),
            gradient_tol=float(_get(solver_cfg, "gradient_tol", "mpc.solver", default=1e-8)),
        )
        cbf = CbfParams(
            alpha=float(_get(cbf_cfg, "alpha", "mpc.cbf", default=1.0)),
            gamma=float(_get(cbf_cfg, "gamma", "mpc.cbf", default=0.0)),
            d_margin=float(_get(cbf_cfg, "d_margin", "mpc.cbf", default=0.3)),
            weight=float(_get(cbf_cfg, "weight", "mpc.cbf", default=1.0)),
            classk_mode=_get(cbf_cfg, "mode", "mpc.cbf", default="paper-exact"),
        )
        u_min = _get(mpc_cfg, "u_min", "mpc")
        u_max = _get(mpc_cfg, "u_max", "mpc")
        bounds = None
        if u_min is not None or u_max is not None:
            if u_min is None or u_max is None:
                raise ScenarioError("mpc.u_min and mpc.u_max must be given together")
            bounds = ControlBounds(np.asarray(u_min, float), np.asarray(u_max, float))
        dynamics_weight = _get(mpc_cfg, "dynamics_weight", "mpc")
        mpc = MpcConfig(
            model=control_model,
            horizon=int(_get(mpc_cfg, "horizon", "mpc", default=20)),
            dt=float(_get(mpc_cfg, "dt", "mpc", default=0.1)),
            state_weight=np.asarray(_get(mpc_cfg, "state_weight", "mpc", default=[
                50.0, 50.0, 50.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0]), float),
            terminal_weight=(np.asarray(mpc_cfg["terminal_weight"], float)
                             if "terminal_weight" in mpc_cfg else None),
            rate_weight=np.asarray(_get(mpc_cfg, "rate_weight", "mpc", default=1.0), float),
            bound_weight=np.asarray(_get(mpc_cfg, "bound_weight", "mpc", default=1e4), float),
            prior_weight=np.asarray(_get(mpc_cfg, "prior_weight", "mpc", default=1e6), float),
            sigma_a=float(_get(mpc_cfg, "sigma_a", "mpc", default=1.0)),
            sigma_omega=float(_get(mpc_cfg, "sigma_omega", "mpc", default=1.0)),
            dynamics_weight=(np.asarray(dynamics_weight, float)
                             if dynamics_weight is not None else None),
            cbf=cbf,
            bounds=bounds,
            solver=solver,
        )
    except ScenarioError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"invalid mpc section: {exc}") from exc

    reference = _build_reference(cfg.get("reference", {"kind": "hover", "point": [0, 0, 1]}))
    motions = [_build_motion(entry, i) for i, entry in enumerate(cfg.get("obstacles", []))]

    sim_cfg = cfg.get("sim", {})
    start = _get(sim_cfg, "start", "sim")
    initial_state = None
    if start is not None:
        try:
            initial_state = State(
                np.asarray(_get(start, "position", "sim.start", required=True), float),
                exp_so3(np.asarray(_get(start, "rotvec", "sim.start", default=[0, 0, 0]), float)),
                np.asarray(_get(start, "velocity", "sim.start", default=[0, 0, 0]), float),
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"invalid sim.start: {exc}") from exc
    try:
        return ScenarioConfig(
            mpc=mpc,
            reference=reference,
            plant_model=plant_model,
            obstacles=motions,
            duration=float(_get(sim_cfg, "duration", "sim", default=10.0)),
            dt_sim=(float(sim_cfg["dt_sim"]) if "dt_sim" in sim_cfg else None),
            measurement_noise=float(_get(sim_cfg, "measurement_noise", "sim", default=0.0)),
            seed=int(_get(sim_cfg, "seed", "sim", default=0)),
            initial_state=initial_state,
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"invalid sim section: {exc}") from exc


# ---------------------------------------------------------------------------
# run


def _control_headers(model) -> list[str]:
    if isinstance(model, QuadrotorModel):
        return ["u_omega_x", "u_omega_y", "u_omega_z", "u_thrust"]
    return ["u_omega_x", "u_omega_y", "u_omega_z", "u_accel_x", "u_accel_y", "u_accel_z"]


def write_trajectory_csv(path: Path, log, model, n_obstacles: int):
    headers = (["t", "p_x", "p_y", "p_z", "rotvec_x", "rotvec_y", "rotvec_z",
                "v_x", "v_y", "v_z"]
               + _control_headers(model)
               + ["solve_ms"]
               + [f"obstacle_{i}_boundary_m" for i in range(n_obstacles)]
               + ["min_h"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for rec in log.records:
            rv = log_so3(rec.state.R)
            row = ([rec.t]
                   + list(rec.state.p) + list(rv) + list(rec.state.v)
                   + list(rec.u)
                   + [rec.solve_ms]
                   + list(rec.boundary_distances)
                   + [rec.min_h])
            writer.writerow([f"{x:.12g}" for x in row])
    return headers


def write_summary_json(path: Path, summary: dict):
    with open(path, "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2))
        fh.write("\n")


def cmd_run(args) -> int:
    try:
        cfg = load_scenario_dict(args.scenario)
        cfg = apply_overrides(cfg, args.set or [])
        digest = config_digest(cfg)
        scenario = build_scenario(cfg)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = run_scenario(scenario)
    summary = {
        "version": __version__,
        "config_digest": digest,
        "aborted": log.aborted,
        "steps": len(log.records),
    }
    if log.aborted:
        summary["abort_message"] = log.abort_message
    if log.records:
        metrics = compute_metrics(log, scenario.reference)
        summary["metrics"] = metrics.as_dict()
    write_trajectory_csv(out_dir / "trajectory.csv", log, scenario.mpc.model,
                         len(scenario.obstacles))
    write_summary_json(out_dir / "summary.json", summary)
    if log.aborted:
        print(f"solver failure: {log.abort_message}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"run complete: {len(log.records)} steps -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-jacobians


def _random_rotation(rng, max_angle: float = 1.5) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


def _random_state(rng) -> State:
    return State(2.0 * rng.standard_normal(3), _random_rotation(rng),
                 2.0 * rng.standard_normal(3))


def _nearby_state(rng, x: State) -> State:
    delta = np.concatenate([rng.standard_normal(3), 0.4 * rng.standard_normal(3),
                            rng.standard_normal(3)])
    return state_boxplus(x, delta)


def _random_obstacle(rng, x: State) -> Obstacle:
    # Keep the obstacle a healthy distance from the robot so the barrier
    # geometry is non-degenerate.
    offset = rng.standard_normal(3)
    offset *= rng.uniform(0.8, 4.0) / np.linalg.norm(offset)
    return Obstacle(x.p + offset, rng.standard_normal(3), rng.uniform(0.1, 0.6))


def _away_from_kink(value: float, margin: float = 1e-3) -> bool:
    return abs(value) > margin


def jacobian_case_generators(models: dict) -> dict:
    """One (factor, values) sampler per factor family; samplers resample
    configurations that land within 1e-3 of a clamp kink."""
    noise1 = NoiseModel.isotropic(1, 1.0)
    noise9 = NoiseModel.isotropic(9, 1.0)
    noise_q = NoiseModel.isotropic(4, 1.0)
    universal, quadrotor = models["universal"], models["quadrotor"]

    def dynamics_universal(rng):
        x_k = _random_state(rng)
        values = Values()
        values[state_key(0)] = x_k
        values[control_key(0)] = 2.0 * rng.standard_normal(6)
        values[state_key(1)] = _nearby_state(rng, x_k)
        return DynamicsFactor(0, universal, 0.1, noise9), values

    def dynamics_quadrotor(rng):
        x_k = _random_state(rng)
        values = Values()
        values[state_key(0)] = x_k
        u = np.append(2.0 * rng.standard_normal(3), rng.uniform(0.0, 30.0))
        values[control_key(0)] = u
        values[state_key(1)] = _nearby_state(rng, x_k)
        return DynamicsFactor(0, quadrotor, 0.1, noise9), values

    def reference(rng):
        x = _random_state(rng)
        values = Values()
        values[state_key(0)] = x
        return StateErrorFactor(0, _nearby_state(rng, x), noise9), values

    def bound(rng):
        bounds = ControlBounds(-np.ones(4), np.ones(4))
        while True:
            u = rng.uniform(-2.0, 2.0, size=4)
            if np.all(np.abs(np.abs(u) - 1.0) > 1e-3):
                break
        values = Values()
        values[control_key(0)] = u
        return ControlBoundFactor(0, bounds, noise_q), values

    def rate(rng):
        values = Values()
        values[control_key(0)] = rng.standard_normal(4)
        values[control_key(1)] = rng.standard_normal(4)
        return ControlRateFactor(0, 4, noise_q), values

    def distance_cbf(rng):
        while True:
            x = _random_state(rng)
            obstacle = _random_obstacle(rng, x)
            params = CbfParams(alpha=rng.uniform(0.2, 2.0), gamma=0.0,
                               d_margin=rng.uniform(0.1, 0.5))
            if _away_from_kink(cbf_margin(x, obstacle, params)):
                values = Values()
                values[state_key(0)] = x
                return DistanceCbfFactor(0, obstacle, params, noise1), values

    def velocity_cbf(model):
        def gen(rng):
            while True:
                x = _random_state(rng)
                obstacle = _random_obstacle(rng, x)
                mode = "paper-exact" if rng.uniform() < 0.5 else "theory-consistent"
                params = CbfParams(alpha=rng.uniform(0.2, 2.0), gamma=rng.uniform(0.1, 2.0),
                                   d_margin=rng.uniform(0.1, 0.5), classk_mode=mode)
                if model.control_dim == 4:
                    u = np.append(2.0 * rng.standard_normal(3), rng.uniform(0.0, 30.0))
                else:
                    u = 2.0 * rng.standard_normal(6)
                if _away_from_kink(vcbf_margin(x, u, obstacle, params, model)):
                    values = Values()
                    values[state_key(0)] = x
                    values[control_key(0)] = u
                    return VelocityCbfFactor(0, obstacle, params, model, noise1), values
        return gen

    return {
        "dynamics-universal": dynamics_universal,
        "dynamics-quadrotor": dynamics_quadrotor,
        "reference": reference,
        "bound": bound,
        "rate": rate,
        "cbf-distance": distance_cbf,
        "vcbf-universal": velocity_cbf(universal),
        "vcbf-quadrotor": velocity_cbf(quadrotor),
    }


def cmd_check_jacobians(args) -> int:
    if args.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    models = {
        "universal": UniversalModel(),
        "quadrotor": QuadrotorModel(QuadrotorParams(mass=1.2)),
    }
    generators = jacobian_case_generators(models)
    failures = []
    for family, gen in generators.items():
        rng = np.random.default_rng(args.seed)
        worst_rel = 0.0
        worst_abs = 0.0
        for _ in range(args.count):
            factor, values = gen(rng)
            if args.inject_fault:
                factor = PerturbedJacobianFactor(factor, key_index=0, row=0, col=0, delta=0.1)
            rel, small = jacobian_fd_errors(factor, values, FD_STEP)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, small)
        ok = worst_rel < REL_TOL and worst_abs < ABS_TOL
        print(f"family={family} worst_rel={worst_rel:.3e} worst_abs={worst_abs:.3e} "
              f"count={args.count} {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(family)
    if failures:
        print(f"check-jacobians: FAIL families={','.join(failures)} seed={args.seed}",
              file=sys.stderr)
        return EXIT_VERIFY
    print(f"check-jacobians: PASS ({len(generators)} families x {args.count} configs)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    try:
        cfg = load_scenario_dict(args.scenario)
        cfg = apply_overrides(cfg, args.set or [])
        scenario = build_scenario(cfg)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    times = []
    steps = 0
    for _ in range(args.reps):
        log = run_scenario(scenario)
        if log.aborted:
            print(f"solver failure during bench: {log.abort_message}", file=sys.stderr)
            return EXIT_SOLVER
        steps = len(log.records)
        times.extend(rec.solve_ms for rec in log.records)
    report = {
        "command": "bench",
        "scenario": Path(args.scenario).name,
        "reps": args.reps,
        "steps_per_rep": steps,
        "median_ms": float(np.percentile(times, 50)),
        "p99_ms": float(np.percentile(times, 99)),
        "max_ms": float(np.max(times)),
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgmpc",
                                     description="Factor-graph MPC toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path override applied after parsing")
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check-jacobians",
                             help="verify analytic Jacobians against finite differences")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--count", type=int, default=100)
    p_check.add_argument("--inject-fault", action="store_true",
                         help="corrupt one Jacobian entry per family (harness self-test)")
    p_check.set_defaults(func=cmd_check_jacobians)

    p_bench = sub.add_parser("bench", help="solve-time statistics for a scenario")
    p_bench.add_argument("--scenario", required=True)
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
