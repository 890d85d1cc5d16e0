"""Command-line interface: simulate, guess, transcribe, optimize, metrics.

Exit codes: 0 success, 2 configuration or file error, 3 simulation failure,
4 solver did not converge.  Every JSON output carries ``format_version`` and
the configuration it was produced from; trajectory CSVs echo it in their
header.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import kite_dynamics as dyn
from .guess import GuessInfeasible, GuessSpec, generate_guess, plan_for
from .integrator import mean_power, simulate, singularity_demo
from .nlp_solver import SolverOptions, solve
from .ocp_model import ObjectiveWeights, StagePlan, compute_metrics, loyd_power
from .params import ConfigError, KiteParams
from .trajio import TrajectoryFormatError, read_trajectory, write_trajectory
from .transcription import ShootingNlp, dump_nlp, rollout_node_error

OUTPUT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_SIMULATION, EXIT_SOLVER = 0, 2, 3, 4


@dataclass
class SimulationSetup:
    """Settings of the ``equilibrium`` scenario and of replayed files."""

    duration: float = 60.0  # s
    tau: float = 0.1  # s
    l0: float = 100.0  # m

    def __post_init__(self):
        for name in ("duration", "tau", "l0"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"simulate.{name} must be > 0, got {v!r}")


@dataclass
class RunConfig:
    params: KiteParams = field(default_factory=KiteParams)
    plan: Optional[StagePlan] = None  # None: derived from the guess spec
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    guess: GuessSpec = field(default_factory=GuessSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)
    simulate: SimulationSetup = field(default_factory=SimulationSetup)
    seed: int = 0
    out: Optional[str] = None

    def stage_plan(self) -> StagePlan:
        return self.plan if self.plan is not None else plan_for(self.guess)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "plan": self.stage_plan().to_dict(),
            "weights": self.weights.to_dict(),
            "guess": self.guess.to_dict(),
            "solver": self.solver.to_dict(),
            "simulate": vars(self.simulate).copy(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {"params", "plan", "weights", "guess", "solver", "simulate", "seed", "out"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration section(s): {sorted(unknown)}")
        for name in known - {"seed", "out"}:
            if name in data and not isinstance(data[name], dict):
                raise ConfigError(f"section {name!r} must be a JSON object")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        try:
            sim = SimulationSetup(**data.get("simulate", {}))
        except TypeError as exc:
            raise ConfigError(f"simulate: {exc}") from None
        return cls(
            params=KiteParams.from_dict(data.get("params", {})),
            plan=StagePlan.from_dict(data["plan"]) if "plan" in data else None,
            weights=ObjectiveWeights.from_dict(data.get("weights", {})),
            guess=GuessSpec.from_dict(data.get("guess", {})),
            solver=SolverOptions.from_dict(data.get("solver", {})),
            simulate=sim,
            seed=seed,
            out=data.get("out"),
        )


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return RunConfig.from_dict(data)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _envelope(cfg: RunConfig, command: str, **body) -> dict:
    return {"format_version": OUTPUT_VERSION, "quatkite_version": __version__,
            "command": command, "config": cfg.to_dict(), **body}


def _summary(traj) -> dict:
    out = {"model": traj.model, "samples": len(traj), "duration": traj.duration,
           "final_time": float(traj.times[-1]), "final_state": traj.states[-1],
           "failed": traj.failed, "failure": traj.failure}
    if traj.model == "quaternion":
        out["max_norm_drift"] = float(np.max(np.abs(np.linalg.norm(traj.quaternions, axis=1)
                                                    - 1.0)))
    return out


def cmd_simulate(cfg: RunConfig, out: Path, model: str, scenario: str) -> int:
    p = cfg.params
    extra = {"config": cfg.to_dict(), "scenario": scenario}
    if scenario == "singularity-demo":
        euler, quat = singularity_demo(p)
        runs = {"euler": euler, "quaternion": quat}
    elif scenario == "equilibrium":
        # theta = atan(E), psi = 0 and zero controls is a rest point of both models
        sim = cfg.simulate
        theta = math.atan(p.E)
        if model == "euler":
            x0, u = [0.0, 0.0, theta, sim.l0], [0.0, 0.0]
        else:
            x0, u = dyn.euler_state_to_ocp(0.0, 0.0, theta, sim.l0), [0.0, 0.0]
        runs = {model: simulate(model, x0, u, sim.tau, sim.duration, p)}
    else:
        src = read_trajectory(scenario)
        if src.model != model:
            raise ConfigError(f"scenario file holds a {src.model} trajectory, --model is {model}")
        taus = np.diff(src.times)
        if taus.size == 0:
            raise ConfigError("scenario file needs at least two samples to replay")
        runs = {model: simulate(model, src.states[0], src.controls, taus, p=p,
                                stabilize=src.stabilize)}
    summaries = {}
    for name, traj in runs.items():
        write_trajectory(traj, out / f"{name}.csv", extra)
        summaries[name] = _summary(traj)
    _write_json(out / "summary.json", _envelope(cfg, "simulate", scenario=scenario,
                                                model=model, runs=summaries))
    for name, s in summaries.items():
        status = f"FAILED: {s['failure']}" if s["failed"] else "completed"
        print(f"{name}: {s['samples']} samples, {status}")
    return EXIT_SIMULATION if runs[model].failed else EXIT_OK


def _make_guess(cfg: RunConfig):
    try:
        return generate_guess(cfg.guess, cfg.stage_plan(), cfg.params)
    except GuessInfeasible as exc:
        raise ConfigError(f"guess: {exc}") from None


def cmd_guess(cfg: RunConfig, out: Path, threads: int) -> int:
    g = _make_guess(cfg)
    write_trajectory(g.trajectory, out / "guess.csv", {"config": cfg.to_dict()})
    nlp = ShootingNlp(g.plan, cfg.params, cfg.weights, threads)
    ev = nlp.evaluate(g.w, jac=False)
    _write_json(out / "guess.json", _envelope(
        cfg, "guess", plan=g.plan.to_dict(), T=g.T, reel_out=g.reel_out,
        hover_margin=g.hover_margin, violations=g.violations,
        max_clipped_delta=g.max_clipped_delta,
        max_continuity_residual=float(np.max(np.abs(ev.c[:nlp.n_eq]))),
        metrics=compute_metrics(g.trajectory).to_dict(), w=g.w))
    print(f"guess: T={np.round(g.T, 3).tolist()} mean power "
          f"{mean_power(g.trajectory):.6g} W, {len(g.violations)} node violation(s)")
    return EXIT_OK


def cmd_transcribe(cfg: RunConfig, out: Path, threads: int) -> int:
    g = _make_guess(cfg)
    nlp = ShootingNlp(g.plan, cfg.params, cfg.weights, threads)
    dump_nlp(nlp, g.w, out / "nlp.json")
    print(f"NLP: {nlp.n_vars} variables, {nlp.n_eq} equalities, {nlp.n_ineq} inequalities")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig, out: Path, threads: int, snapshot_stride: int) -> int:
    p = cfg.params
    g = _make_guess(cfg)
    nlp = ShootingNlp(g.plan, p, cfg.weights, threads)
    extra = {"config": cfg.to_dict()}
    write_trajectory(g.trajectory, out / "guess.csv", extra)
    snap_dir = out / "snapshots"
    if snapshot_stride > 0:
        snap_dir.mkdir(exist_ok=True)
        write_trajectory(nlp.node_trajectory(g.w), snap_dir / "iter_0000.csv",
                         {**extra, "iteration": 0})

    def callback(k, w):
        if snapshot_stride > 0 and k % snapshot_stride == 0:
            write_trajectory(nlp.node_trajectory(w), snap_dir / f"iter_{k:04d}.csv",
                             {**extra, "iteration": k})

    report = solve(nlp, g.w, cfg.solver, callback)
    (out / "solve.log").write_text("\n".join(report.log) + "\n", encoding="utf-8")
    sol = nlp.solution_trajectory(report.w)
    write_trajectory(sol, out / "solution.csv", {**extra, "status": report.status})
    S, U, T = nlp.unpack(report.w)
    node_abs, node_error = rollout_node_error(nlp, report.w, sol)
    guess_power = mean_power(g.trajectory)
    metrics = compute_metrics(sol)
    _write_json(out / "metrics.json", _envelope(
        cfg, "optimize", status=report.status, message=report.message,
        objective=report.objective, violation=report.violation, kkt=report.kkt,
        iterations=report.iterations, inner_iterations=report.inner_iterations,
        wall_time=report.wall_time, T=T, rollout_node_error=node_error,
        rollout_node_error_abs=node_abs,
        guess_mean_power=guess_power,
        power_ratio=metrics.mean_power / guess_power if guess_power else None,
        P_loyd=loyd_power(p), metrics=metrics.to_dict()))
    _write_json(out / "solution.json", _envelope(cfg, "optimize", w=report.w, T=T,
                                                 plan=g.plan.to_dict()))
    print(f"solver: {report.status} after {report.iterations} iterations "
          f"(violation {report.violation:.3e}, kkt {report.kkt:.3e}, "
          f"{report.wall_time:.1f} s)")
    print(f"mean power {metrics.mean_power:.6g} W (guess {guess_power:.6g} W), "
          f"eta_Loyd {metrics.eta_loyd:.4f}")
    return EXIT_OK if report.converged else EXIT_SOLVER


def cmd_metrics(cfg: Optional[RunConfig], out: Optional[Path], path: str) -> int:
    traj = read_trajectory(path)
    if cfg is not None:
        traj.params = cfg.params
    m = compute_metrics(traj).to_dict()
    payload = {"format_version": OUTPUT_VERSION, "quatkite_version": __version__,
               "command": "metrics", "trajectory": str(path),
               "params": traj.params.to_dict(), "metrics": m}
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    if out is not None:
        (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quatkite", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory (default: config 'out' or '.')")
        sp.add_argument("--threads", type=int, default=1,
                        help="threads for shooting-cell evaluation (default 1)")

    sp = sub.add_parser("simulate", help="integrate the Euler-angle or quaternion model")
    common(sp)
    sp.add_argument("--model", choices=("quaternion", "euler"), default="quaternion")
    sp.add_argument("--scenario", default="singularity-demo",
                    help="'singularity-demo', 'equilibrium' or a trajectory CSV to replay")
    sp = sub.add_parser("guess", help="synthesize the initial pumping cycle")
    common(sp)
    sp = sub.add_parser("transcribe", help="dump the NLP built around the guess")
    common(sp)
    sp = sub.add_parser("optimize", help="optimize the pumping cycle")
    common(sp)
    sp.add_argument("--snapshot-stride", type=int, default=0,
                    help="write the iterate every N outer iterations (0: off)")
    sp = sub.add_parser("metrics", help="power metrics of a trajectory file")
    common(sp)
    sp.add_argument("trajectory", help="trajectory CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out_arg = args.out or cfg.out
        out = Path(out_arg) if out_arg else Path(".")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.model, args.scenario)
        if args.command == "guess":
            return cmd_guess(cfg, out, args.threads)
        if args.command == "transcribe":
            return cmd_transcribe(cfg, out, args.threads)
        if args.command == "optimize":
            if args.snapshot_stride < 0:
                raise ConfigError("--snapshot-stride must be >= 0")
            return cmd_optimize(cfg, out, args.threads, args.snapshot_stride)
        return cmd_metrics(cfg if args.config else None,
                           out if (args.out or cfg.out) else None, args.trajectory)
    except (ConfigError, TrajectoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
