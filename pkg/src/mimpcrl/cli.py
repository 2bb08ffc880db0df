"""Command line front end.

``train`` runs the learning loop and persists a plot-ready CSV artifact,
``solve`` answers a single policy query, ``gradcheck`` compares every
analytic derivative against finite differences of re-solves, and
``evaluate`` estimates the closed-loop cost of the configured
parameters.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import ScalarValueAtlas
from .config import RunConfig, dumps, load_config, loads
from .critic import fit_weights
from .ipsolver import PinnedProfileNlp, solve_fixed_profile
from .minlp import integer_value_table
from .ocp import THETA_LABELS, OcpSpec, with_terminal_constraint
from .plant import EvaluationConfig, closed_loop_performance
from .policy import (
    integer_distribution,
    nominal_continuous_input,
    perturbation_stream,
    standard_normal,
)
from .sens import near_active_set_change, solution_sensitivity, value_gradient
from .trainer import TrainSettings, TrainingError, TrainingLog, collect_batch, hybrid_gradient, train

# stream tags 1-4 belong to evaluation and training
_GRADCHECK_STREAM = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimpcrl",
        description="Mixed-integer MPC policies trained by actor-critic learning.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, help="INI config file; built-in defaults when omitted"
    )
    common.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser(
        "train", parents=[common], help="run the learning loop and persist the artifact"
    )
    p.add_argument("--out", type=Path, help="artifact directory (default: output_dir)")
    p.add_argument("--steps", type=int, help="override the configured step count")

    p = sub.add_parser("solve", parents=[common], help="query the policy at one state")
    p.add_argument("--state", type=float, default=0.0)
    p.add_argument(
        "--theta",
        action="append",
        default=[],
        metavar="NAME=VALUE",
        help="parameter override, repeatable",
    )
    p.add_argument(
        "--sweep", type=int, metavar="N", help="export an N-point state sweep as CSV"
    )
    p.add_argument("--sweep-low", type=float, default=-1.0)
    p.add_argument("--sweep-high", type=float, default=1.0)
    p.add_argument("--out", type=Path, help="directory for sweep.csv")
    p.add_argument(
        "--terminal-upper", type=float, help="add a terminal state upper bound"
    )
    p.add_argument(
        "--terminal-lower", type=float, help="add a terminal state lower bound"
    )

    p = sub.add_parser(
        "gradcheck",
        parents=[common],
        help="check analytic derivatives against finite differences",
    )
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser(
        "evaluate", parents=[common], help="estimate the closed-loop cost"
    )
    p.add_argument("--rollouts", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument(
        "--theta", action="append", default=[], metavar="NAME=VALUE"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.WARNING, format="%(levelname)s: %(message)s"
    )
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    commands = {
        "train": cmd_train,
        "solve": cmd_solve,
        "gradcheck": cmd_gradcheck,
        "evaluate": cmd_evaluate,
    }
    try:
        config = _resolve_config(args)
        return commands[args.command](config, args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3
    except (RuntimeError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = loads("", os.environ)
    updates: dict[str, object] = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        updates["steps"] = args.steps
    if getattr(args, "out", None) is not None:
        updates["output_dir"] = str(args.out)
    updates.update(_theta_overrides(getattr(args, "theta", [])))
    return replace(config, **updates) if updates else config


def _theta_overrides(pairs: list[str]) -> dict[str, float]:
    overrides: dict[str, float] = {}
    for pair in pairs:
        name, sep, raw = pair.partition("=")
        name = name.strip()
        if not sep or name not in THETA_LABELS:
            names = ", ".join(THETA_LABELS)
            raise ValueError(
                f"--theta expects NAME=VALUE with NAME one of {names}; got {pair!r}"
            )
        try:
            overrides[name] = float(raw)
        except ValueError:
            raise ValueError(
                f"--theta {name}: cannot parse {raw.strip()!r} as a float"
            ) from None
    return overrides


# ---------------------------------------------------------------------------
# solve


@dataclass(frozen=True)
class BranchReport:
    first: int
    feasible: bool
    value: float
    first_input: float | None


@dataclass(frozen=True)
class PolicyQuery:
    """Everything one state query prints: branch values, probabilities,
    and the greedy action."""

    state: float
    branches: tuple[BranchReport, ...]
    probabilities: np.ndarray | None
    temperature: float
    chosen: BranchReport | None


def query_policy(
    spec: OcpSpec,
    state: float,
    theta: np.ndarray,
    temperature: float,
    tau_target: float = 1e-9,
    atlas: ScalarValueAtlas | None = None,
) -> PolicyQuery:
    table = integer_value_table(spec, state, theta, atlas=atlas, tau_target=tau_target)
    branches = []
    for entry in table.entries:
        first_input = None
        if entry.feasible:
            first_input = float(
                nominal_continuous_input(
                    spec, state, theta, entry.completion, tau_target, atlas=atlas
                )[0]
            )
        branches.append(
            BranchReport(
                first=entry.first,
                feasible=entry.feasible,
                value=entry.value if entry.feasible else float("inf"),
                first_input=first_input,
            )
        )
    probabilities = None
    chosen = None
    if table.feasible.any():
        probabilities = integer_distribution(table, temperature)
        chosen = branches[int(table.best().first)]
    return PolicyQuery(
        state=state,
        branches=tuple(branches),
        probabilities=probabilities,
        temperature=temperature,
        chosen=chosen,
    )


def _constrained_problem(config: RunConfig, args: argparse.Namespace) -> tuple[OcpSpec, bool]:
    spec = config.problem()
    upper, lower = args.terminal_upper, args.terminal_lower
    if upper is None and lower is None:
        return spec, False
    if upper is None:
        # inactive placeholder; the solver needs a finite bound row
        upper = 1e6
    return with_terminal_constraint(spec, upper, lower), True


def cmd_solve(config: RunConfig, args: argparse.Namespace) -> int:
    spec, constrained = _constrained_problem(config, args)
    theta = config.theta()
    atlas = None if constrained else ScalarValueAtlas(spec, theta)

    if args.sweep is not None:
        if args.sweep < 2:
            raise ValueError("--sweep needs at least 2 points")
        if not args.sweep_high > args.sweep_low:
            raise ValueError("--sweep-high must exceed --sweep-low")
        out = Path(args.out) if args.out is not None else Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for state in np.linspace(args.sweep_low, args.sweep_high, args.sweep):
            query = query_policy(
                spec, float(state), theta, config.integer_temperature,
                config.tau_target, atlas,
            )
            off, on = query.branches
            p_on = float(query.probabilities[1]) if query.probabilities is not None else float("nan")
            rows.append(
                [
                    float(state),
                    off.value,
                    on.value,
                    p_on,
                    off.first_input if off.first_input is not None else float("nan"),
                    on.first_input if on.first_input is not None else float("nan"),
                ]
            )
        path = out / "sweep.csv"
        path.write_bytes(
            _csv_bytes(
                ["state", "value_off", "value_on", "probability_on", "input_off", "input_on"],
                rows,
            )
        )
        print(f"wrote {path} ({args.sweep} states)")
        return 0

    query = query_policy(
        spec, args.state, theta, config.integer_temperature, config.tau_target, atlas
    )
    pairs = " ".join(f"{n}={v:g}" for n, v in zip(THETA_LABELS, theta))
    print(f"state {query.state:g}, parameters {pairs}")
    for branch in query.branches:
        if branch.feasible:
            print(
                f"branch i={branch.first}: value {branch.value:.12g}  "
                f"first input {branch.first_input:.9g}"
            )
        else:
            print(f"branch i={branch.first}: infeasible")
    if query.chosen is None:
        print("no feasible branch at this state")
        return 2
    probs = " ".join(
        f"P[i={b.first}]={p:.6g}" for b, p in zip(query.branches, query.probabilities)
    )
    print(f"probabilities (temperature {query.temperature:g}): {probs}")
    print(
        f"deterministic action: i={query.chosen.first}, "
        f"u={query.chosen.first_input:.9g}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    spec = config.problem()
    rollouts = args.rollouts if args.rollouts is not None else config.evaluation_rollouts
    estimate = closed_loop_performance(
        spec,
        config.theta(),
        EvaluationConfig(
            rollouts=rollouts,
            discount=config.discount,
            exploration=config.exploration(),
            seed=config.seed,
            deterministic=args.deterministic,
        ),
    )
    kind = "deterministic" if args.deterministic else "exploring"
    print(
        f"{kind} policy: J = {estimate.mean:.6f} +- {estimate.stderr:.6f} "
        f"({estimate.rollouts} rollouts, horizon {estimate.horizon}, "
        f"discount {estimate.discount:g})"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    settings = config.settings()
    spec = config.problem()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(
        f"training: {settings.steps} steps, batch "
        f"{settings.rollouts}x{settings.rollout_horizon}, seed {settings.seed}, "
        f"artifact {out}"
    )

    def progress(record) -> None:
        chosen = (
            record.gradient.compatible
            if settings.update_mode == "compatible"
            else record.gradient.direct
        )
        print(
            f"step {record.index + 1}/{settings.steps}: "
            f"J {record.performance.mean:.6f} +- {record.performance.stderr:.6f}  "
            f"|g| {np.linalg.norm(chosen):.3e}",
            flush=True,
        )

    try:
        log = train(spec, config.theta(), settings, on_step=progress)
    except TrainingError as err:
        _write_artifact(out, config, settings, spec, err.log)
        print(f"partial artifact persisted to {out}", file=sys.stderr)
        raise
    manifest = _write_artifact(out, config, settings, spec, log)
    first = log.records[0].performance.mean
    last = log.records[-1].performance.mean
    print(
        f"done: J {first:.6f} -> {last:.6f} (ratio {last / first:.4f}); "
        f"artifact hash {manifest['artifact_hash'][:16]}"
    )
    return 0


def _cell(value: object) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _csv_bytes(header: list[str], rows: list[list[object]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return buffer.getvalue().encode("utf-8")


def _trajectory_rows(spec: OcpSpec, settings: TrainSettings, record) -> list[list[object]]:
    # rollout 0 of the step's batch, reproduced exactly from its stream
    # key; the batch container needs more records than parameters, hence
    # the horizon floor
    horizon = max(settings.rollout_horizon, record.theta.size + 1)
    batch = collect_batch(
        spec,
        record.theta,
        settings.exploration,
        rollouts=1,
        horizon=horizon,
        seed=settings.seed,
        stream_key=(record.index,),
        initial_state=settings.initial_state,
        tau_target=settings.tau_target,
        curvature_step=settings.curvature_step,
    )
    rows = []
    for k, rec in enumerate(batch.records[: settings.rollout_horizon]):
        rows.append(
            [
                k,
                rec.state,
                int(rec.sample.action.integer[0]),
                float(rec.sample.action.continuous[0]),
                rec.stage_cost,
                rec.next_state,
            ]
        )
    return rows


def _write_artifact(
    out: Path,
    config: RunConfig,
    settings: TrainSettings,
    spec: OcpSpec,
    log: TrainingLog,
) -> dict:
    """Write the run directory and return its manifest."""
    labels = list(THETA_LABELS)
    files: dict[str, bytes] = {"config.ini": dumps(config).encode("utf-8")}

    rows: list[list[object]] = [[r.index, *r.theta] for r in log.records]
    if log.final_theta is not None:
        rows.append([len(log.records), *log.final_theta])
    files["theta.csv"] = _csv_bytes(["step", *labels], rows)

    rows = [
        [
            r.index,
            r.performance.mean,
            r.performance.stderr,
            r.performance.rollouts,
            r.performance.horizon,
        ]
        for r in log.records
    ]
    files["performance.csv"] = _csv_bytes(
        ["step", "j_mean", "j_stderr", "rollouts", "horizon"], rows
    )

    header = [
        "step",
        *[f"direct_{name}" for name in labels],
        *[f"compatible_{name}" for name in labels],
        "samples",
    ]
    rows = [
        [r.index, *r.gradient.direct, *r.gradient.compatible, r.gradient.samples]
        for r in log.records
    ]
    files["gradients.csv"] = _csv_bytes(header, rows)

    if log.records:
        trajectory_header = [
            "step", "state", "integer", "continuous", "stage_cost", "next_state",
        ]
        for name, record in (
            ("trajectories_first.csv", log.records[0]),
            ("trajectories_last.csv", log.records[-1]),
        ):
            files[name] = _csv_bytes(
                trajectory_header, _trajectory_rows(spec, settings, record)
            )

    hashes = {
        name: hashlib.sha256(data).hexdigest() for name, data in files.items()
    }
    # the run hash identifies the results; config.ini stays out of it
    # because output_dir is the one field that never influences them
    summary = "\n".join(
        f"{name}:{digest}"
        for name, digest in sorted(hashes.items())
        if name != "config.ini"
    )
    manifest = {
        "version": __version__,
        "seed": settings.seed,
        "steps_completed": len(log.records),
        "complete": log.final_theta is not None,
        "files": hashes,
        "artifact_hash": hashlib.sha256(summary.encode("utf-8")).hexdigest(),
    }
    files["manifest.json"] = (
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    ).encode("utf-8")
    for name, data in files.items():
        (out / name).write_bytes(data)
    return manifest


# ---------------------------------------------------------------------------
# gradcheck


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def _scaled_error(got: np.ndarray, oracle: np.ndarray) -> float:
    """Relative error with an absolute floor for near-zero entries.

    Entries whose true value sits at the barrier-residual scale (a fully
    inactive penalty contributes the slack sum, about tau over the
    weight) carry no relative information; the floor turns the check
    into an absolute one at tolerance * floor there.
    """
    got = np.atleast_1d(np.asarray(got, dtype=float))
    oracle = np.atleast_1d(np.asarray(oracle, dtype=float))
    return float(np.max(np.abs(got - oracle) / np.maximum(np.abs(oracle), 1e-3)))


def _resolve(nlp: PinnedProfileNlp, tau_target: float, warm) -> object:
    report = solve_fixed_profile(nlp, tau_target=tau_target, warm_start=warm)
    if report.status == "max_iter" and warm is not None:
        report = solve_fixed_profile(nlp, tau_target=tau_target)
    return report


def _stacked_root(point) -> np.ndarray:
    """Full primal-dual vector, the quantity the theta-jacobian differentiates."""
    return np.concatenate([point.y, point.lam, point.mu])


def _barrier_value(nlp: PinnedProfileNlp, report, tau: float) -> float:
    """Objective plus barrier terms at the fixed-tau root.

    The analytic value gradient is the envelope derivative of THIS
    functional, not of the plain objective; the two differ by
    tau * sum(d log mu), which matters once tau is coarse.
    """
    return report.objective - tau * float(np.sum(np.log(-nlp.ineq(report.point.y))))


def run_derivative_checks(
    config: RunConfig, instances: int = 20, corrupt: float = 0.0
) -> list[CheckResult]:
    """Compare IFT derivatives against central differences of re-solves.

    Near-active-set instances are redrawn: a finite difference across an
    active-set flip does not estimate a derivative of anything.  The
    ``corrupt`` hook shifts the analytic values of the first instance so
    failure detection itself stays testable.
    """
    spec = config.problem()
    rng = perturbation_stream(config.seed, _GRADCHECK_STREAM)
    base = config.theta()
    h = config.fd_step
    # a central difference at step h resolves the complementarity
    # smoothing only when h sits well below its width sqrt(tau); past
    # that, instances inside the transition window must be redrawn
    filter_near_active = h >= 0.1 * np.sqrt(config.tau_target)
    worst = {
        "value_gradient": 0.0,
        "solution_theta_jacobian": 0.0,
        "input_theta_jacobian": 0.0,
        "input_tilt_jacobian": 0.0,
    }

    checked = 0
    attempts = 0
    while checked < instances:
        attempts += 1
        if attempts > 50 * instances:
            raise RuntimeError(
                f"only {checked} of {instances} instances survived the "
                "near-active-set filter; the derivative check cannot finish"
            )
        state = float(rng.uniform(-1.0, 1.0))
        theta = base + 0.05 * standard_normal(rng, base.size)
        theta[3] = max(theta[3], 0.05)
        profile = rng.integers(0, 2, size=(spec.horizon, spec.n_i)).astype(float)

        nlp = PinnedProfileNlp(spec, state, theta, profile)
        report = solve_fixed_profile(nlp, tau_target=config.tau_target)
        if not report.solved:
            continue
        if filter_near_active and near_active_set_change(nlp, report.point):
            continue
        sensitivity = solution_sensitivity(nlp, report.point)
        grad = value_gradient(nlp, report.point)
        z_jac = sensitivity.wrt_theta.copy()
        input_jac = sensitivity.first_input_wrt_theta.copy()
        tilt_jac = sensitivity.first_input_wrt_perturbation.copy()
        if corrupt and checked == 0:
            grad = grad + corrupt
            z_jac = z_jac + corrupt
            input_jac = input_jac + corrupt
            tilt_jac = tilt_jac + corrupt

        fd_grad = np.zeros_like(grad)
        fd_z = np.zeros_like(z_jac)
        fd_input = np.zeros_like(input_jac)
        fd_tilt = np.zeros_like(tilt_jac)
        u0 = nlp.iu(0)
        clean = True
        for j in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            nlp_up = PinnedProfileNlp(spec, state, up, profile)
            nlp_dn = PinnedProfileNlp(spec, state, dn, profile)
            r_up = _resolve(nlp_up, config.tau_target, report.point)
            r_dn = _resolve(nlp_dn, config.tau_target, report.point)
            if not (r_up.solved and r_dn.solved):
                clean = False
                break
            fd_grad[j] = (
                _barrier_value(nlp_up, r_up, config.tau_target)
                - _barrier_value(nlp_dn, r_dn, config.tau_target)
            ) / (2 * h)
            fd_z[:, j] = (_stacked_root(r_up.point) - _stacked_root(r_dn.point)) / (2 * h)
            fd_input[:, j] = (r_up.point.y[u0] - r_dn.point.y[u0]) / (2 * h)
        if clean:
            for j in range(spec.n_u):
                bump = np.zeros(spec.n_u)
                bump[j] = h
                r_up = _resolve(PinnedProfileNlp(spec, state, theta, profile, d=bump), config.tau_target, report.point)
                r_dn = _resolve(PinnedProfileNlp(spec, state, theta, profile, d=-bump), config.tau_target, report.point)
                if not (r_up.solved and r_dn.solved):
                    clean = False
                    break
                fd_tilt[:, j] = (r_up.point.y[u0] - r_dn.point.y[u0]) / (2 * h)
        if not clean:
            continue

        worst["value_gradient"] = max(worst["value_gradient"], _scaled_error(grad, fd_grad))
        worst["solution_theta_jacobian"] = max(worst["solution_theta_jacobian"], _scaled_error(z_jac, fd_z))
        worst["input_theta_jacobian"] = max(worst["input_theta_jacobian"], _scaled_error(input_jac, fd_input))
        worst["input_tilt_jacobian"] = max(worst["input_tilt_jacobian"], _scaled_error(tilt_jac, fd_tilt))
        checked += 1

    results = [CheckResult(name, value, 1e-4) for name, value in worst.items()]
    results.append(_consistency_check(config, spec))
    return results


def _consistency_check(config: RunConfig, spec: OcpSpec) -> CheckResult:
    """Planted-advantage agreement of the two gradient estimators.

    With the true advantage equal to the approximator at some weight
    vector, the fitted estimator must reproduce the direct one up to
    finite-difference arithmetic; the gap is scale-free.
    """
    exploration = config.exploration()
    batch = collect_batch(
        spec,
        config.theta(),
        exploration,
        rollouts=4,
        horizon=10,
        seed=config.seed,
        tau_target=config.tau_target,
        curvature_step=config.curvature_step,
    )
    planted = np.array([0.4, -0.3, 0.2, 0.1, -0.25])

    def advantage_fn(record, action) -> float:
        nominal = record.sample.action.continuous - record.sample.offset
        excess = action.continuous - nominal - record.moments.exploration_bias
        psi = record.score + record.input_jacobian.T @ (
            record.moments.gain_gram @ excess
        ) / exploration.continuous_scale
        return float(planted @ psi)

    advantages = np.array([advantage_fn(r, r.sample.action) for r in batch.records])
    fit = fit_weights(batch.features(), advantages)
    estimate = hybrid_gradient(
        batch, "both", advantage_fn=advantage_fn, fit=fit, fd_step=config.fd_step
    )
    gap = float(
        np.linalg.norm(estimate.direct - estimate.compatible)
        / max(np.linalg.norm(estimate.direct), 1e-12)
    )
    return CheckResult("estimator_consistency", gap, 1e-3)


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> int:
    if args.instances < 1:
        raise ValueError("--instances must be at least 1")
    results = run_derivative_checks(config, args.instances, args.corrupt)
    print(
        f"derivative checks: {args.instances} instances, fd step {config.fd_step:g}, "
        f"tau {config.tau_target:g}"
    )
    for result in results:
        verdict = "pass" if result.passed else "FAIL"
        print(
            f"  {result.name:<24} max scaled error {result.worst:.3e}  "
            f"tolerance {result.tolerance:g}  {verdict}"
        )
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return 2
    print("all checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
