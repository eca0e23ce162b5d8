"""Command-line interface.

Exit codes: 0 success, 2 mathematically meaningful rejection (a target that
fails a reachability test, a matrix outside GL+, a plan that fails
verification), 1 operational error (I/O, malformed or schema-invalid input).
"""

import argparse
import csv
import json
import math
import sys

import jsonschema
import numpy as np

from . import __version__
from .diffeo import BUILTIN_MAPS, DiffeoTask, builtin_map, feedback_eval
from .errors import ConditionNotMet, NotInGLPlusError, SteeringError
from .factorizer import factorization_report, near_identity_factorize, spd_cone_factorize
from .planner import (
    MODES,
    CovarianceTask,
    SteeringTask,
    dumps_deterministic,
    plan,
    schedule_from_dict,
    schedule_to_dict,
)
from .segment import TAG_CONE, TAG_NONE, TAG_NORM, check_cone_condition, check_norm_condition
from .simverify import (
    DEFAULT_STEPS,
    DEFAULT_TERMINAL_TOL,
    propagate_swarm,
    propagate_transition,
    verify,
    write_swarm_csv,
    write_transition_csv,
)
from .sysmod import (
    GramianEvaluator,
    LinearEnsemble,
    gramian_ratio,
    kalman_rank_ok,
    periodize,
    periodized_with_gain,
)

EXIT_OK, EXIT_ERROR, EXIT_REJECTED = 0, 1, 2

_MATRIX = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

SYSTEM_SCHEMA = {
    "type": "object",
    "properties": {"A": _MATRIX, "B": _MATRIX, "t_s": _POSITIVE, "K_c": _MATRIX},
    "required": ["A", "B"],
    "additionalProperties": False,
}

TASK_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": 1},
        "system": SYSTEM_SCHEMA,
        "mode": {"enum": list(MODES)},
        "target": _MATRIX,
        "Phi_in": _MATRIX,
        "Phi_fn": _MATRIX,
        "X_in": _MATRIX,
        "X_fn": _MATRIX,
        "Sigma_in": _MATRIX,
        "Sigma_fn": _MATRIX,
        "t_fn": _POSITIVE,
        "t_s": _POSITIVE,
        "factorization": {"enum": ["conjugate", "sandwich"]},
        "tolerances": {
            "type": "object",
            "properties": {
                "terminal_tol": _POSITIVE,
                "steps_per_segment": {"type": "integer", "minimum": 100},
                "grid_points": {"type": "integer", "minimum": 16},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"plan": {"type": "string"}, "report": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "required": ["schema_version", "system", "mode"],
    "additionalProperties": False,
}


class CliError(Exception):
    """Operational failure reported with exit code 1."""


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON: {exc}") from exc


def _validate(data, schema, what):
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        raise CliError(f"{what} failed schema validation: {exc.message}") from exc


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from exc


def load_system(data):
    """``(LinearEnsemble, t_s or None, K_c or None)`` from a system dictionary."""
    system = LinearEnsemble.from_dict(data)
    K_c = np.array(data["K_c"], dtype=float) if "K_c" in data else None
    return system, data.get("t_s"), K_c


def task_from_dict(data):
    """Build a steering or covariance task from a schema-valid task dictionary."""
    system, sys_t_s, K_c = load_system(data["system"])
    mode = data["mode"]
    given = [k for k in ("target", "Phi_fn", "X_fn", "Sigma_fn") if k in data]
    expected = "Sigma_fn" if mode == "covariance" else None
    if len(given) != 1 or (expected is not None and given != [expected]) or (
            expected is None and given == ["Sigma_fn"]):
        raise CliError("give exactly one of target, Phi_fn, X_in/X_fn "
                       "(or Sigma_in/Sigma_fn for covariance mode)")
    t_fn = data.get("t_fn")
    if mode == "covariance":
        if "Sigma_in" not in data or t_fn is None:
            raise CliError("covariance mode needs Sigma_in, Sigma_fn and t_fn")
        return CovarianceTask(system, np.array(data["Sigma_in"], dtype=float),
                              np.array(data["Sigma_fn"], dtype=float), t_fn, K_c=K_c)
    kwargs = {"mode": mode, "t_fn": t_fn, "t_s": data.get("t_s", sys_t_s), "K_c": K_c,
              "factorization": data.get("factorization", "conjugate")}
    if "target" in data:
        return SteeringTask(system, np.array(data["target"], dtype=float), **kwargs)
    if "X_fn" in data:
        if "X_in" not in data:
            raise CliError("X_fn needs X_in")
        return SteeringTask.from_arrangements(system, data["X_in"], data["X_fn"], **kwargs)
    if "Phi_fn" in data:
        Phi_in = data.get("Phi_in", np.eye(system.n).tolist())
        return SteeringTask.from_transitions(system, Phi_in, data["Phi_fn"], **kwargs)
    raise CliError(f"mode {mode!r} needs a target")


def _tolerances(args, defaults=None):
    defaults = defaults or {}
    return {
        "terminal_tol": args.terminal_tol if args.terminal_tol is not None
        else defaults.get("terminal_tol", DEFAULT_TERMINAL_TOL),
        "steps_per_segment": args.steps_per_segment if args.steps_per_segment is not None
        else defaults.get("steps_per_segment", DEFAULT_STEPS),
        "grid_points": args.grid_points if args.grid_points is not None
        else defaults.get("grid_points", 512),
    }


def cmd_plan(args):
    data = _read_json(args.task)
    _validate(data, TASK_SCHEMA, args.task)
    task = task_from_dict(data)
    schedule = plan(task)
    out = args.output or data.get("output", {}).get("plan")
    _write_text(out, dumps_deterministic(schedule_to_dict(schedule)))
    if args.verify:
        tol = _tolerances(args, data.get("tolerances"))
        report = verify(schedule, **tol)
        _write_text(data.get("output", {}).get("report") or "-",
                    dumps_deterministic(report.to_dict()))
        if not report.passed:
            return EXIT_REJECTED
    return EXIT_OK


def _load_plan(path):
    data = _read_json(path)
    if not isinstance(data, dict) or data.get("kind") != "gain_schedule":
        raise CliError(f"{path} is not a plan file")
    try:
        return schedule_from_dict(data)
    except (KeyError, TypeError) as exc:
        raise CliError(f"{path}: incomplete plan ({exc})") from exc


def cmd_verify(args):
    schedule = _load_plan(args.plan)
    report = verify(schedule, **_tolerances(args))
    _write_text(args.output, dumps_deterministic(report.to_dict()))
    return EXIT_OK if report.passed else EXIT_REJECTED


def read_points_csv(path, n):
    """Particle coordinates, one particle per row; a non-numeric header row is skipped."""
    rows = []
    try:
        with open(path, newline="") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    if i == 0:
                        continue
                    raise CliError(f"{path}: non-numeric entry on line {i + 1}") from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise CliError(f"{path}: no particles")
    if any(len(r) != n for r in rows):
        raise CliError(f"{path}: every row must have {n} coordinates")
    return np.array(rows).T


PLOT_SCRIPT = '''"""Plot particle paths written by `collective-steer simulate`."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

paths = defaultdict(list)
with open(sys.argv[1] if len(sys.argv) > 1 else {csv_path!r}) as fh:
    for row in csv.DictReader(fh):
        paths[row["particle_id"]].append((float(row["x_1"]), float(row["x_2"])))
for pid, pts in paths.items():
    xs, ys = zip(*pts)
    plt.plot(xs, ys, label="particle " + pid)
    plt.plot(xs[0], ys[0], "o", color="k")
    plt.plot(xs[-1], ys[-1], "s", color="k")
plt.xlabel("x_1")
plt.ylabel("x_2")
plt.legend()
plt.axis("equal")
plt.show()
'''


def _rk4_feedback_path(task, X, steps):
    h = task.t_s / steps
    A_c, B = task.system.A_c, task.system.base.B
    times, states = [0.0], [X]
    for j in range(steps):
        t = j * h

        def f(x, s):
            return A_c @ x + B @ feedback_eval(task, x, s)

        k1 = f(X, t)
        k2 = f(X + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(X + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(X + h * k3, min(t + h, task.t_s))
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        times.append(min(t + h, task.t_s))
        states.append(X)
    return np.array(times), np.array(states)


def cmd_simulate(args):
    steps = args.steps_per_segment or DEFAULT_STEPS
    if args.plan is not None:
        schedule = _load_plan(args.plan)
        n = schedule.n
        if args.swarm:
            X_in = read_points_csv(args.swarm, n)
            times, X = propagate_swarm(schedule, X_in, steps)
        else:
            times, X = propagate_transition(schedule, steps)
    else:
        if args.system is None or args.map is None:
            raise CliError("simulate needs a plan file, or --system together with --map")
        sys_data = _read_json(args.system)
        _validate(sys_data, SYSTEM_SCHEMA, args.system)
        system, t_s, K_c = load_system(sys_data)
        t_s = t_s if t_s is not None else 1.0
        periodized = (periodized_with_gain(system, K_c, t_s) if K_c is not None
                      else periodize(system, t_s))
        param = json.loads(args.map_param) if args.map_param is not None else None
        task = DiffeoTask(periodized, builtin_map(args.map, system.n, param),
                          probe_box=args.probe_box)
        if not args.swarm:
            raise CliError("feedback rearrangement needs --swarm")
        X_in = read_points_csv(args.swarm, system.n)
        times, X = _rk4_feedback_path(task, X_in, steps)
    out = args.output
    if out is None:
        raise CliError("simulate needs --output")
    if args.swarm:
        write_swarm_csv(out, times, X)
    else:
        write_transition_csv(out, times, X)
    if args.plot_script:
        _write_text(args.plot_script, PLOT_SCRIPT.format(csv_path=out))
    return EXIT_OK


def _matrix_from_file(path, key="matrix"):
    data = _read_json(path)
    if isinstance(data, dict):
        if key not in data:
            raise CliError(f"{path}: expected a matrix or an object with {key!r}")
        data = data[key]
    _validate(data, _MATRIX, path)
    return np.array(data, dtype=float)


def _gramian_from_system(path, t_s):
    data = _read_json(path)
    _validate(data, SYSTEM_SCHEMA, path)
    system, sys_t_s, K_c = load_system(data)
    t_s = t_s if t_s is not None else sys_t_s
    if t_s is None:
        raise CliError("a period is needed: pass --t-s or put t_s in the system file")
    periodized = (periodized_with_gain(system, K_c, t_s) if K_c is not None
                  else periodize(system, t_s))
    return GramianEvaluator(periodized)


def cmd_factor(args):
    target = _matrix_from_file(args.matrix)
    n = target.shape[0]
    if args.W is not None:
        W = _matrix_from_file(args.W)
    elif args.system is not None:
        W = _gramian_from_system(args.system, args.t_s).W_end
    else:
        W = None
    if args.mode == "spd-cone":
        fact = spd_cone_factorize(target, W if W is not None else np.eye(n),
                                  strategy=args.strategy)
        W_used = fact.W
    else:
        if args.epsilon is not None:
            eps = args.epsilon
        elif W is not None:
            lam = np.linalg.eigvalsh(W)
            eps = math.sqrt(lam[0] / lam[-1]) * (1.0 - 1e-6)
        else:
            raise CliError("near-identity mode needs --epsilon, --W or --system")
        fact = near_identity_factorize(target, eps)
        W_used = W
    out = fact.to_dict()
    out.update(factorization_report(fact, target, W_used))
    if W_used is not None:
        out["condition_tags"] = [
            TAG_CONE if check_cone_condition(F, W_used)
            else TAG_NORM if check_norm_condition(F, W_used) else TAG_NONE
            for F in fact.factors]
    _write_text(args.output, dumps_deterministic(out))
    print(f"product error: {out['product_error']:.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_gram(args):
    data = _read_json(args.system)
    _validate(data, SYSTEM_SCHEMA, args.system)
    system = LinearEnsemble.from_dict(data)
    out = {"kalman_rank_ok": kalman_rank_ok(system)}
    if out["kalman_rank_ok"]:
        g = _gramian_from_system(args.system, args.t_s)
        out.update({
            "t_s": g.t_s,
            "K_c": g.system.K_c,
            "periodicity_residual": g.system.periodicity_residual,
            "W": g.W_end,
        })
        if args.at:
            out["ratios"] = [{"t": t, "ratio": gramian_ratio(g, t)} for t in args.at]
    _write_text(args.output, dumps_deterministic(out))
    return EXIT_OK if out["kalman_rank_ok"] else EXIT_REJECTED


def _add_tolerance_flags(p):
    p.add_argument("--terminal-tol", type=float, default=None,
                   help=f"relative terminal error allowed (default {DEFAULT_TERMINAL_TOL:g})")
    p.add_argument("--steps-per-segment", type=int, default=None,
                   help=f"RK4 steps per leg (default {DEFAULT_STEPS})")
    p.add_argument("--grid-points", type=int, default=None,
                   help="closed-form samples per leg for determinant checks (default 512)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="collective-steer",
        description="Steer identical linear agents with one broadcast time-varying gain.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="synthesize a gain schedule from a task file")
    p.add_argument("task")
    p.add_argument("-o", "--output", help="plan file (default: task output.plan or stdout)")
    p.add_argument("--verify", action="store_true", help="also simulate and report")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="simulate a plan file and report")
    p.add_argument("plan")
    p.add_argument("-o", "--output", help="report file (default stdout)")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="write trajectories as CSV")
    p.add_argument("plan", nargs="?", help="plan file")
    p.add_argument("--swarm", help="CSV of initial particle states, one per row")
    p.add_argument("--system", help="system file for feedback rearrangement (with --map)")
    p.add_argument("--map", choices=BUILTIN_MAPS, help="builtin rearrangement map")
    p.add_argument("--map-param", help="JSON parameter of the map (vector, matrix or scalar)")
    p.add_argument("--probe-box", type=float, default=1.0,
                   help="half-width of the box used to check the contraction")
    p.add_argument("-o", "--output", help="trajectory CSV")
    p.add_argument("--plot-script", help="also write a matplotlib script for the CSV")
    p.add_argument("--steps-per-segment", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("factor", help="factor a matrix into steerable pieces")
    p.add_argument("matrix", help="JSON matrix (or object with key 'matrix')")
    p.add_argument("--mode", choices=("spd-cone", "near-identity"), default="spd-cone")
    p.add_argument("--strategy", choices=("conjugate", "sandwich"), default="conjugate")
    p.add_argument("--W", help="JSON SPD conjugating matrix")
    p.add_argument("--system", help="system file; W is its period Grammian")
    p.add_argument("--t-s", type=float, default=None, help="period for --system")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_factor)

    p = sub.add_parser("gram", help="periodizing gain and Grammian of a system")
    p.add_argument("system")
    p.add_argument("--t-s", type=float, default=None)
    p.add_argument("--at", type=float, nargs="*", help="times for W_t W_{t_s}^{-1}")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gram)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConditionNotMet, NotInGLPlusError) as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except (CliError, SteeringError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
