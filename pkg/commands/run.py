import argparse
import logging
from pathlib import Path
from typing import Dict, Optional

from pydantic import ValidationError

import exports
import scvx
from collocation import make_grid
from config import load_key_values
from errors import EXIT_CONVERGED, EXIT_MAX_ITERS, EXIT_SUBPROBLEM_FAILURE, ConfigError
from models import SolveStatus
from problems import build_problem
from schemas import RunConfig

_log = logging.getLogger(__name__)

EXIT_CODES = {
    SolveStatus.CONVERGED: EXIT_CONVERGED,
    SolveStatus.MAX_ITERS: EXIT_MAX_ITERS,
    SolveStatus.SUBPROBLEM_FAILURE: EXIT_SUBPROBLEM_FAILURE,
}

# 可由命令行覆盖的 RunConfig 字段
OVERRIDES = ("problem", "segments", "order", "epsilon", "max_iters", "solver", "workers",
             "output_dir", "formats", "seed")


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """配置文件在前，命令行覆盖在后；未知键直接报错"""
    values: Dict[str, object] = dict(load_key_values(path)) if path is not None else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        source = f"{path}: " if path is not None else ""
        raise ConfigError(f"{source}invalid run configuration: {exc}")


def run_command(config: RunConfig) -> int:
    problem = build_problem(config.problem, seed=config.seed)
    grid = make_grid(config.segments, config.order, problem.t0, problem.tf)
    settings = config.scvx_settings()
    _log.info("problem %s: N=%d p=%d, solver %s", problem.name, grid.N, grid.p, settings.solver.solver)

    initial = scvx.initial_reference(problem, grid)
    result = scvx.run(problem, initial, grid, settings)
    ref = result.reference

    out = Path(config.output_dir)
    exports.write_trajectory(out / "trajectory.csv", problem, result, grid)
    exports.write_history(out / "history.csv", result)
    table = exports.trajectory_frame(problem, ref, grid)
    audit = exports.norm_audit(table, ref.states.reshape(-1, ref.states.shape[-1]),
                               ref.controls.reshape(-1, ref.controls.shape[-1]),
                               ref.state_chart, ref.control_chart)
    exports.write_audit(out / "audit.csv", audit)
    if "npz" in config.formats:
        exports.write_npz(out / "result.npz", problem, result, grid)
    if result.status != SolveStatus.CONVERGED:
        _log.warning("artifacts in %s are partial (%s)", out, result.status.value)

    print(summary_line(problem.name, result))
    return EXIT_CODES[result.status]


def summary_line(name: str, result) -> str:
    history = result.history
    norm_violation = max([r.max_norm_violation for r in history] + [max(result.reference.membership_errors())])
    parts = [
        f"status={result.status.value}",
        f"iterations={len(history)}",
        f"objective={history[-1].objective:.10g}" if history else "objective=nan",
        f"max_norm_violation={norm_violation:.3e}",
        f"max_virtual_control={history[-1].max_virtual_control:.3e}" if history else "max_virtual_control=nan",
    ]
    if name == "landing":
        parts.append(f"terminal_mass={exports.FLOAT_FORMAT % result.reference.states[-1, -1, 0]}")
    if result.failure_detail:
        parts.append(f"failure=iteration {result.failure_iteration}")
    return " ".join(parts)


def _handle(args: argparse.Namespace) -> int:
    overrides = {name: getattr(args, name) for name in OVERRIDES}
    config = load_run_config(args.config, overrides)
    return run_command(config)


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="solve a problem and export trajectory, history and audit")
    parser.add_argument("problem", nargs="?", help="landing | attitude-toy | lq-euclidean | path to a .conf file")
    parser.add_argument("--config", type=Path, help="flat key = value run configuration")
    parser.add_argument("-N", "--segments", type=int)
    parser.add_argument("-p", "--order", type=int)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--max-iters", dest="max_iters", type=int)
    parser.add_argument("--solver")
    parser.add_argument("--workers", type=int)
    parser.add_argument("-o", "--output-dir", dest="output_dir", type=Path)
    parser.add_argument("--formats", help="comma separated subset of csv,npz")
    parser.add_argument("--seed", type=int)
    parser.set_defaults(handler=_handle)
