"""结果文件：轨迹表、迭代历史、隶属度审计与 npz 原始数组。

CSV 以 # 开头的注释行为文件头，数值统一用 %.17g 写出，保证双精度可逆。
"""
import io
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from collocation import HpGrid
from errors import TrajectoryFileError
from geometry import ChartKind, ManifoldChart, chart_from_description
from models import ProblemDefinition, ReferenceTrajectory, SolveResult

_log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
STATE_PREFIX = "state:"
CONTROL_PREFIX = "control:"
INDEX_COLUMNS = ["segment", "node", "time"]


def atomic_write_text(path, text: str) -> Path:
    """先写同目录临时文件，再 os.replace"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _csv_text(header: Dict[str, str], frame: pd.DataFrame) -> str:
    buf = io.StringIO()
    for key, value in header.items():
        buf.write(f"# {key}: {value}\n")
    frame.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return buf.getvalue()


def _labels(labels: Optional[List[str]], prefix: str, size: int) -> List[str]:
    if labels is None or len(labels) != size:
        labels = [f"{prefix[:-1]}_{j}" for j in range(size)]
    return [prefix + name for name in labels]


def trajectory_frame(problem: ProblemDefinition, ref: ReferenceTrajectory, grid: HpGrid) -> pd.DataFrame:
    """每个节点一行：段号、节点号、物理时间、状态与控制的环境坐标"""
    N, p = ref.N, ref.p
    times = grid.node_times(ref.sigma)
    frame = pd.DataFrame({
        "segment": np.repeat(np.arange(N), p + 1),
        "node": np.tile(np.arange(p + 1), N),
        "time": times.ravel(),
    })
    states = ref.states.reshape(N * (p + 1), -1)
    controls = ref.controls.reshape(N * (p + 1), -1)
    state_cols = _labels(problem.state_labels, STATE_PREFIX, states.shape[1])
    control_cols = _labels(problem.control_labels, CONTROL_PREFIX, controls.shape[1])
    return pd.concat([
        frame,
        pd.DataFrame(states, columns=state_cols),
        pd.DataFrame(controls, columns=control_cols),
    ], axis=1)


def write_trajectory(path, problem: ProblemDefinition, result: SolveResult, grid: HpGrid) -> Path:
    ref = result.reference
    header = {
        "problem": problem.name,
        "status": result.status.value + ("" if result.status.value == "Converged" else " (partial)"),
        "sigma": FLOAT_FORMAT % ref.sigma,
        "state_blocks": ref.state_chart.describe(),
        "control_blocks": ref.control_chart.describe(),
        "units": "time [Ut]; state and control columns in ambient coordinates",
    }
    return atomic_write_text(path, _csv_text(header, trajectory_frame(problem, ref, grid)))


HISTORY_COLUMNS = {
    "iteration": "iteration index from 1",
    "status": "conic solver status",
    "objective": "subproblem objective",
    "penalty_virtual": "weighted l1 virtual-control penalty",
    "penalty_slack": "weighted constraint-slack penalty",
    "penalty_trust": "weighted trust-region penalty",
    "max_defect": "max integration defect of the new reference [state units]",
    "step_state": "max node norm of the state step eta [chart units]",
    "step_control": "max node norm of the control step xi [chart units]",
    "step_sigma": "|final-time step| [Ut]",
    "sigma": "final time [Ut]",
    "max_virtual_control": "max |nu|",
    "max_norm_violation": "max |norm - 1| over manifold blocks",
    "wall_time": "subproblem wall time [s]",
}


def write_history(path, result: SolveResult) -> Path:
    rows = [record.model_dump() for record in result.history]
    frame = pd.DataFrame(rows, columns=list(HISTORY_COLUMNS))
    header = {"status": result.status.value}
    header.update({f"column {name}": text for name, text in HISTORY_COLUMNS.items()})
    if result.failure_iteration is not None:
        header["failure"] = f"iteration {result.failure_iteration}: {result.failure_detail}"
    return atomic_write_text(path, _csv_text(header, frame))


def _block_columns(chart: ManifoldChart, prefix: str) -> List[Tuple[str, slice]]:
    out = []
    for leaf, sa, _ in chart.leaves():
        if leaf.kind != ChartKind.EUCLIDEAN:
            out.append((f"{prefix}{leaf.kind.value}:{sa.start}", sa))
    return out


def norm_audit(index: pd.DataFrame, states: np.ndarray, controls: np.ndarray,
               state_chart: ManifoldChart, control_chart: ManifoldChart) -> pd.DataFrame:
    """逐节点 |‖·‖ − 1|，每个非欧氏块一列"""
    audit = index[INDEX_COLUMNS].reset_index(drop=True).copy()
    for values, chart, prefix in ((states, state_chart, STATE_PREFIX), (controls, control_chart, CONTROL_PREFIX)):
        for name, sa in _block_columns(chart, prefix):
            audit[name] = np.abs(np.linalg.norm(values[:, sa], axis=1) - 1.0)
    return audit


def audit_summary(audit: pd.DataFrame) -> Dict[str, Dict[str, float]]:
    blocks = [c for c in audit.columns if c not in INDEX_COLUMNS]
    return {name: {"max": float(audit[name].max()), "mean": float(audit[name].mean())} for name in blocks}


def write_audit(path, audit: pd.DataFrame) -> Path:
    header = {"units": "per-node unit-norm violation |norm - 1|"}
    if len(audit.columns) == len(INDEX_COLUMNS):
        header["note"] = "no manifold blocks"
    return atomic_write_text(path, _csv_text(header, audit))


def write_npz(path, problem: ProblemDefinition, result: SolveResult, grid: HpGrid) -> Path:
    """与 CSV 同样先写临时文件再替换，中断时不留半个 npz"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ref = result.reference
    history = pd.DataFrame([record.model_dump() for record in result.history], columns=list(HISTORY_COLUMNS))
    arrays = {f"history_{name}": history[name].to_numpy(dtype=float) for name in history.columns if name != "status"}
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".npz", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(
                fh,
                states=ref.states,
                controls=ref.controls,
                sigma=np.array(ref.sigma),
                node_times=grid.node_times(ref.sigma),
                state_blocks=np.array(ref.state_chart.describe()),
                control_blocks=np.array(ref.control_chart.describe()),
                problem=np.array(problem.name),
                **arrays,
            )
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


# ---------------------------------------------------------------------------
# 读取
# ---------------------------------------------------------------------------

class TrajectoryTable:
    """从轨迹文件重建的数据，不依赖求解时的内存状态"""

    def __init__(self, header: Dict[str, str], frame: pd.DataFrame):
        self.header = header
        self.frame = frame
        self.state_chart = chart_from_description(header["state_blocks"])
        self.control_chart = chart_from_description(header["control_blocks"])
        self.state_columns = [c for c in frame.columns if c.startswith(STATE_PREFIX)]
        self.control_columns = [c for c in frame.columns if c.startswith(CONTROL_PREFIX)]
        if len(self.state_columns) != self.state_chart.ambient_dim:
            raise TrajectoryFileError(
                f"header declares {self.state_chart.ambient_dim} state columns, found {len(self.state_columns)}")
        if len(self.control_columns) != self.control_chart.ambient_dim:
            raise TrajectoryFileError(
                f"header declares {self.control_chart.ambient_dim} control columns, found {len(self.control_columns)}")

    @property
    def states(self) -> np.ndarray:
        return self.frame[self.state_columns].to_numpy(dtype=float)

    @property
    def controls(self) -> np.ndarray:
        return self.frame[self.control_columns].to_numpy(dtype=float)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    def audit(self) -> pd.DataFrame:
        return norm_audit(self.frame, self.states, self.controls, self.state_chart, self.control_chart)


def _read_header(text: str) -> Dict[str, str]:
    header = {}
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        key, sep, value = line[1:].partition(":")
        if sep:
            header[key.strip()] = value.strip()
    return header


def read_trajectory(path) -> TrajectoryTable:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise TrajectoryFileError(f"trajectory file not found: {path}")
    header = _read_header(text)
    for key in ("state_blocks", "control_blocks"):
        if key not in header:
            raise TrajectoryFileError(f"{path}: header lacks '{key}'")

    n_comment = sum(1 for line in text.splitlines() if line.startswith("#"))
    try:
        frame = pd.read_csv(io.StringIO(text), comment="#", skip_blank_lines=True, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        match = re.search(r"line (\d+)", str(exc))
        # 解析器行号含列名行，去掉后即数据行号
        row = int(match.group(1)) - 1 - n_comment if match else None
        raise TrajectoryFileError(f"{path}: {exc}", row=row)

    missing = [c for c in INDEX_COLUMNS if c not in frame.columns]
    if missing:
        raise TrajectoryFileError(f"{path}: missing columns {missing}")
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.argmax(bad)) + 1
        raise TrajectoryFileError(f"{path}: non-numeric or missing value", row=row)
    numeric[["segment", "node"]] = numeric[["segment", "node"]].astype(int)

    # 段内物理时间严格递增
    for _, seg in numeric.groupby("segment", sort=False):
        steps = np.diff(seg["time"].to_numpy())
        if np.any(steps <= 0):
            row = int(seg.index[int(np.argmax(steps <= 0)) + 1]) + 1
            raise TrajectoryFileError(f"{path}: time not increasing within segment", row=row)
    try:
        return TrajectoryTable(header, numeric)
    except TrajectoryFileError as exc:
        raise TrajectoryFileError(f"{path}: {exc.detail}")
    except ValueError as exc:
        raise TrajectoryFileError(f"{path}: bad block description ({exc})")


PLOT_QUANTITIES = ("trajectory3d", "qnorm", "udirnorm", "mass", "thrust")


def plot_table(table: TrajectoryTable, quantity: str) -> pd.DataFrame:
    """轨迹文件派生的绘图列"""
    time = table.column("time")
    if quantity == "trajectory3d":
        cols = [STATE_PREFIX + name for name in ("r_x", "r_y", "r_z")]
        _require(table, cols)
        return pd.DataFrame({name[len(STATE_PREFIX):]: table.column(name) for name in cols})
    if quantity in ("qnorm", "udirnorm"):
        kind, chart, prefix = (
            (ChartKind.QUATERNION, table.state_chart, STATE_PREFIX) if quantity == "qnorm"
            else (ChartKind.SPHERE, table.control_chart, CONTROL_PREFIX)
        )
        values = table.states if prefix == STATE_PREFIX else table.controls
        for leaf, sa, _ in chart.leaves():
            if leaf.kind == kind:
                violation = np.abs(np.linalg.norm(values[:, sa], axis=1) - 1.0)
                return pd.DataFrame({"time": time, f"{quantity}_violation": violation})
        raise TrajectoryFileError(f"trajectory has no {kind.value} block for '{quantity}'")
    if quantity == "mass":
        _require(table, [STATE_PREFIX + "m"])
        return pd.DataFrame({"time": time, "m": table.column(STATE_PREFIX + "m")})
    if quantity == "thrust":
        _require(table, [CONTROL_PREFIX + "T_mag"])
        return pd.DataFrame({"time": time, "T_mag": table.column(CONTROL_PREFIX + "T_mag")})
    raise ValueError(quantity)


def _require(table: TrajectoryTable, columns: List[str]) -> None:
    missing = [c for c in columns if c not in table.frame.columns]
    if missing:
        raise TrajectoryFileError(f"trajectory lacks columns {missing}")


def write_plot_table(path, frame: pd.DataFrame, quantity: str) -> Path:
    return atomic_write_text(path, _csv_text({"quantity": quantity}, frame))
