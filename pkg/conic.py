"""规范形式锥规划：线性目标 + 线性等式 + 线性不等式 + 二阶锥，后端可插拔（cvxpy）。

变量按加入顺序连续编号；子问题按段优先、节点其次的顺序加入。
"""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from errors import ArgumentError
from schemas import ConicSolverSettings

_log = logging.getLogger(__name__)

Terms = Sequence[Tuple[np.ndarray, np.ndarray]]


class SolutionStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass(frozen=True)
class SocBlock:
    """‖F z + g‖₂ ≤ h·z + d"""

    F: sp.csr_matrix
    g: np.ndarray
    h: np.ndarray
    d: float


@dataclass(frozen=True)
class ConicProgram:
    num_vars: int
    blocks: Dict[str, np.ndarray]
    c: np.ndarray
    c0: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    b_in: np.ndarray
    cones: Tuple[SocBlock, ...]
    initial_guess: Optional[np.ndarray] = None

    def census(self) -> Dict[str, int]:
        return {
            "variables": self.num_vars,
            "equalities": self.A_eq.shape[0],
            "inequalities": self.A_in.shape[0],
            "cones": len(self.cones),
        }


@dataclass
class ConicSolution:
    status: SolutionStatus
    x: Optional[np.ndarray]
    objective: float
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: Dict[str, object] = field(default_factory=dict)


class ProgramBuilder:
    """逐行累积稀疏矩阵的锥规划构造器"""

    def __init__(self):
        self.num_vars = 0
        self.blocks: Dict[str, np.ndarray] = {}
        self._c: List[Tuple[np.ndarray, np.ndarray]] = []
        self.c0 = 0.0
        self._eq = ([], [], [], [])
        self._in = ([], [], [], [])
        self._cones: List[Tuple[Terms, np.ndarray, Terms, float]] = []

    def add_variable(self, name: str, shape) -> np.ndarray:
        """返回形状为 shape 的变量下标数组"""
        if name in self.blocks:
            raise ArgumentError(f"variable block '{name}' already exists")
        size = int(np.prod(shape))
        idx = np.arange(self.num_vars, self.num_vars + size).reshape(shape)
        self.num_vars += size
        self.blocks[name] = idx
        return idx

    def add_objective(self, idx, coeffs) -> None:
        idx = np.asarray(idx, dtype=int).ravel()
        coeffs = np.broadcast_to(np.asarray(coeffs, dtype=float), idx.shape).copy()
        if not np.all(np.isfinite(coeffs)):
            raise ArgumentError("objective coefficients must be finite")
        self._c.append((idx, coeffs))

    def add_constant(self, value: float) -> None:
        self.c0 += float(value)

    @staticmethod
    def _append(store, terms: Terms, rhs) -> None:
        rows, cols, vals, b = store
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        start = len(b)
        for idx, M in terms:
            idx = np.asarray(idx, dtype=int).ravel()
            M = np.asarray(M, dtype=float).reshape(rhs.size, idx.size)
            r, k = np.nonzero(M)
            rows.append(start + r)
            cols.append(idx[k])
            vals.append(M[r, k])
        b.extend(rhs.tolist())

    def add_equalities(self, terms: Terms, rhs) -> None:
        """Σ M z[idx] = rhs"""
        self._append(self._eq, terms, rhs)

    def add_inequalities(self, terms: Terms, rhs) -> None:
        """Σ M z[idx] ≤ rhs"""
        self._append(self._in, terms, rhs)

    def add_cone(self, norm_terms: Terms, norm_offset, bound_terms: Terms, bound_offset: float) -> None:
        """‖Σ M z + g‖ ≤ Σ a z + d"""
        self._cones.append((norm_terms, np.atleast_1d(np.asarray(norm_offset, dtype=float)),
                            bound_terms, float(bound_offset)))

    def _matrix(self, store, n_rows: int) -> sp.csr_matrix:
        rows, cols, vals, _ = store
        if rows:
            return sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n_rows, self.num_vars),
            )
        return sp.csr_matrix((n_rows, self.num_vars))

    def build(self, initial_guess: Optional[np.ndarray] = None) -> ConicProgram:
        n = self.num_vars
        c = np.zeros(n)
        for idx, coeffs in self._c:
            np.add.at(c, idx, coeffs)
        cones = []
        for norm_terms, g, bound_terms, d in self._cones:
            store = ([], [], [], [])
            self._append(store, norm_terms, np.zeros(g.size))
            F = self._matrix(store, g.size)
            h = np.zeros(n)
            for idx, a in bound_terms:
                np.add.at(h, np.asarray(idx, dtype=int).ravel(), np.asarray(a, dtype=float).ravel())
            cones.append(SocBlock(F=F, g=g, h=h, d=d))
        return ConicProgram(
            num_vars=n,
            blocks=dict(self.blocks),
            c=c,
            c0=self.c0,
            A_eq=self._matrix(self._eq, len(self._eq[3])),
            b_eq=np.asarray(self._eq[3], dtype=float),
            A_in=self._matrix(self._in, len(self._in[3])),
            b_in=np.asarray(self._in[3], dtype=float),
            cones=tuple(cones),
            initial_guess=initial_guess,
        )


# ---------------------------------------------------------------------------
# 罚项编码
# ---------------------------------------------------------------------------

def _check_weight(weight, size: int) -> np.ndarray:
    weight = np.broadcast_to(np.asarray(weight, dtype=float), (size,))
    if np.any(weight < 0):
        raise ArgumentError("penalty weight must be nonnegative")
    return weight


def encode_l1_penalty(builder: ProgramBuilder, name: str, idx, weight) -> np.ndarray:
    """weight·‖z‖₁：t ≥ z, t ≥ −z, 目标 += weight·Σt；weight 可逐元素给出"""
    idx = np.asarray(idx, dtype=int).ravel()
    weight = _check_weight(weight, idx.size)
    t = builder.add_variable(name, idx.shape)
    eye = np.eye(idx.size)
    builder.add_inequalities([(idx, eye), (t, -eye)], np.zeros(idx.size))
    builder.add_inequalities([(idx, -eye), (t, -eye)], np.zeros(idx.size))
    if np.any(weight > 0):
        builder.add_objective(t, weight)
    return t


def encode_positive_part(builder: ProgramBuilder, name: str, idx, weight) -> np.ndarray:
    """weight·Σ(z)₊：t ≥ z, t ≥ 0"""
    idx = np.asarray(idx, dtype=int).ravel()
    weight = _check_weight(weight, idx.size)
    t = builder.add_variable(name, idx.shape)
    eye = np.eye(idx.size)
    builder.add_inequalities([(idx, eye), (t, -eye)], np.zeros(idx.size))
    builder.add_inequalities([(t, -eye)], np.zeros(idx.size))
    if np.any(weight > 0):
        builder.add_objective(t, weight)
    return t


def encode_trust_region(builder: ProgramBuilder, xi_idx, r_idx: int, weight: float = 0.0) -> None:
    """‖ξ‖² ≤ r 的旋转锥形式 ‖[2ξ; r − 1]‖ ≤ r + 1"""
    xi_idx = np.asarray(xi_idx, dtype=int).ravel()
    k = xi_idx.size
    M = np.zeros((k + 1, k))
    M[:k] = 2.0 * np.eye(k)
    e_r = np.zeros((k + 1, 1))
    e_r[k, 0] = 1.0
    offset = np.zeros(k + 1)
    offset[k] = -1.0
    builder.add_cone([(xi_idx, M), ([r_idx], e_r)], offset, [([r_idx], [1.0])], 1.0)
    if weight > 0:
        builder.add_objective([r_idx], weight)


def encode_quadratic(builder: ProgramBuilder, name: str, idx, Q, linear=None) -> None:
    """目标 += ½ zᵀQz (+ linearᵀz)，Q 半正定，用 t ≥ ½‖Lᵀz‖² 的旋转锥上镜图"""
    idx = np.asarray(idx, dtype=int).ravel()
    Q = np.asarray(Q, dtype=float)
    Q = 0.5 * (Q + Q.T)
    lam, V = np.linalg.eigh(Q)
    keep = lam > 1e-14 * max(1.0, float(np.max(np.abs(lam))) if lam.size else 1.0)
    if np.any(lam < -1e-10 * max(1.0, float(np.max(np.abs(lam))))):
        raise ArgumentError(f"quadratic term '{name}' is not positive semidefinite")
    if linear is not None:
        builder.add_objective(idx, linear)
    if not np.any(keep):
        return
    Lt = (V[:, keep] * np.sqrt(lam[keep])).T
    t = builder.add_variable(name, (1,))
    k = Lt.shape[0]
    M = np.zeros((k + 1, idx.size))
    M[:k] = 2.0 * Lt
    e_t = np.zeros((k + 1, 1))
    e_t[k, 0] = 2.0
    offset = np.zeros(k + 1)
    offset[k] = -1.0
    # ‖y‖² ≤ 2t  ⇔  ‖[2y; 2t − 1]‖ ≤ 2t + 1
    builder.add_cone([(idx, M), (t, e_t)], offset, [(t, [2.0])], 1.0)
    builder.add_objective(t, 1.0)


# ---------------------------------------------------------------------------
# 求解与校验
# ---------------------------------------------------------------------------

_STATUS_MAP = {
    cp.OPTIMAL: SolutionStatus.OPTIMAL,
    cp.OPTIMAL_INACCURATE: SolutionStatus.OPTIMAL,
    cp.INFEASIBLE: SolutionStatus.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: SolutionStatus.INFEASIBLE,
    cp.UNBOUNDED: SolutionStatus.UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: SolutionStatus.UNBOUNDED,
}


def _solver_options(settings: ConicSolverSettings) -> Dict[str, object]:
    if settings.solver == "CLARABEL":
        return {
            "tol_feas": settings.feasibility_tol,
            "tol_gap_abs": settings.gap_tol,
            "tol_gap_rel": settings.gap_tol,
            "max_iter": settings.max_iters,
        }
    if settings.solver == "ECOS":
        return {
            "feastol": settings.feasibility_tol,
            "abstol": settings.gap_tol,
            "reltol": settings.gap_tol,
            "max_iters": settings.max_iters,
        }
    if settings.solver == "SCS":
        return {"eps_abs": settings.feasibility_tol, "eps_rel": settings.gap_tol, "max_iters": 100 * settings.max_iters}
    return {}


def residuals(program: ConicProgram, z: np.ndarray) -> Dict[str, float]:
    """独立计算的约束残差（相对尺度 s = 1 + max(‖b‖∞, ‖A‖max‖z‖∞)）"""
    z_inf = float(np.max(np.abs(z))) if z.size else 0.0

    def scale(A, b):
        a_max = float(abs(A).max()) if A.nnz else 0.0
        b_max = float(np.max(np.abs(b))) if b.size else 0.0
        return 1.0 + max(b_max, a_max * z_inf)

    eq = float(np.max(np.abs(program.A_eq @ z - program.b_eq))) if program.b_eq.size else 0.0
    ineq = float(max(0.0, np.max(program.A_in @ z - program.b_in))) if program.b_in.size else 0.0
    cone = 0.0
    for blk in program.cones:
        bound = float(blk.h @ z + blk.d)
        viol = float(np.linalg.norm(blk.F @ z + blk.g)) - bound
        cone = max(cone, viol / (1.0 + abs(bound)))
    return {
        "eq_residual": eq / scale(program.A_eq, program.b_eq),
        "ineq_residual": ineq / scale(program.A_in, program.b_in),
        "cone_violation": cone,
    }


def solve(program: ConicProgram, settings: Optional[ConicSolverSettings] = None) -> ConicSolution:
    settings = settings or ConicSolverSettings()
    z = cp.Variable(program.num_vars)
    constraints = []
    if program.b_eq.size:
        constraints.append(program.A_eq @ z == program.b_eq)
    if program.b_in.size:
        constraints.append(program.A_in @ z <= program.b_in)
    for blk in program.cones:
        constraints.append(cp.SOC(blk.h @ z + blk.d, blk.F @ z + blk.g))
    problem = cp.Problem(cp.Minimize(program.c @ z + program.c0), constraints)

    warm = settings.warm_start and program.initial_guess is not None
    if warm:
        z.value = program.initial_guess
    started = time.perf_counter()
    try:
        problem.solve(solver=settings.solver, verbose=settings.verbose, warm_start=warm,
                      **_solver_options(settings))
    except cp.SolverError as exc:
        _log.warning("conic backend %s failed: %s", settings.solver, exc)
        return ConicSolution(SolutionStatus.NUMERICAL_FAILURE, None, float("nan"),
                             diagnostics={"solver": settings.solver, "error": str(exc)})
    diagnostics: Dict[str, object] = {
        "solver": settings.solver,
        "backend_status": problem.status,
        "solve_time": time.perf_counter() - started,
        "iterations": getattr(problem.solver_stats, "num_iters", None),
    }

    status = _STATUS_MAP.get(problem.status, SolutionStatus.NUMERICAL_FAILURE)
    if status != SolutionStatus.OPTIMAL:
        return ConicSolution(status, None, float("nan"), diagnostics=diagnostics)
    x = np.asarray(z.value, dtype=float)
    if not np.all(np.isfinite(x)):
        return ConicSolution(SolutionStatus.NUMERICAL_FAILURE, None, float("nan"), diagnostics=diagnostics)

    res = residuals(program, x)
    diagnostics.update(res)
    if max(res.values()) > settings.certify_tol:
        _log.warning("solution failed certification: %s", res)
        return ConicSolution(SolutionStatus.NUMERICAL_FAILURE, None, float("nan"), diagnostics=diagnostics)
    if problem.status == cp.OPTIMAL_INACCURATE:
        _log.warning("backend reported %s, accepted after certification", problem.status)

    values = {name: x[idx] for name, idx in program.blocks.items()}
    return ConicSolution(status, x, float(program.c @ x + program.c0), values, diagnostics)


def dump_program(program: ConicProgram, path) -> Path:
    """纯文本导出：先目标，后每行一个约束"""
    path = Path(path)

    def row_text(indices, data):
        return " ".join(f"{j}:{v:.17g}" for j, v in zip(indices, data))

    lines = [
        f"# conic program vars={program.num_vars} eq={program.b_eq.size} "
        f"le={program.b_in.size} soc={len(program.cones)}",
    ]
    for name, idx in program.blocks.items():
        flat = idx.ravel()
        if flat.size:
            lines.append(f"block {name} {flat[0]} {flat[-1]}")
    nz = np.nonzero(program.c)[0]
    lines.append(f"minimize {program.c0:.17g} {row_text(nz, program.c[nz])}")
    for kind, A, b in (("eq", program.A_eq, program.b_eq), ("le", program.A_in, program.b_in)):
        for r in range(A.shape[0]):
            row = A.getrow(r)
            lines.append(f"{kind} {row_text(row.indices, row.data)} rhs {b[r]:.17g}")
    for blk in program.cones:
        lines.append(f"soc bound {row_text(np.nonzero(blk.h)[0], blk.h[np.nonzero(blk.h)[0]])} + {blk.d:.17g}")
        for r in range(blk.F.shape[0]):
            row = blk.F.getrow(r)
            lines.append(f"  norm {row_text(row.indices, row.data)} + {blk.g[r]:.17g}")
    path.write_text("\n".join(lines) + "\n")
    return path
