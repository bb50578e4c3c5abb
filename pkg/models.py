from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ArgumentError, InvariantError
from geometry import ChartKind, ManifoldChart, MEMBERSHIP_TOL

Vector = np.ndarray
Dynamics = Callable[[Vector, Vector], Vector]


# 凸路径约束：‖Fx x + Fu u + g‖ ≤ hx·x + hu·u + d，只作用于欧氏分量
@dataclass(frozen=True)
class ConvexConstraint:
    name: str
    Fx: np.ndarray
    Fu: np.ndarray
    g: np.ndarray
    hx: np.ndarray
    hu: np.ndarray
    d: float

    @classmethod
    def linear(cls, name: str, hx, hu, d: float) -> "ConvexConstraint":
        """线性约束 0 ≤ hx·x + hu·u + d"""
        hx = np.asarray(hx, dtype=float)
        hu = np.asarray(hu, dtype=float)
        return cls(name, np.zeros((0, hx.size)), np.zeros((0, hu.size)), np.zeros(0), hx, hu, float(d))

    @property
    def is_linear(self) -> bool:
        return self.g.size == 0

    def residual(self, x, u) -> float:
        """≤ 0 可行"""
        lhs = np.linalg.norm(self.Fx @ x + self.Fu @ u + self.g) if not self.is_linear else 0.0
        return float(lhs - (self.hx @ x + self.hu @ u + self.d))


# 边界条件
@dataclass
class BoundaryCondition:
    """固定端点按内蕴坐标掩码给出；psi 为可选的非线性边界映射 ψ(x₀, x_f) = 0"""

    initial: Vector
    final: Optional[Vector] = None
    initial_mask: Optional[np.ndarray] = None
    final_mask: Optional[np.ndarray] = None
    psi: Optional[Callable[[Vector, Vector], Vector]] = None

    def masks(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        init = np.ones(n, dtype=bool) if self.initial_mask is None else np.asarray(self.initial_mask, dtype=bool)
        if self.final is None:
            fin = np.zeros(n, dtype=bool)
        else:
            fin = np.ones(n, dtype=bool) if self.final_mask is None else np.asarray(self.final_mask, dtype=bool)
        if init.shape != (n,) or fin.shape != (n,):
            raise ArgumentError(f"boundary masks must have length {n}")
        return init, fin


@dataclass
class ProblemDefinition:
    """流形约束最优控制问题。

    dynamics 返回环境切向量；path_constraints 为需要内蕴线性化的非凸约束 g ≤ 0；
    convex_constraints 原样保留到凸子问题中。
    """

    name: str
    state_chart: ManifoldChart
    control_chart: ManifoldChart
    dynamics: Dynamics
    boundary: BoundaryCondition
    t0: float = 0.0
    tf: float = 1.0
    running_cost: Optional[Callable[[Vector, Vector], float]] = None
    terminal_cost: Optional[Callable[[Vector], float]] = None
    path_constraints: Optional[Callable[[Vector, Vector], Vector]] = None
    convex_constraints: Sequence[ConvexConstraint] = ()
    dynamics_jacobians: Optional[Callable[[Vector, Vector], Tuple[np.ndarray, np.ndarray]]] = None
    constraint_jacobians: Optional[Callable[[Vector, Vector], Tuple[np.ndarray, np.ndarray]]] = None
    cost_hessian: Optional[Callable[[Vector, Vector], Tuple[np.ndarray, np.ndarray]]] = None
    terminal_hessian: Optional[Callable[[Vector], np.ndarray]] = None
    free_final_time: bool = False
    sigma_bounds: Optional[Tuple[float, float]] = None
    trust_region_indices: Optional[Sequence[int]] = None
    nominal_control: Optional[Vector] = None
    # 收敛判据 max‖η‖ < step_tolerance；两项均可由 ScvxSettings 覆盖
    step_tolerance: float = 1e-6
    trust_region_weight: float = 1e-2
    state_labels: Optional[List[str]] = None
    control_labels: Optional[List[str]] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        n_amb = self.state_chart.ambient_dim
        m_amb = self.control_chart.ambient_dim
        euclid_x = _euclidean_mask(self.state_chart)
        euclid_u = _euclidean_mask(self.control_chart)
        for c in self.convex_constraints:
            if c.Fx.shape[1] != n_amb or c.hx.shape != (n_amb,) or c.Fu.shape[1] != m_amb or c.hu.shape != (m_amb,):
                raise ArgumentError(f"convex constraint '{c.name}' has mismatched dimensions")
            touched_x = np.any(c.Fx != 0, axis=0) | (c.hx != 0)
            touched_u = np.any(c.Fu != 0, axis=0) | (c.hu != 0)
            if np.any(touched_x & ~euclid_x) or np.any(touched_u & ~euclid_u):
                raise ArgumentError(f"convex constraint '{c.name}' touches a non-Euclidean component")
        if self.trust_region_indices is not None:
            idx = np.asarray(self.trust_region_indices, dtype=int)
            if np.any(idx < 0) or np.any(idx >= self.control_chart.intrinsic_dim):
                raise ArgumentError("trust_region_indices out of range")
        if not self.tf > self.t0:
            raise ArgumentError(f"final time {self.tf} must exceed initial time {self.t0}")

    @property
    def n(self) -> int:
        return self.state_chart.intrinsic_dim

    @property
    def m(self) -> int:
        return self.control_chart.intrinsic_dim

    def f_hat(self, x, u) -> np.ndarray:
        """x 处标架坐标下的动力学"""
        return self.state_chart.to_coords(x, self.dynamics(x, u))

    def tangency_residual(self, x, u) -> float:
        f = np.asarray(self.dynamics(x, u), dtype=float)
        E = self.state_chart.frame(x)
        return float(np.linalg.norm(f - E @ (E.T @ f)))

    def trust_indices(self) -> np.ndarray:
        if self.trust_region_indices is None:
            return np.arange(self.m)
        return np.asarray(self.trust_region_indices, dtype=int)


def _euclidean_mask(chart: ManifoldChart) -> np.ndarray:
    mask = np.zeros(chart.ambient_dim, dtype=bool)
    for leaf, sa, _ in chart.leaves():
        if leaf.kind == ChartKind.EUCLIDEAN:
            mask[sa] = True
    return mask


@dataclass
class ReferenceTrajectory:
    """参考轨迹：states (N, p+1, n_amb)，controls (N, p+1, m_amb)，σ̄"""

    states: np.ndarray
    controls: np.ndarray
    sigma: float
    state_chart: ManifoldChart
    control_chart: ManifoldChart

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def p(self) -> int:
        return self.states.shape[1] - 1

    def check_interfaces(self) -> None:
        for h in range(self.N - 1):
            if not np.array_equal(self.states[h, -1], self.states[h + 1, 0]):
                raise InvariantError(f"interface state mismatch between segments {h} and {h + 1}")

    def membership_errors(self) -> Tuple[float, float]:
        """(状态, 控制) 的最大流形隶属误差"""
        xs = max(self.state_chart.membership_error(x) for x in self.states.reshape(-1, self.states.shape[-1]))
        us = max(self.control_chart.membership_error(u) for u in self.controls.reshape(-1, self.controls.shape[-1]))
        return xs, us

    def check_membership(self, tol: float = MEMBERSHIP_TOL) -> None:
        xs, us = self.membership_errors()
        if xs > tol or us > tol:
            raise InvariantError(f"manifold membership violated: state {xs:.3e}, control {us:.3e}")

    def copy(self) -> "ReferenceTrajectory":
        return replace(self, states=self.states.copy(), controls=self.controls.copy())


@dataclass
class LinearizedNode:
    """第 h 段第 i 个配点处的坐标矩阵"""

    h: int
    i: int
    A_tilde: np.ndarray
    B: np.ndarray
    rho_hat: np.ndarray
    f_hat: np.ndarray
    Gx: np.ndarray
    Gu: np.ndarray
    g_ref: np.ndarray
    T_blocks: np.ndarray


class SolveStatus(str, Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    SUBPROBLEM_FAILURE = "SubproblemFailure"


@dataclass
class SolveResult:
    reference: ReferenceTrajectory
    status: SolveStatus
    history: list
    failure_iteration: Optional[int] = None
    failure_detail: Optional[str] = None
