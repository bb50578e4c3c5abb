"""六自由度动力着陆问题：动力学、路径约束、边界数据与默认参数。

状态环境坐标 [m, r(3), v(3), q(4), ω(3)]，图册 ℝ⁷ × 𝒬 × ℝ³；
控制 [T, u_dir(3)]，图册 ℝ × S²。q 为体坐标到惯性系的标量在前四元数。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from config import LANDING_PARAMS_PATH, load_key_values
from errors import ArgumentError, ConfigError, DomainError
from geometry import Euclidean, Product, Sphere2, UnitQuaternion, quat_left_matrix, quat_mul, rotation_matrix, skew
from models import BoundaryCondition, ConvexConstraint, ProblemDefinition
from schemas import DragModel, LandingBoundary, LandingParams

_log = logging.getLogger(__name__)

STATE_CHART = Product([Euclidean(7), UnitQuaternion(), Euclidean(3)])
CONTROL_CHART = Product([Euclidean(1), Sphere2()])

STATE_LABELS = ["m", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z", "q_w", "q_x", "q_y", "q_z",
                "omega_x", "omega_y", "omega_z"]
CONTROL_LABELS = ["T_mag", "u_x", "u_y", "u_z"]

# 约束路由：keep-convex 原样进入子问题，intrinsic 走内蕴线性化
CONSTRAINT_FLAGS: Dict[str, str] = {
    "glideslope": "keep-convex",
    "omega_max": "keep-convex",
    "thrust_min": "keep-convex",
    "thrust_max": "keep-convex",
    "dry_mass": "keep-convex",
    "gimbal": "intrinsic",
    "tilt": "intrinsic",
}

# 内蕴坐标中的切片
_PHI = slice(7, 10)
_OMEGA_I = slice(10, 13)

Drag = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class LandingState:
    m: float
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    @classmethod
    def from_vector(cls, x) -> "LandingState":
        x = STATE_CHART.check_point(x, "landing state")
        return cls(float(x[0]), x[1:4], x[4:7], x[7:11], x[11:14])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(([self.m], self.r, self.v, self.q, self.omega))


@dataclass
class LandingControl:
    T_mag: float
    u_dir: np.ndarray

    @classmethod
    def from_vector(cls, u) -> "LandingControl":
        u = CONTROL_CHART.check_point(u, "landing control")
        return cls(float(u[0]), u[1:4])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(([self.T_mag], self.u_dir))


def dynamics(x, u, params: LandingParams, drag: Optional[Drag] = None) -> np.ndarray:
    """环境坐标下的 ẋ"""
    s = LandingState.from_vector(x)
    c = LandingControl.from_vector(u)
    if s.m <= 0.0:
        raise DomainError(f"mass must be positive, got {s.m}")
    J = params.J
    C = rotation_matrix(s.q)
    thrust = c.T_mag * c.u_dir
    v_dot = (C @ thrust) / s.m + params.g
    if drag is not None:
        v_dot = v_dot - np.asarray(drag(x, u), dtype=float) / s.m
    q_dot = 0.5 * quat_mul(s.q, np.concatenate(([0.0], s.omega)))
    omega_dot = np.linalg.solve(J, np.cross(params.arm, thrust) - np.cross(s.omega, J @ s.omega))
    return np.concatenate(([-params.alpha * c.T_mag], s.v, v_dot, q_dot, omega_dot))


def dynamics_jacobians(x, u, params: LandingParams) -> Tuple[np.ndarray, np.ndarray]:
    """标架坐标下的 (D_x f̂, D_u f̂)，零阻力"""
    s = LandingState.from_vector(x)
    c = LandingControl.from_vector(u)
    if s.m <= 0.0:
        raise DomainError(f"mass must be positive, got {s.m}")
    J = params.J
    J_inv = np.linalg.inv(J)
    C = rotation_matrix(s.q)
    F = CONTROL_CHART.components[1].frame(c.u_dir)
    T, m = c.T_mag, s.m

    A = np.zeros((13, 13))
    A[1:4, 4:7] = np.eye(3)
    A[4:7, 0] = -(T / m ** 2) * (C @ c.u_dir)
    # C(q ⊗ Exp(φ)) ≈ C(q)(I + 2[φ]×)
    A[4:7, _PHI] = -2.0 * (T / m) * C @ skew(c.u_dir)
    A[_PHI, _OMEGA_I] = 0.5 * np.eye(3)
    A[_OMEGA_I, _OMEGA_I] = -J_inv @ (skew(s.omega) @ J - skew(J @ s.omega))

    B = np.zeros((13, 3))
    B[0, 0] = -params.alpha
    B[4:7, 0] = C @ c.u_dir / m
    B[4:7, 1:3] = (T / m) * C @ F
    B[_OMEGA_I, 0] = J_inv @ np.cross(params.arm, c.u_dir)
    B[_OMEGA_I, 1:3] = T * J_inv @ skew(params.arm) @ F
    return A, B


def path_constraints(x, u, params: LandingParams) -> np.ndarray:
    """需要内蕴线性化的约束 [gimbal, tilt]，≤ 0 可行"""
    q = np.asarray(x, dtype=float)[7:11]
    u_dir = np.asarray(u, dtype=float)[1:4]
    return np.array([
        np.cos(params.delta_max) - u_dir[0],
        q[2] ** 2 + q[3] ** 2 - np.sin(params.phi_max / 2.0) ** 2,
    ])


def constraint_jacobians(x, u, params: LandingParams) -> Tuple[np.ndarray, np.ndarray]:
    q = np.asarray(x, dtype=float)[7:11]
    u_dir = np.asarray(u, dtype=float)[1:4]
    Gx = np.zeros((2, 13))
    Gu = np.zeros((2, 3))
    # dq/dφ_j = q ⊗ [0; e_j]
    E = quat_left_matrix(q)[:, 1:]
    Gx[1, _PHI] = 2.0 * q[2] * E[2] + 2.0 * q[3] * E[3]
    Gu[0, 1:3] = -CONTROL_CHART.components[1].frame(u_dir)[0]
    return Gx, Gu


def all_constraint_residuals(x, u, params: LandingParams) -> Dict[str, float]:
    """全部约束残差（≤ 0 可行），按名称给出"""
    residuals = {con.name: con.residual(x, u) for con in convex_constraints(params)}
    gimbal, tilt = path_constraints(x, u, params)
    residuals.update(gimbal=float(gimbal), tilt=float(tilt))
    return residuals


def convex_constraints(params: LandingParams):
    """纯欧氏凸约束，原样保留"""
    zx = np.zeros(14)
    zu = np.zeros(4)

    glide_F = np.zeros((2, 14))
    glide_F[0, 2] = 1.0
    glide_F[1, 3] = 1.0
    glide_h = zx.copy()
    glide_h[1] = 1.0 / np.tan(params.gamma)

    omega_F = np.zeros((3, 14))
    omega_F[:, 11:14] = np.eye(3)

    e_T = zu.copy()
    e_T[0] = 1.0
    e_m = zx.copy()
    e_m[0] = 1.0
    return (
        ConvexConstraint("glideslope", glide_F, np.zeros((2, 4)), np.zeros(2), glide_h, zu, 0.0),
        ConvexConstraint("omega_max", omega_F, np.zeros((3, 4)), np.zeros(3), zx, zu, params.omega_max),
        ConvexConstraint.linear("thrust_min", zx, e_T, -params.T_min),
        ConvexConstraint.linear("thrust_max", zx, -e_T, params.T_max),
        ConvexConstraint.linear("dry_mass", e_m, zu, -params.m_dry),
    )


def initial_state(boundary: LandingBoundary) -> np.ndarray:
    q0 = np.asarray(boundary.q0, dtype=float)
    q0 = q0 / np.linalg.norm(q0)
    return np.concatenate(([boundary.m0], boundary.r0, boundary.v0, q0, boundary.omega0))


def final_state(boundary: LandingBoundary, params: LandingParams) -> np.ndarray:
    qf = np.asarray(boundary.qf, dtype=float)
    qf = qf / np.linalg.norm(qf)
    # 终端质量自由，取悬停耗量估计作初始猜测的插值端点
    hover = float(np.clip(boundary.m0 * np.linalg.norm(params.g), params.T_min, params.T_max))
    mf = max(boundary.m0 - params.alpha * hover * params.t_f, params.m_dry)
    return np.concatenate(([mf], boundary.rf, boundary.vf, qf, boundary.omegaf))


def final_mask() -> np.ndarray:
    """仅终端质量自由"""
    mask = np.ones(13, dtype=bool)
    mask[0] = False
    return mask


# 着陆问题的收敛步长容差（内蕴状态坐标）与信赖域罚权
LANDING_STEP_TOLERANCE = 1e-3
LANDING_TRUST_WEIGHT = 1.0


def default_problem(
    params: Optional[LandingParams] = None,
    boundary: Optional[LandingBoundary] = None,
    drag: Optional[Drag] = None,
) -> ProblemDefinition:
    params = params or LandingParams()
    boundary = boundary or LandingBoundary()
    if params.drag_model == DragModel.USER and drag is None:
        raise ArgumentError("drag_model 'user' needs a drag callback")
    if params.drag_model == DragModel.ZERO:
        drag = None
    if boundary.m0 <= params.m_dry:
        raise ArgumentError(f"initial mass {boundary.m0} must exceed dry mass {params.m_dry}")

    x0 = initial_state(boundary)
    xf = final_state(boundary, params)
    hover = float(np.clip(boundary.m0 * np.linalg.norm(params.g), params.T_min, params.T_max))

    return ProblemDefinition(
        name="landing",
        state_chart=STATE_CHART,
        control_chart=CONTROL_CHART,
        dynamics=lambda x, u: dynamics(x, u, params, drag),
        boundary=BoundaryCondition(initial=x0, final=xf, final_mask=final_mask()),
        t0=0.0,
        tf=params.t_f,
        terminal_cost=lambda x: -float(x[0]),
        path_constraints=lambda x, u: path_constraints(x, u, params),
        convex_constraints=convex_constraints(params),
        dynamics_jacobians=None if drag is not None else (lambda x, u: dynamics_jacobians(x, u, params)),
        constraint_jacobians=lambda x, u: constraint_jacobians(x, u, params),
        # 信赖域覆盖全部控制分量
        trust_region_indices=None,
        nominal_control=np.array([hover, 1.0, 0.0, 0.0]),
        step_tolerance=LANDING_STEP_TOLERANCE,
        trust_region_weight=LANDING_TRUST_WEIGHT,
        state_labels=STATE_LABELS,
        control_labels=CONTROL_LABELS,
        metadata={"params": params, "boundary": boundary},
    )


def load_parameter_file(path=None) -> Tuple[LandingParams, LandingBoundary]:
    """读取着陆参数文件，键分属 LandingParams 与 LandingBoundary"""
    path = Path(path) if path is not None else LANDING_PARAMS_PATH
    values = load_key_values(path)
    param_keys = set(LandingParams.model_fields)
    boundary_keys = set(LandingBoundary.model_fields)
    unknown = sorted(set(values) - param_keys - boundary_keys)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    try:
        params = LandingParams(**{k: v for k, v in values.items() if k in param_keys})
        boundary = LandingBoundary(**{k: v for k, v in values.items() if k in boundary_keys})
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}")
    _log.debug("loaded landing parameters from %s", path)
    return params, boundary
