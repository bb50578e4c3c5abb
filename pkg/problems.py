"""内置问题：landing、attitude-toy、lq-euclidean"""
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

import landing
from errors import ConfigError
from geometry import Euclidean, Product, UnitQuaternion, quat_exp, quat_mul
from models import BoundaryCondition, ProblemDefinition

# 双积分器 ẋ = A x + B u
LQ_A = np.array([[0.0, 1.0], [0.0, 0.0]])
LQ_B = np.array([[0.0], [1.0]])
LQ_Q = np.eye(2)
LQ_R = np.eye(1)

ATTITUDE_J = np.diag([1.0, 1.0, 2.0])
# 绕 (1,1,0)/√2 转 1 rad，半角坐标下 φ_f = 0.5 n̂
ATTITUDE_AXIS = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
ATTITUDE_ANGLE = 1.0


def lq_euclidean(seed: int = 0) -> ProblemDefinition:
    """二次代价的双积分器，x(0) = (1, 0)，x(t_f) = 0"""
    nominal = np.zeros(1)
    if seed:
        nominal = np.random.default_rng(seed).normal(0.0, 0.1, size=1)
    return ProblemDefinition(
        name="lq-euclidean",
        state_chart=Euclidean(2),
        control_chart=Euclidean(1),
        dynamics=lambda x, u: LQ_A @ x + LQ_B @ u,
        boundary=BoundaryCondition(initial=np.array([1.0, 0.0]), final=np.zeros(2)),
        t0=0.0,
        tf=2.0,
        running_cost=lambda x, u: 0.5 * float(x @ LQ_Q @ x + u @ LQ_R @ u),
        cost_hessian=lambda x, u: (LQ_Q, LQ_R),
        dynamics_jacobians=lambda x, u: (LQ_A, LQ_B),
        nominal_control=nominal,
        state_labels=["x_1", "x_2"],
        control_labels=["u"],
    )


def _attitude_dynamics(x, u):
    q, omega = x[:4], x[4:]
    q_dot = 0.5 * quat_mul(q, np.concatenate(([0.0], omega)))
    return np.concatenate((q_dot, np.linalg.solve(ATTITUDE_J, u)))


def attitude_target() -> np.ndarray:
    return quat_exp(0.5 * ATTITUDE_ANGLE * ATTITUDE_AXIS)


def attitude_toy(seed: int = 0) -> ProblemDefinition:
    """静止到静止的姿态机动 q̇ = ½q⊗ω，ω̇ = J⁻¹τ，代价 ½∫‖τ‖²"""
    x0 = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    xf = np.concatenate((attitude_target(), np.zeros(3)))
    return ProblemDefinition(
        name="attitude-toy",
        state_chart=Product([UnitQuaternion(), Euclidean(3)]),
        control_chart=Euclidean(3),
        dynamics=_attitude_dynamics,
        boundary=BoundaryCondition(initial=x0, final=xf),
        t0=0.0,
        tf=5.0,
        running_cost=lambda x, u: 0.5 * float(u @ u),
        cost_hessian=lambda x, u: (np.zeros((6, 6)), np.eye(3)),
        nominal_control=np.zeros(3),
        state_labels=["q_w", "q_x", "q_y", "q_z", "omega_x", "omega_y", "omega_z"],
        control_labels=["tau_x", "tau_y", "tau_z"],
    )


def landing_problem(seed: int = 0, param_file: Optional[Path] = None) -> ProblemDefinition:
    params, boundary = landing.load_parameter_file(param_file)
    return landing.default_problem(params, boundary)


PROBLEMS: Dict[str, Callable[..., ProblemDefinition]] = {
    "landing": landing_problem,
    "attitude-toy": attitude_toy,
    "lq-euclidean": lq_euclidean,
}


def build_problem(selector: str, seed: int = 0) -> ProblemDefinition:
    """内置问题名，或着陆参数文件路径"""
    if selector in PROBLEMS:
        return PROBLEMS[selector](seed=seed)
    path = Path(selector)
    if path.suffix == ".conf" or path.exists():
        if not path.exists():
            raise ConfigError(f"parameter file not found: {path}")
        return landing_problem(seed, param_file=path)
    raise ConfigError(f"unknown problem '{selector}', expected one of {sorted(PROBLEMS)} or a parameter file")
