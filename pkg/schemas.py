from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_floats(value):
    """'1, 2, 3' -> [1.0, 2.0, 3.0]"""
    if isinstance(value, str):
        return [float(item) for item in value.replace(";", ",").split(",") if item.strip()]
    return value


# 锥规划后端设置
class ConicSolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    solver: str = "CLARABEL"
    feasibility_tol: float = Field(1e-9, gt=0)
    gap_tol: float = Field(1e-9, gt=0)
    certify_tol: float = Field(1e-8, gt=0)
    max_iters: int = Field(200, ge=1)
    warm_start: bool = False
    verbose: bool = False

    @field_validator("solver")
    @classmethod
    def upper_solver(cls, v: str) -> str:
        return v.upper()


# 逐次凸化设置
class ScvxSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu_nu: float = Field(1e4, gt=0)
    mu_s: float = Field(1e-1, gt=0)
    # mu_r 与 epsilon 为 None 时沿用问题定义中的值
    mu_r: Optional[float] = Field(None, gt=0)
    epsilon: Optional[float] = Field(None, gt=0)
    max_iters: int = Field(100, ge=1)
    # 为 None 时沿用问题定义中的设置
    free_final_time: Optional[bool] = None
    sigma_bounds: Optional[Tuple[float, float]] = None
    state_trust_region: Optional[float] = Field(None, gt=0)
    fd_step: float = Field(1e-6, gt=0)
    workers: int = Field(1, ge=1)
    solver: ConicSolverSettings = Field(default_factory=ConicSolverSettings)

    @field_validator("sigma_bounds")
    @classmethod
    def ordered_bounds(cls, v):
        if v is not None and not (0 < v[0] <= v[1]):
            raise ValueError("sigma_bounds must satisfy 0 < lo <= hi")
        return v


# 迭代历史记录
class IterationRecord(BaseModel):
    iteration: int
    status: str
    objective: float
    penalty_virtual: float
    penalty_slack: float
    penalty_trust: float
    max_defect: float
    step_state: float
    step_control: float
    step_sigma: float
    sigma: float
    max_virtual_control: float
    max_norm_violation: float
    wall_time: float


class DragModel(str, Enum):
    ZERO = "zero"
    USER = "user"


# 着陆问题参数（示例数值，见 config/landing.conf）
class LandingParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.002, gt=0)
    g_vec: List[float] = [-1.0, 0.0, 0.0]
    J_inertia: List[float] = [0.05, 0.1, 0.1]
    l_arm: List[float] = [-0.1, 0.0, 0.0]
    gamma: float = np.deg2rad(20.0)
    omega_max: float = Field(np.deg2rad(90.0), gt=0)
    T_min: float = Field(0.3, ge=0)
    T_max: float = Field(5.0, gt=0)
    m_dry: float = Field(1.0, gt=0)
    delta_max: float = np.deg2rad(45.0)
    phi_max: float = np.deg2rad(90.0)
    t_f: float = Field(4.0, gt=0)
    drag_model: DragModel = DragModel.ZERO

    @field_validator("g_vec", "l_arm", "J_inertia", mode="before")
    @classmethod
    def parse_vector(cls, v):
        return _split_floats(v)

    @field_validator("g_vec", "l_arm")
    @classmethod
    def three_vector(cls, v):
        if len(v) != 3:
            raise ValueError("expected 3 components")
        return v

    @field_validator("J_inertia")
    @classmethod
    def inertia_shape(cls, v):
        if len(v) not in (3, 9):
            raise ValueError("J_inertia takes 3 diagonal entries or 9 row-major entries")
        return v

    @field_validator("gamma", "delta_max", "phi_max")
    @classmethod
    def angle_range(cls, v):
        if not 0.0 < v <= np.pi / 2 + 1e-12:
            raise ValueError("angles must lie in (0, pi/2]")
        return v

    @model_validator(mode="after")
    def thrust_order(self):
        if self.T_min > self.T_max:
            raise ValueError("T_min must not exceed T_max")
        return self

    @property
    def J(self) -> np.ndarray:
        arr = np.asarray(self.J_inertia, dtype=float)
        return np.diag(arr) if arr.size == 3 else arr.reshape(3, 3)

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.g_vec, dtype=float)

    @property
    def arm(self) -> np.ndarray:
        return np.asarray(self.l_arm, dtype=float)


# 着陆边界数据（示例数值）
class LandingBoundary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m0: float = Field(2.0, gt=0)
    r0: List[float] = [4.0, 2.0, 0.0]
    v0: List[float] = [-0.5, -1.0, 0.0]
    q0: List[float] = [0.7428, -0.04278, 0.03559, 0.6672]
    omega0: List[float] = [0.0, 0.0, 0.0]
    rf: List[float] = [0.0, 0.0, 0.0]
    vf: List[float] = [-0.1, 0.0, 0.0]
    qf: List[float] = [1.0, 0.0, 0.0, 0.0]
    omegaf: List[float] = [0.0, 0.0, 0.0]

    @field_validator("r0", "v0", "q0", "omega0", "rf", "vf", "qf", "omegaf", mode="before")
    @classmethod
    def parse_vector(cls, v):
        return _split_floats(v)

    @model_validator(mode="after")
    def vector_sizes(self):
        for name in ("r0", "v0", "omega0", "rf", "vf", "omegaf"):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} expects 3 components")
        for name in ("q0", "qf"):
            q = getattr(self, name)
            if len(q) != 4 or np.linalg.norm(q) == 0.0:
                raise ValueError(f"{name} expects a nonzero 4-vector (scalar first)")
        return self


EXPORT_FORMATS = ("csv", "npz")


# 运行配置：平铺的键值文件直接映射到这里
class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: str = "landing"
    segments: int = Field(5, ge=1)
    order: int = Field(10, ge=1, le=64)
    mu_nu: float = Field(1e4, gt=0)
    mu_s: float = Field(1e-1, gt=0)
    mu_r: Optional[float] = Field(None, gt=0)
    epsilon: Optional[float] = Field(None, gt=0)
    max_iters: int = Field(100, ge=1)
    state_trust_region: Optional[float] = Field(None, gt=0)
    solver: str = "CLARABEL"
    workers: int = Field(1, ge=1)
    output_dir: Path = Path("output")
    formats: List[str] = ["csv"]
    seed: int = 0

    @field_validator("formats", mode="before")
    @classmethod
    def parse_formats(cls, v):
        if isinstance(v, str):
            v = [item.strip().lower() for item in v.split(",") if item.strip()]
        return v

    @field_validator("formats")
    @classmethod
    def known_formats(cls, v):
        unknown = sorted(set(v) - set(EXPORT_FORMATS))
        if unknown or not v:
            raise ValueError(f"formats must be a non-empty subset of {EXPORT_FORMATS}, got {v}")
        return v

    def scvx_settings(self) -> ScvxSettings:
        return ScvxSettings(
            mu_nu=self.mu_nu,
            mu_s=self.mu_s,
            mu_r=self.mu_r,
            epsilon=self.epsilon,
            max_iters=self.max_iters,
            state_trust_region=self.state_trust_region,
            workers=self.workers,
            solver=ConicSolverSettings(solver=self.solver),
        )
