"""流形几何算子：收缩映射、逆收缩、收缩诱导的向量传输、正交标架。

点以环境坐标存储（四元数 4 维，球面 3 维），切向量以基点处正交标架下的
内蕴坐标表示，因此坐标 2-范数等于黎曼范数。四元数采用标量在前的
Hamilton 约定，切空间采用体坐标：v = q ⊗ [0; w]。
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import block_diag

from errors import ArgumentError, DomainError

_log = logging.getLogger(__name__)

# 小角度泰勒分支阈值
SMALL_ANGLE = 1e-4
MEMBERSHIP_TOL = 1e-12
# 逆收缩在割迹附近的拒绝阈值
CUT_LOCUS_TOL = 1e-10


class ChartKind(str, Enum):
    EUCLIDEAN = "euclidean"
    QUATERNION = "quaternion"
    SPHERE = "sphere"
    PRODUCT = "product"


@dataclass(frozen=True)
class TangentCoords:
    """基点 base 处标架下的切向量坐标"""

    coords: np.ndarray
    base: np.ndarray


# ---------------------------------------------------------------------------
# 基础代数
# ---------------------------------------------------------------------------

def skew(v) -> np.ndarray:
    """叉乘矩阵 [v]×"""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_mul(p, q) -> np.ndarray:
    """四元数乘积 p ⊗ q"""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w = p[0] * q[0] - p[1:] @ q[1:]
    v = p[0] * q[1:] + q[0] * p[1:] + np.cross(p[1:], q[1:])
    return np.concatenate(([w], v))


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate(([q[0]], -q[1:]))


def quat_left_matrix(q) -> np.ndarray:
    """L(q)，满足 L(q) @ p = q ⊗ p"""
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def rotation_matrix(q) -> np.ndarray:
    """体坐标到惯性系的旋转矩阵 C_IB(q)，不做归一化"""
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _sinc(theta: float) -> float:
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0
    return np.sin(theta) / theta


def _sinc_slope(theta: float) -> float:
    """(θ cosθ − sinθ)/θ³"""
    if theta < SMALL_ANGLE:
        return -1.0 / 3.0 + theta * theta / 30.0
    return (theta * np.cos(theta) - np.sin(theta)) / theta ** 3


def quat_exp(phi) -> np.ndarray:
    """Exp(φ) = [cos‖φ‖; sinc‖φ‖ φ]"""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3,):
        raise ArgumentError(f"quat_exp expects a 3-vector, got shape {phi.shape}")
    theta = float(np.linalg.norm(phi))
    return np.concatenate(([np.cos(theta)], _sinc(theta) * phi))


def quat_log(q, canonicalize: bool = True) -> np.ndarray:
    """Exp 的逆。

    默认先把标量部分规范到非负（q 与 −q 表示同一姿态）；
    canonicalize=False 时在整个单射域 ‖φ‖ < π 上求逆，标量部分接近 −1 时报错。
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ArgumentError(f"quat_log expects a 4-vector, got shape {q.shape}")
    if canonicalize:
        if q[0] < 0.0:
            q = -q
    elif q[0] <= -1.0 + CUT_LOCUS_TOL:
        raise DomainError(f"quaternion {q} is at the cut locus (angle pi ambiguity)")
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-8:
        return q[1:] / q[0]
    return (np.arctan2(s, q[0]) / s) * q[1:]


def right_jacobian(phi) -> np.ndarray:
    """SO(3) 右雅可比 J_r(φ)"""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        # 1 − cosθ = 2 sin²(θ/2)，避免相消
        a = 2.0 * np.sin(0.5 * theta) ** 2 / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) - a * K + b * (K @ K)


# ---------------------------------------------------------------------------
# 流形图册
# ---------------------------------------------------------------------------

class ManifoldChart:
    """一个流形分量的算子集合"""

    kind: ChartKind
    intrinsic_dim: int
    ambient_dim: int

    def membership_error(self, x) -> float:
        raise NotImplementedError

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == (self.ambient_dim,) and self.membership_error(x) <= tol

    def retract(self, base, v) -> np.ndarray:
        raise NotImplementedError

    def inverse_retract(self, base, target) -> np.ndarray:
        raise NotImplementedError

    def frame(self, base) -> np.ndarray:
        raise NotImplementedError

    def transport_matrix(self, src, dst) -> np.ndarray:
        """𝒯_{src→dst} 在两端标架下的矩阵"""
        raise NotImplementedError

    def to_coords(self, base, vec) -> np.ndarray:
        """环境切向量投影到 base 处标架坐标"""
        return self.frame(base).T @ np.asarray(vec, dtype=float)

    def leaves(self) -> List[Tuple["ManifoldChart", slice, slice]]:
        """叶子分量及其环境/内蕴切片"""
        return [(self, slice(0, self.ambient_dim), slice(0, self.intrinsic_dim))]

    def describe(self) -> str:
        return f"{self.kind.value}:{self.ambient_dim}"

    def check_point(self, x, name: str = "point") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.ambient_dim,):
            raise ArgumentError(
                f"{name} has shape {x.shape}, expected ({self.ambient_dim},) for {self.describe()}"
            )
        return x

    def check_coords(self, v, name: str = "tangent") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.intrinsic_dim,):
            raise ArgumentError(
                f"{name} has shape {v.shape}, expected ({self.intrinsic_dim},) for {self.describe()}"
            )
        return v


class Euclidean(ManifoldChart):
    kind = ChartKind.EUCLIDEAN

    def __init__(self, n: int):
        if n < 0:
            raise ArgumentError(f"Euclidean dimension must be nonnegative, got {n}")
        self.intrinsic_dim = n
        self.ambient_dim = n

    def membership_error(self, x) -> float:
        return 0.0

    def retract(self, base, v):
        return self.check_point(base, "base") + self.check_coords(v)

    def inverse_retract(self, base, target):
        return self.check_point(target, "target") - self.check_point(base, "base")

    def frame(self, base):
        return np.eye(self.ambient_dim)

    def transport_matrix(self, src, dst):
        return np.eye(self.intrinsic_dim)

    def to_coords(self, base, vec):
        return np.array(vec, dtype=float)


class UnitQuaternion(ManifoldChart):
    """单位四元数 𝒬 ⊂ ℝ⁴，R_q(w) = q ⊗ Exp(w)。

    frame_rotation 为可选的固定 SO(3) 矩阵，标架列为 q ⊗ [0; R e_j]。
    """

    kind = ChartKind.QUATERNION
    intrinsic_dim = 3
    ambient_dim = 4

    def __init__(self, frame_rotation=None):
        if frame_rotation is None:
            self.frame_rotation = np.eye(3)
        else:
            R = np.asarray(frame_rotation, dtype=float)
            if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-12) \
                    or np.linalg.det(R) <= 0.0:
                raise ArgumentError("frame_rotation must be a proper rotation matrix")
            self.frame_rotation = R

    def membership_error(self, x) -> float:
        return abs(float(np.linalg.norm(x)) - 1.0)

    def retract(self, base, v):
        base = self.check_point(base, "base")
        v = self.check_coords(v)
        if not np.any(v):
            return base.copy()
        return quat_mul(base, quat_exp(self.frame_rotation @ v))

    def inverse_retract(self, base, target):
        rel = quat_mul(quat_conj(self.check_point(base, "base")), self.check_point(target, "target"))
        return self.frame_rotation.T @ quat_log(rel, canonicalize=False)

    def frame(self, base):
        return quat_left_matrix(self.check_point(base, "base"))[:, 1:] @ self.frame_rotation

    def transport_matrix(self, src, dst):
        if np.array_equal(src, dst):
            return np.eye(3)
        phi = quat_log(quat_mul(quat_conj(src), dst), canonicalize=False)
        R = self.frame_rotation
        return R.T @ right_jacobian(2.0 * phi) @ R


class Sphere2(ManifoldChart):
    """单位球面 S² ⊂ ℝ³，R_s(w) = s cos‖w‖ + w sinc‖w‖"""

    kind = ChartKind.SPHERE
    intrinsic_dim = 2
    ambient_dim = 3

    def membership_error(self, x) -> float:
        return abs(float(np.linalg.norm(x)) - 1.0)

    def frame(self, base):
        s = self.check_point(base, "base")
        # 与基点最不对齐的两个坐标轴，按轴序稳定排序
        a, b = np.argsort(np.abs(s), kind="stable")[:2]
        e_a = np.zeros(3)
        e_a[a] = 1.0
        e_b = np.zeros(3)
        e_b[b] = 1.0
        u1 = e_a - (s @ e_a) * s
        u1 /= np.linalg.norm(u1)
        u2 = e_b - (s @ e_b) * s - (u1 @ e_b) * u1
        u2 /= np.linalg.norm(u2)
        return np.column_stack((u1, u2))

    def retract(self, base, v):
        base = self.check_point(base, "base")
        v = self.check_coords(v)
        if not np.any(v):
            return base.copy()
        w = self.frame(base) @ v
        theta = float(np.linalg.norm(w))
        return base * np.cos(theta) + w * _sinc(theta)

    def _ambient_log(self, base, target) -> np.ndarray:
        base = self.check_point(base, "base")
        target = self.check_point(target, "target")
        c = float(base @ target)
        tp = target - c * base
        sn = float(np.linalg.norm(tp))
        theta = np.arctan2(sn, c)
        if theta > np.pi - 1e-8:
            raise DomainError(f"sphere points {base} and {target} are antipodal")
        if sn == 0.0:
            return np.zeros(3)
        return (theta / sn) * tp

    def inverse_retract(self, base, target):
        return self.frame(base).T @ self._ambient_log(base, target)

    def transport_matrix(self, src, dst):
        if np.array_equal(src, dst):
            return np.eye(2)
        w = self._ambient_log(src, dst)
        theta = float(np.linalg.norm(w))
        sinc = _sinc(theta)
        M = sinc * np.eye(3) - sinc * np.outer(src, w) + _sinc_slope(theta) * np.outer(w, w)
        return self.frame(dst).T @ M @ self.frame(src)


class Product(ManifoldChart):
    """乘积流形，所有算子逐块作用"""

    kind = ChartKind.PRODUCT

    def __init__(self, components: Sequence[ManifoldChart]):
        self.components = list(components)
        if not self.components:
            raise ArgumentError("Product needs at least one component")
        self.ambient_dim = sum(c.ambient_dim for c in self.components)
        self.intrinsic_dim = sum(c.intrinsic_dim for c in self.components)
        self._slices = []
        a = i = 0
        for c in self.components:
            self._slices.append((slice(a, a + c.ambient_dim), slice(i, i + c.intrinsic_dim)))
            a += c.ambient_dim
            i += c.intrinsic_dim

    def _split(self):
        return zip(self.components, self._slices)

    def membership_error(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return max(c.membership_error(x[sa]) for c, (sa, _) in self._split())

    def retract(self, base, v):
        base = self.check_point(base, "base")
        v = self.check_coords(v)
        return np.concatenate([c.retract(base[sa], v[si]) for c, (sa, si) in self._split()])

    def inverse_retract(self, base, target):
        base = self.check_point(base, "base")
        target = self.check_point(target, "target")
        return np.concatenate([c.inverse_retract(base[sa], target[sa]) for c, (sa, _) in self._split()])

    def frame(self, base):
        base = self.check_point(base, "base")
        return block_diag(*[c.frame(base[sa]) for c, (sa, _) in self._split()])

    def transport_matrix(self, src, dst):
        return block_diag(*[c.transport_matrix(src[sa], dst[sa]) for c, (sa, _) in self._split()])

    def to_coords(self, base, vec):
        base = self.check_point(base, "base")
        vec = np.asarray(vec, dtype=float)
        return np.concatenate([c.to_coords(base[sa], vec[sa]) for c, (sa, _) in self._split()])

    def leaves(self):
        out = []
        for c, (sa, si) in self._split():
            for leaf, la, li in c.leaves():
                out.append((
                    leaf,
                    slice(sa.start + la.start, sa.start + la.stop),
                    slice(si.start + li.start, si.start + li.stop),
                ))
        return out

    def describe(self) -> str:
        return ";".join(leaf.describe() for leaf, _, _ in self.leaves())


def chart_from_description(text: str) -> ManifoldChart:
    """由 describe() 的输出重建图册（导出文件头使用）"""
    leaves = []
    for item in text.split(";"):
        kind, _, dim = item.strip().partition(":")
        if kind == ChartKind.EUCLIDEAN.value:
            leaves.append(Euclidean(int(dim)))
        elif kind == ChartKind.QUATERNION.value:
            leaves.append(UnitQuaternion())
        elif kind == ChartKind.SPHERE.value:
            leaves.append(Sphere2())
        else:
            raise ArgumentError(f"unknown chart block '{item}'")
    return leaves[0] if len(leaves) == 1 else Product(leaves)


# ---------------------------------------------------------------------------
# 模块级算子
# ---------------------------------------------------------------------------

def _coords_of(v, base) -> np.ndarray:
    if isinstance(v, TangentCoords):
        if not np.array_equal(v.base, base):
            raise ArgumentError("tangent vector is based at a different point")
        return v.coords
    return v


def retract(chart: ManifoldChart, base, v: Union[TangentCoords, np.ndarray]) -> np.ndarray:
    return chart.retract(base, _coords_of(v, base))


def inverse_retract(chart: ManifoldChart, base, target) -> TangentCoords:
    return TangentCoords(chart.inverse_retract(base, target), np.asarray(base, dtype=float))


def transport(chart: ManifoldChart, src, dst, v: Union[TangentCoords, np.ndarray]) -> TangentCoords:
    coords = chart.check_coords(_coords_of(v, src))
    return TangentCoords(chart.transport_matrix(src, dst) @ coords, np.asarray(dst, dtype=float))


def frame(chart: ManifoldChart, base) -> np.ndarray:
    return chart.frame(base)


def quat_aux_terms(q_ref, omega_ref, rho) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """四元数运动学的闭式辅助项 (C, S, ℰ)。

    Args:
        q_ref: 参考四元数
        omega_ref: 参考点处图册坐标下的速度（q̇ = ½q⊗ω 时为 ω/2）
        rho: 该节点四元数块的缺陷
    """
    if np.asarray(q_ref).shape != (4,):
        raise ArgumentError("q_ref must be a quaternion")
    return np.zeros((3, 3)), skew(rho), skew(omega_ref)


def transport_rate(chart: ManifoldChart, base, velocity, step: float = 1e-6) -> np.ndarray:
    """ℰ 的有限差分：沿 R_base(t·velocity) 对 𝒯_{x(t)→base} 求 t=0 处导数"""
    velocity = np.asarray(velocity, dtype=float)
    plus = chart.retract(base, step * velocity)
    minus = chart.retract(base, -step * velocity)
    return (chart.transport_matrix(plus, base) - chart.transport_matrix(minus, base)) / (2.0 * step)
