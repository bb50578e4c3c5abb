"""翻转 Radau 节点、拉格朗日微分矩阵、求积权重与 hp 分段网格"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.interpolate import BarycentricInterpolator
from scipy.special import eval_legendre, roots_jacobi

from errors import ArgumentError

_log = logging.getLogger(__name__)

MAX_ORDER = 64


def _legendre_slope(n: int, x: np.ndarray) -> np.ndarray:
    """P_n'(x)，要求 |x| < 1"""
    if n == 0:
        return np.zeros_like(x)
    return n * (x * eval_legendre(n, x) - eval_legendre(n - 1, x)) / (x * x - 1.0)


NEWTON_MAX_ITERS = 100
NEWTON_TOL = 1e-15


def _flipped_radau_rule(p: int) -> Tuple[np.ndarray, np.ndarray]:
    """P_p − P_{p−1} 在 (−1, 1] 上的 p 个根及其求积权重"""
    if p == 1:
        return np.array([1.0]), np.array([2.0])
    # 内点是 P^{(1,0)}_{p−1} 的零点，Golub–Welsch 给初值
    x, lam = roots_jacobi(p - 1, 1.0, 0.0)
    order = np.argsort(x)
    x = np.asarray(x, dtype=float)[order]
    lam = np.asarray(lam, dtype=float)[order]
    # 牛顿迭代至收敛
    for _ in range(NEWTON_MAX_ITERS):
        f = eval_legendre(p, x) - eval_legendre(p - 1, x)
        df = _legendre_slope(p, x) - _legendre_slope(p - 1, x)
        dx = f / df
        x = x - dx
        if np.max(np.abs(dx)) <= NEWTON_TOL:
            break
    else:
        _log.warning("radau nodes for p=%d: newton stopped at |dx|=%.3g", p, float(np.max(np.abs(dx))))
    # 权重 (1−x) 的 Gauss–Jacobi 权重除以 (1−x) 即 Radau 内点权重，不再归一化
    w = np.concatenate((lam / (1.0 - x), [2.0 / p ** 2]))
    return np.concatenate((x, [1.0])), w


def _barycentric_weights(x: np.ndarray) -> np.ndarray:
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


@dataclass(frozen=True)
class RadauSegment:
    """单段翻转 Radau 数据。

    nodes[0] = −1 为非配点插值节点；D 为 p×(p+1)，行对应配点 1..p；
    w 为配点 1..p 上的求积权重。
    """

    p: int
    nodes: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)

    @property
    def collocation_nodes(self) -> np.ndarray:
        return self.nodes[1:]


@lru_cache(maxsize=None)
def radau_segment(p: int) -> RadauSegment:
    if not isinstance(p, (int, np.integer)) or p < 1 or p > MAX_ORDER:
        raise ArgumentError(f"collocation order must be in [1, {MAX_ORDER}], got {p}")
    p = int(p)
    colloc, w = _flipped_radau_rule(p)
    nodes = np.concatenate(([-1.0], colloc))

    # 重心公式微分矩阵，对角元取负行和
    b = _barycentric_weights(nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    full = (b[None, :] / b[:, None]) / diff
    np.fill_diagonal(full, 0.0)
    np.fill_diagonal(full, -full.sum(axis=1))

    for arr in (nodes, full, w):
        arr.setflags(write=False)
    return RadauSegment(p=p, nodes=nodes, D=full[1:], w=w)


def diff_exactness_check(seg: RadauSegment, k: int) -> float:
    """D 作用于 τᵏ 节点样本与 k τᵏ⁻¹ 的最大偏差"""
    if k < 0 or k > seg.p:
        raise ArgumentError(f"degree must be in [0, {seg.p}], got {k}")
    samples = seg.nodes ** k
    tau = seg.collocation_nodes
    exact = k * tau ** (k - 1) if k > 0 else np.zeros_like(tau)
    return float(np.max(np.abs(seg.D @ samples - exact)))


def lagrange_eval(seg: RadauSegment, nodal_values, tau):
    """Σ_k x_k 𝓛_k(τ)，在节点处精确返回节点值"""
    values = np.asarray(nodal_values, dtype=float)
    if values.shape[0] != seg.p + 1:
        raise ArgumentError(f"expected {seg.p + 1} nodal values, got {values.shape[0]}")
    return BarycentricInterpolator(seg.nodes, values, axis=0)(tau)


def quadrature(seg: RadauSegment, values) -> np.ndarray:
    """配点上的 Radau 求积"""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != seg.p:
        raise ArgumentError(f"expected {seg.p} collocation values, got {values.shape[0]}")
    return seg.w @ values


@dataclass(frozen=True)
class HpGrid:
    """均匀分段 hp 网格，σ = (t_f − t₀)/(2N)"""

    N: int
    segment: RadauSegment
    sigma: float
    t0: float = 0.0

    @property
    def p(self) -> int:
        return self.segment.p

    @property
    def tf(self) -> float:
        return self.t0 + 2.0 * self.N * self.sigma

    def time(self, h: int, tau, sigma: float = None) -> np.ndarray:
        """第 h 段（0 起）局部坐标 τ 对应的物理时间"""
        s = self.sigma if sigma is None else sigma
        return self.t0 + s * (2.0 * h + 1.0 + np.asarray(tau, dtype=float))

    def node_times(self, sigma: float = None) -> np.ndarray:
        """形状 (N, p+1)"""
        return np.stack([self.time(h, self.segment.nodes, sigma) for h in range(self.N)])


def make_grid(N: int, p: int, t0: float, tf: float) -> HpGrid:
    if N < 1:
        raise ArgumentError(f"segment count must be >= 1, got {N}")
    if not tf > t0:
        raise ArgumentError(f"final time {tf} must exceed initial time {t0}")
    return HpGrid(N=int(N), segment=radau_segment(int(p)), sigma=(tf - t0) / (2.0 * N), t0=float(t0))
