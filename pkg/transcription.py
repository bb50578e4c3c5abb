"""内蕴线性化配点系统：缺陷、传输块、标架坐标下的线性化算子与分段连接条件。

段号 h 与节点号 i 均从 0 开始，配点为 i = 1..p。
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from collocation import HpGrid, lagrange_eval
from errors import DomainError, InvariantError, NumericalError
from geometry import ChartKind, ManifoldChart, quat_aux_terms, transport_rate
from models import LinearizedNode, ProblemDefinition, ReferenceTrajectory

_log = logging.getLogger(__name__)


def reference_velocity(ref: ReferenceTrajectory, grid: HpGrid, h: int, i: int) -> np.ndarray:
    """(1/σ̄) Σ_k D_ik R⁻¹_{x̄_i}(x̄_k)，x̄_i 处标架坐标"""
    chart = ref.state_chart
    xi = ref.states[h, i]
    row = grid.segment.D[i - 1]
    vel = np.zeros(chart.intrinsic_dim)
    for k in range(grid.p + 1):
        if k == i:
            continue
        try:
            vel += row[k] * chart.inverse_retract(xi, ref.states[h, k])
        except DomainError as exc:
            raise DomainError(f"segment {h}: nodes {i} and {k} outside injectivity radius ({exc.detail})")
    return vel / ref.sigma


def compute_defect(ref: ReferenceTrajectory, grid: HpGrid, problem: ProblemDefinition, h: int, i: int) -> np.ndarray:
    """ρ̂ = f̂(x̄_i, ū_i) − x̄̇_i"""
    f_hat = problem.f_hat(ref.states[h, i], ref.controls[h, i])
    return f_hat - reference_velocity(ref, grid, h, i)


def _fd_delta(point, step: float) -> float:
    return step * max(1.0, float(np.max(np.abs(point))) if np.size(point) else 1.0)


def fd_jacobians(
    fun: Callable[[np.ndarray, np.ndarray], np.ndarray],
    state_chart: ManifoldChart,
    control_chart: ManifoldChart,
    x,
    u,
    step: float = 1e-6,
) -> Tuple[np.ndarray, np.ndarray]:
    """经收缩映射的中心差分雅可比（对标架坐标 η̂、ξ̂）"""
    f0 = np.atleast_1d(np.asarray(fun(x, u), dtype=float))
    n, m = state_chart.intrinsic_dim, control_chart.intrinsic_dim
    Jx = np.zeros((f0.size, n))
    Ju = np.zeros((f0.size, m))
    dx = _fd_delta(x, step)
    for j in range(n):
        e = np.zeros(n)
        e[j] = dx
        plus = np.atleast_1d(fun(state_chart.retract(x, e), u))
        minus = np.atleast_1d(fun(state_chart.retract(x, -e), u))
        Jx[:, j] = (plus - minus) / (2.0 * dx)
    du = _fd_delta(u, step)
    for j in range(m):
        e = np.zeros(m)
        e[j] = du
        plus = np.atleast_1d(fun(x, control_chart.retract(u, e)))
        minus = np.atleast_1d(fun(x, control_chart.retract(u, -e)))
        Ju[:, j] = (plus - minus) / (2.0 * du)
    return Jx, Ju


def fd_gradient(fun: Callable[[np.ndarray], float], chart: ManifoldChart, x, step: float = 1e-6) -> np.ndarray:
    dx = _fd_delta(x, step)
    grad = np.zeros(chart.intrinsic_dim)
    for j in range(chart.intrinsic_dim):
        e = np.zeros(chart.intrinsic_dim)
        e[j] = dx
        grad[j] = (fun(chart.retract(x, e)) - fun(chart.retract(x, -e))) / (2.0 * dx)
    return grad


def retraction_terms(chart: ManifoldChart, x, f_hat, rho, step: float = 1e-6) -> np.ndarray:
    """逐块返回 −C + S − ℰ"""
    n = chart.intrinsic_dim
    out = np.zeros((n, n))
    for leaf, sa, si in chart.leaves():
        if leaf.kind == ChartKind.EUCLIDEAN:
            continue
        if leaf.kind == ChartKind.QUATERNION:
            C, S, E = quat_aux_terms(x[sa], f_hat[si], rho[si])
            out[si, si] = -C + S - E
        else:
            # 球面状态块：C、S 取零，ℰ 用传输率差分
            out[si, si] = -transport_rate(leaf, x[sa], f_hat[si], step)
    return out


def transport_blocks(ref: ReferenceTrajectory, grid: HpGrid, h: int, i: int) -> np.ndarray:
    """[T]_{ik}，k = 0..p，形状 (p+1, n, n)"""
    chart = ref.state_chart
    xi = ref.states[h, i]
    blocks = np.empty((grid.p + 1, chart.intrinsic_dim, chart.intrinsic_dim))
    for k in range(grid.p + 1):
        try:
            blocks[k] = chart.transport_matrix(ref.states[h, k], xi)
        except DomainError as exc:
            raise DomainError(f"segment {h}: transport from node {k} to {i} hits the cut locus ({exc.detail})")
    return blocks


def linearize_node(
    ref: ReferenceTrajectory,
    grid: HpGrid,
    problem: ProblemDefinition,
    h: int,
    i: int,
    step: float = 1e-6,
) -> LinearizedNode:
    x = ref.states[h, i]
    u = ref.controls[h, i]
    f_hat = problem.f_hat(x, u)
    rho = f_hat - reference_velocity(ref, grid, h, i)

    if problem.dynamics_jacobians is not None:
        A, B = problem.dynamics_jacobians(x, u)
    else:
        A, B = fd_jacobians(problem.f_hat, problem.state_chart, problem.control_chart, x, u, step)
    A_tilde = np.asarray(A, dtype=float) + retraction_terms(problem.state_chart, x, f_hat, rho, step)

    if problem.path_constraints is not None:
        g_ref = np.atleast_1d(np.asarray(problem.path_constraints(x, u), dtype=float))
        if problem.constraint_jacobians is not None:
            Gx, Gu = problem.constraint_jacobians(x, u)
        else:
            Gx, Gu = fd_jacobians(problem.path_constraints, problem.state_chart, problem.control_chart, x, u, step)
    else:
        g_ref = np.zeros(0)
        Gx = np.zeros((0, problem.n))
        Gu = np.zeros((0, problem.m))

    node = LinearizedNode(
        h=h, i=i, A_tilde=A_tilde, B=np.asarray(B, dtype=float), rho_hat=rho, f_hat=f_hat,
        Gx=np.asarray(Gx, dtype=float), Gu=np.asarray(Gu, dtype=float), g_ref=g_ref,
        T_blocks=transport_blocks(ref, grid, h, i),
    )
    for name in ("A_tilde", "B", "rho_hat", "Gx", "Gu", "g_ref"):
        if not np.all(np.isfinite(getattr(node, name))):
            raise NumericalError(f"non-finite {name} at segment {h}, node {i}")
    return node


def linearize_all(
    ref: ReferenceTrajectory,
    grid: HpGrid,
    problem: ProblemDefinition,
    step: float = 1e-6,
    workers: int = 1,
) -> List[List[LinearizedNode]]:
    """全部配点的线性化，nodes[h][i-1]"""
    keys = [(h, i) for h in range(grid.N) for i in range(1, grid.p + 1)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(lambda key: linearize_node(ref, grid, problem, key[0], key[1], step), keys))
    else:
        flat = [linearize_node(ref, grid, problem, h, i, step) for h, i in keys]
    return [flat[h * grid.p:(h + 1) * grid.p] for h in range(grid.N)]


@dataclass
class CollocationBlock:
    """单段配点等式 eta·η̂ + xi·ξ̂ + nu·ν̂ + dsigma·Δσ = rhs"""

    eta: np.ndarray
    xi: np.ndarray
    nu: np.ndarray
    dsigma: Optional[np.ndarray]
    rhs: np.ndarray


def assemble_collocation_rows(
    nodes: Sequence[LinearizedNode],
    grid: HpGrid,
    sigma_bar: float,
    free_final_time: bool,
) -> CollocationBlock:
    """Σ_k D_ik [T]_ik η̂_k − σ̄([Ã]η̂_i + [B]ξ̂_i) − f̂ Δσ − ν̂_i = σ̄ρ̂"""
    p = grid.p
    if len(nodes) != p:
        raise InvariantError(f"expected {p} linearized nodes, got {len(nodes)}")
    n = nodes[0].A_tilde.shape[0]
    m = nodes[0].B.shape[1]
    D = grid.segment.D
    eta = np.zeros((p * n, (p + 1) * n))
    xi = np.zeros((p * n, p * m))
    dsigma = np.zeros(p * n) if free_final_time else None
    rhs = np.zeros(p * n)
    for r, node in enumerate(nodes):
        rows = slice(r * n, (r + 1) * n)
        for k in range(p + 1):
            eta[rows, k * n:(k + 1) * n] += D[r, k] * node.T_blocks[k]
        eta[rows, node.i * n:(node.i + 1) * n] -= sigma_bar * node.A_tilde
        xi[rows, r * m:(r + 1) * m] = -sigma_bar * node.B
        if free_final_time:
            dsigma[rows] = -node.f_hat
        rhs[rows] = sigma_bar * node.rho_hat
    return CollocationBlock(eta=eta, xi=xi, nu=-np.eye(p * n), dsigma=dsigma, rhs=rhs)


def linking_rows(grid: HpGrid, n: int, ref: Optional[ReferenceTrajectory] = None) -> np.ndarray:
    """η̂_p^h − η̂_0^{h+1} = 0，作用于按段、节点排列的全部 η̂"""
    if ref is not None:
        ref.check_interfaces()
    width = grid.N * (grid.p + 1) * n
    rows = np.zeros(((grid.N - 1) * n, width))
    for h in range(grid.N - 1):
        last = (h * (grid.p + 1) + grid.p) * n
        first = (h + 1) * (grid.p + 1) * n
        rows[h * n:(h + 1) * n, last:last + n] = np.eye(n)
        rows[h * n:(h + 1) * n, first:first + n] = -np.eye(n)
    return rows


def interpolate_state(ref: ReferenceTrajectory, grid: HpGrid, h: int, tau: float) -> np.ndarray:
    """传输插值 R_{x̄_b}(Σ_k 𝓛_k(τ) R⁻¹_{x̄_b}(x̄_k))，x̄_b 取最近节点"""
    chart = ref.state_chart
    nodes = grid.segment.nodes
    b = int(np.argmin(np.abs(nodes - tau)))
    base = ref.states[h, b]
    coords = np.array([chart.inverse_retract(base, x) for x in ref.states[h]])
    return chart.retract(base, lagrange_eval(grid.segment, coords, tau))
