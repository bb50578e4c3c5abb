"""内蕴逐次伪谱凸化外循环：线性化 → 凸子问题 → 收缩更新，直到 ‖η̂*‖ < ε。"""
import logging
import time
from typing import List, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import BarycentricInterpolator
from scipy.linalg import block_diag

import conic
from collocation import HpGrid
from conic import ConicProgram, ConicSolution, ProgramBuilder, SolutionStatus
from errors import ArgumentError, DomainError, InvariantError, NumericalError
from models import (LinearizedNode, ProblemDefinition, ReferenceTrajectory, SolveResult,
                    SolveStatus)
from schemas import IterationRecord, ScvxSettings
from transcription import (assemble_collocation_rows, fd_gradient, fd_jacobians, linearize_all,
                           linking_rows)

_log = logging.getLogger(__name__)

# 步长增大超过该倍数时告警
STALL_FACTOR = 10.0


def initial_reference(
    problem: ProblemDefinition,
    grid: HpGrid,
    nominal_control: Optional[np.ndarray] = None,
) -> ReferenceTrajectory:
    """欧氏块线性插值、流形块沿收缩测地线插值边界状态；控制取常值"""
    chart = problem.state_chart
    x0 = chart.check_point(problem.boundary.initial, "initial state")
    xf = x0 if problem.boundary.final is None else chart.check_point(problem.boundary.final, "final state")
    direction = chart.inverse_retract(x0, xf)
    times = grid.node_times()
    states = np.empty((grid.N, grid.p + 1, chart.ambient_dim))
    for h in range(grid.N):
        for k in range(grid.p + 1):
            if h > 0 and k == 0:
                states[h, 0] = states[h - 1, grid.p]
                continue
            s = (times[h, k] - grid.t0) / (grid.tf - grid.t0)
            states[h, k] = chart.retract(x0, s * direction)

    u = problem.nominal_control if nominal_control is None else nominal_control
    if u is None:
        raise ArgumentError(f"problem '{problem.name}' needs a nominal control for the initial guess")
    u = problem.control_chart.check_point(u, "nominal control")
    controls = np.broadcast_to(u, (grid.N, grid.p + 1, u.size)).copy()
    return ReferenceTrajectory(states, controls, grid.sigma, chart, problem.control_chart)


def _free_final_time(problem: ProblemDefinition, settings: ScvxSettings) -> bool:
    return problem.free_final_time if settings.free_final_time is None else settings.free_final_time


def _epsilon(problem: ProblemDefinition, settings: ScvxSettings) -> float:
    return problem.step_tolerance if settings.epsilon is None else settings.epsilon


def _mu_r(problem: ProblemDefinition, settings: ScvxSettings) -> float:
    return problem.trust_region_weight if settings.mu_r is None else settings.mu_r


def _sigma_bounds(problem: ProblemDefinition, settings: ScvxSettings):
    return settings.sigma_bounds if settings.sigma_bounds is not None else problem.sigma_bounds


def _path_count(problem: ProblemDefinition, ref: ReferenceTrajectory) -> int:
    if problem.path_constraints is None:
        return 0
    return int(np.atleast_1d(problem.path_constraints(ref.states[0, -1], ref.controls[0, -1])).size)


def build_subproblem(
    problem: ProblemDefinition,
    ref: ReferenceTrajectory,
    grid: HpGrid,
    settings: ScvxSettings,
    nodes: Optional[List[List[LinearizedNode]]] = None,
    initial_guess: Optional[np.ndarray] = None,
) -> ConicProgram:
    """组装凸子问题。

    变量块：eta (N, p+1, n)、xi (N, p, m)、nu (N, p, n)、s (N, p, n_g)、
    r (N, p)、可选 dsigma，以及罚项上镜图辅助变量。
    """
    ref.check_interfaces()
    if nodes is None:
        nodes = linearize_all(ref, grid, problem, settings.fd_step, settings.workers)
    N, p, n, m = grid.N, grid.p, problem.n, problem.m
    free_tf = _free_final_time(problem, settings)
    n_g = _path_count(problem, ref)
    tr_idx = problem.trust_indices()
    mu_r = _mu_r(problem, settings)
    sigma = ref.sigma
    w = grid.segment.w

    b = ProgramBuilder()
    eta = b.add_variable("eta", (N, p + 1, n))
    xi = b.add_variable("xi", (N, p, m))
    ds = b.add_variable("dsigma", (1,)) if free_tf else None
    nu = b.add_variable("nu", (N, p, n))
    s = b.add_variable("s", (N, p, n_g))
    r = b.add_variable("r", (N, p)) if tr_idx.size else None

    # 罚项：Σ w_i(μ_ν‖ν̂‖₁ + μ_s(ŝ)₊ + μ_r r)
    node_w = np.broadcast_to(w, (N, p))
    conic.encode_l1_penalty(b, "t_nu", nu, settings.mu_nu * np.repeat(node_w.ravel(), n))
    if n_g:
        conic.encode_positive_part(b, "t_s", s, settings.mu_s * np.repeat(node_w.ravel(), n_g))
    if r is not None:
        for h in range(N):
            for c in range(p):
                conic.encode_trust_region(b, xi[h, c][tr_idx], int(r[h, c]), mu_r * w[c])

    # 配点等式与分段连接
    for h in range(N):
        blk = assemble_collocation_rows(nodes[h], grid, sigma, free_tf)
        terms = [(eta[h], blk.eta), (xi[h], blk.xi), (nu[h], blk.nu)]
        if free_tf:
            terms.append((ds, blk.dsigma))
        b.add_equalities(terms, blk.rhs)
    if N > 1:
        link = linking_rows(grid, n)
        b.add_equalities([(eta, link)], np.zeros(link.shape[0]))

    # 路径约束
    for h in range(N):
        for c in range(p):
            i = c + 1
            node = nodes[h][c]
            x_bar, u_bar = ref.states[h, i], ref.controls[h, i]
            if n_g:
                b.add_inequalities(
                    [(eta[h, i], node.Gx), (xi[h, c], node.Gu), (s[h, c], -np.eye(n_g))],
                    -node.g_ref,
                )
            if problem.convex_constraints:
                Ex = problem.state_chart.frame(x_bar)
                Eu = problem.control_chart.frame(u_bar)
                for con in problem.convex_constraints:
                    bound = con.hx @ x_bar + con.hu @ u_bar + con.d
                    bx, bu = con.hx @ Ex, con.hu @ Eu
                    if con.is_linear:
                        b.add_inequalities([(eta[h, i], -bx), (xi[h, c], -bu)], bound)
                    else:
                        offset = con.Fx @ x_bar + con.Fu @ u_bar + con.g
                        b.add_cone([(eta[h, i], con.Fx @ Ex), (xi[h, c], con.Fu @ Eu)], offset,
                                   [(eta[h, i], bx), (xi[h, c], bu)], bound)

    if settings.state_trust_region is not None:
        for h in range(N):
            for k in range(p + 1):
                b.add_cone([(eta[h, k], np.eye(n))], np.zeros(n), [], settings.state_trust_region)

    _add_boundary_rows(b, problem, ref, eta, settings.fd_step)
    _add_cost(b, problem, ref, grid, eta, xi, ds, settings.fd_step)

    if free_tf:
        bounds = _sigma_bounds(problem, settings)
        if bounds is not None:
            b.add_inequalities([(ds, [1.0])], bounds[1] - sigma)
            b.add_inequalities([(ds, [-1.0])], sigma - bounds[0])

    return b.build(initial_guess=initial_guess)


def _add_boundary_rows(b: ProgramBuilder, problem: ProblemDefinition, ref: ReferenceTrajectory,
                       eta: np.ndarray, step: float) -> None:
    chart = problem.state_chart
    bc = problem.boundary
    first, last = ref.states[0, 0], ref.states[-1, -1]
    init_mask, final_mask = bc.masks(problem.n)
    if np.any(init_mask):
        target = chart.inverse_retract(first, bc.initial)
        rows = np.eye(problem.n)[init_mask]
        b.add_equalities([(eta[0, 0], rows)], target[init_mask])
    if np.any(final_mask):
        target = chart.inverse_retract(last, bc.final)
        rows = np.eye(problem.n)[final_mask]
        b.add_equalities([(eta[-1, -1], rows)], target[final_mask])
    if bc.psi is not None:
        # ψ(x₀, x_f) = 0 线性化
        psi0 = np.atleast_1d(bc.psi(first, last))
        G0, Gf = fd_jacobians(bc.psi, chart, chart, first, last, step)
        b.add_equalities([(eta[0, 0], G0), (eta[-1, -1], Gf)], -psi0)


def _add_cost(b: ProgramBuilder, problem: ProblemDefinition, ref: ReferenceTrajectory, grid: HpGrid,
              eta: np.ndarray, xi: np.ndarray, ds, step: float) -> None:
    """J_cvx：φ 与求积加权 L 的一阶展开，外加可选二次项"""
    sigma = ref.sigma
    w = grid.segment.w
    if problem.running_cost is not None or problem.cost_hessian is not None:
        running_total = 0.0
        for h in range(grid.N):
            for c in range(grid.p):
                i = c + 1
                x_bar, u_bar = ref.states[h, i], ref.controls[h, i]
                weight = sigma * w[c]
                if problem.running_cost is not None:
                    L0 = float(problem.running_cost(x_bar, u_bar))
                    gx, gu = fd_jacobians(lambda x, u: np.array([problem.running_cost(x, u)]),
                                          problem.state_chart, problem.control_chart, x_bar, u_bar, step)
                    b.add_constant(weight * L0)
                    b.add_objective(eta[h, i], weight * gx[0])
                    b.add_objective(xi[h, c], weight * gu[0])
                    running_total += w[c] * L0
                if problem.cost_hessian is not None:
                    Q, R = problem.cost_hessian(x_bar, u_bar)
                    idx = np.concatenate((eta[h, i].ravel(), xi[h, c].ravel()))
                    conic.encode_quadratic(b, f"q_{h}_{i}", idx, weight * block_diag(Q, R))
        if ds is not None and running_total != 0.0:
            b.add_objective(ds, running_total)
    if problem.terminal_cost is not None:
        x_f = ref.states[-1, -1]
        b.add_constant(float(problem.terminal_cost(x_f)))
        b.add_objective(eta[-1, -1], fd_gradient(problem.terminal_cost, problem.state_chart, x_f, step))
    if problem.terminal_hessian is not None:
        conic.encode_quadratic(b, "q_terminal", eta[-1, -1], problem.terminal_hessian(ref.states[-1, -1]))


def update_reference(ref: ReferenceTrajectory, solution: ConicSolution) -> ReferenceTrajectory:
    """x̄ ← R_x̄(E η̂*)，ū ← R_ū(F ξ̂*)，σ̄ ← σ̄ + Δσ*；接口点只收缩一次后共享"""
    if solution.status != SolutionStatus.OPTIMAL:
        raise ArgumentError(f"cannot update from a {solution.status.value} subproblem")
    eta = solution.values["eta"]
    xi = solution.values["xi"]
    N, p = ref.N, ref.p
    states = np.empty_like(ref.states)
    controls = np.empty_like(ref.controls)
    for h in range(N):
        for k in range(p + 1):
            if h > 0 and k == 0:
                states[h, 0] = states[h - 1, p]
            else:
                states[h, k] = ref.state_chart.retract(ref.states[h, k], eta[h, k])
        for i in range(1, p + 1):
            controls[h, i] = ref.control_chart.retract(ref.controls[h, i], xi[h, i - 1])
        # 非配点控制：第一段取首个配点，其余段沿用上一段末点
        controls[h, 0] = controls[h, 1] if h == 0 else controls[h - 1, p]
    sigma = ref.sigma
    if "dsigma" in solution.values:
        sigma = sigma + float(solution.values["dsigma"][0])
        if not sigma > 0:
            raise InvariantError(f"time scaling became non-positive ({sigma})")
    new = ReferenceTrajectory(states, controls, sigma, ref.state_chart, ref.control_chart)
    new.check_membership()
    return new


def penalty_breakdown(solution: ConicSolution, problem: ProblemDefinition, grid: HpGrid,
                      settings: ScvxSettings) -> dict:
    w = grid.segment.w
    nu = solution.values["nu"]
    out = {
        "penalty_virtual": float(settings.mu_nu * np.sum(w[None, :] * np.abs(nu).sum(axis=2))),
        "penalty_slack": 0.0,
        "penalty_trust": 0.0,
    }
    s = solution.values["s"]
    if s.size:
        out["penalty_slack"] = float(settings.mu_s * np.sum(w[None, :] * np.maximum(s, 0.0).sum(axis=2)))
    if "r" in solution.values:
        out["penalty_trust"] = float(_mu_r(problem, settings) * np.sum(w[None, :] * solution.values["r"]))
    return out


def run(
    problem: ProblemDefinition,
    initial_ref: ReferenceTrajectory,
    grid: HpGrid,
    settings: Optional[ScvxSettings] = None,
) -> SolveResult:
    settings = settings or ScvxSettings()
    ref = initial_ref.copy()
    ref.check_interfaces()
    ref.check_membership()
    history: List[IterationRecord] = []
    prev_step = None
    prev_objective = None
    warm = None
    epsilon = _epsilon(problem, settings)
    _log.debug("step tolerance %.3g, trust-region weight %.3g", epsilon, _mu_r(problem, settings))

    for k in range(1, settings.max_iters + 1):
        started = time.perf_counter()
        try:
            nodes = linearize_all(ref, grid, problem, settings.fd_step, settings.workers)
            program = build_subproblem(problem, ref, grid, settings, nodes=nodes, initial_guess=warm)
        except (DomainError, NumericalError) as exc:
            _log.error("iteration %d: linearization failed: %s", k, exc.detail)
            return SolveResult(ref, SolveStatus.SUBPROBLEM_FAILURE, history, k, exc.detail)

        solution = conic.solve(program, settings.solver)
        if solution.status != SolutionStatus.OPTIMAL:
            detail = f"subproblem {solution.status.value}: {solution.diagnostics}"
            _log.error("iteration %d: %s", k, detail)
            return SolveResult(ref, SolveStatus.SUBPROBLEM_FAILURE, history, k, detail)

        new_ref = update_reference(ref, solution)
        eta = solution.values["eta"]
        step_state = float(np.max(np.linalg.norm(eta, axis=2)))
        xi = solution.values["xi"]
        step_control = float(np.max(np.linalg.norm(xi, axis=2))) if xi.size else 0.0
        step_sigma = abs(float(solution.values["dsigma"][0])) if "dsigma" in solution.values else 0.0
        max_defect = max(float(np.max(np.abs(node.rho_hat))) for seg in nodes for node in seg)
        record = IterationRecord(
            iteration=k,
            status=solution.status.value,
            objective=solution.objective,
            max_defect=max_defect,
            step_state=step_state,
            step_control=step_control,
            step_sigma=step_sigma,
            sigma=new_ref.sigma,
            max_virtual_control=float(np.max(np.abs(solution.values["nu"]))),
            max_norm_violation=max(new_ref.membership_errors()),
            wall_time=time.perf_counter() - started,
            **penalty_breakdown(solution, problem, grid, settings),
        )
        history.append(record)
        _log.info(
            "iter %2d  obj %.10g  |eta| %.3e  |xi| %.3e  defect %.3e  nu %.3e",
            k, record.objective, step_state, step_control, max_defect, record.max_virtual_control,
        )

        if prev_step is not None and step_state > STALL_FACTOR * prev_step:
            _log.warning("iteration %d: state step grew from %.3e to %.3e", k, prev_step, step_state)
        if prev_objective is not None and record.objective > prev_objective + 1e-6 * (1.0 + abs(prev_objective)):
            _log.warning("iteration %d: penalized objective increased %.10g -> %.10g",
                         k, prev_objective, record.objective)
        prev_step, prev_objective = step_state, record.objective
        if settings.solver.warm_start:
            warm = solution.x
        ref = new_ref

        if step_state < epsilon:
            return SolveResult(ref, SolveStatus.CONVERGED, history)

    _log.warning("no convergence after %d iterations", settings.max_iters)
    return SolveResult(ref, SolveStatus.MAX_ITERS, history)


def integration_defects(problem: ProblemDefinition, ref: ReferenceTrajectory, grid: HpGrid,
                        tol: float = 1e-12) -> float:
    """用 DOP853 逐段积分复核，返回节点处最大标架坐标距离"""
    seg = grid.segment
    tau_c = seg.collocation_nodes
    chart, uchart = problem.state_chart, problem.control_chart
    worst = 0.0
    for h in range(grid.N):
        base = ref.controls[h, -1]
        coords = np.array([uchart.inverse_retract(base, ref.controls[h, i]) for i in range(1, grid.p + 1)])
        if grid.p > 1:
            interp = BarycentricInterpolator(tau_c, coords, axis=0)
        else:
            interp = lambda tau, c=coords[0]: c  # noqa: E731
        t_start = grid.time(h, -1.0, ref.sigma)
        t_nodes = grid.time(h, tau_c, ref.sigma)

        def rhs(t, x):
            tau = (t - grid.t0) / ref.sigma - 2.0 * h - 1.0
            u = uchart.retract(base, np.asarray(interp(tau), dtype=float))
            return problem.dynamics(x, u)

        sol = solve_ivp(rhs, (t_start, t_nodes[-1]), ref.states[h, 0], method="DOP853",
                        t_eval=t_nodes, rtol=tol, atol=tol)
        if not sol.success:
            raise NumericalError(f"integrator failed on segment {h}: {sol.message}")
        for c in range(grid.p):
            gap = chart.inverse_retract(ref.states[h, c + 1], sol.y[:, c])
            worst = max(worst, float(np.linalg.norm(gap)))
    return worst
