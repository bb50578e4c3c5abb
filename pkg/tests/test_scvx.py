import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

import conic
import landing
import problems
import scvx
from collocation import make_grid
from conic import ConicSolution, SolutionStatus
from errors import ArgumentError, InvariantError
from models import SolveStatus
from schemas import ConicSolverSettings, ScvxSettings


def _solution(eta, xi, dsigma=None):
    values = {"eta": eta, "xi": xi}
    if dsigma is not None:
        values["dsigma"] = np.array([dsigma])
    return ConicSolution(SolutionStatus.OPTIMAL, np.zeros(1), 0.0, values)


def _lq_kkt(problem, ref, grid, settings):
    """经典配点 + 二次代价的等式约束 QP，直接解 KKT"""
    N, p, n, m = grid.N, grid.p, 2, 1
    D, w, sigma = grid.segment.D, grid.segment.w, ref.sigma
    n_eta, n_xi = N * (p + 1) * n, N * p * m

    def e(h, k):
        return (h * (p + 1) + k) * n

    def u(h, c):
        return n_eta + (h * p + c) * m

    H = np.zeros((n_eta + n_xi, n_eta + n_xi))
    g = np.zeros(n_eta + n_xi)
    rows, rhs = [], []
    for h in range(N):
        for c in range(p):
            i = c + 1
            H[e(h, i):e(h, i) + n, e(h, i):e(h, i) + n] += sigma * w[c] * problems.LQ_Q
            H[u(h, c):u(h, c) + m, u(h, c):u(h, c) + m] += sigma * w[c] * problems.LQ_R + 2.0 * settings.mu_r * w[c] * np.eye(m)
            g[e(h, i):e(h, i) + n] += sigma * w[c] * problems.LQ_Q @ ref.states[h, i]
            g[u(h, c):u(h, c) + m] += sigma * w[c] * problems.LQ_R @ ref.controls[h, i]
            f = problem.dynamics(ref.states[h, i], ref.controls[h, i])
            block = np.zeros((n, n_eta + n_xi))
            for k in range(p + 1):
                block[:, e(h, k):e(h, k) + n] += D[c, k] * np.eye(n)
            block[:, e(h, i):e(h, i) + n] -= sigma * problems.LQ_A
            block[:, u(h, c):u(h, c) + m] -= sigma * problems.LQ_B
            rows.append(block)
            rhs.append(sigma * f - D[c] @ ref.states[h])
        if h > 0:
            block = np.zeros((n, n_eta + n_xi))
            block[:, e(h, 0):e(h, 0) + n] = np.eye(n)
            block[:, e(h - 1, p):e(h - 1, p) + n] = -np.eye(n)
            rows.append(block)
            rhs.append(np.zeros(n))
    for (h, k), target in (((0, 0), problem.boundary.initial), ((N - 1, p), problem.boundary.final)):
        block = np.zeros((n, n_eta + n_xi))
        block[:, e(h, k):e(h, k) + n] = np.eye(n)
        rows.append(block)
        rhs.append(target - ref.states[h, k])
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    kkt = np.block([[H, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
    z = np.linalg.solve(kkt, np.concatenate((-g, b)))[:n_eta + n_xi]
    return z[:n_eta].reshape(N, p + 1, n), z[n_eta:].reshape(N, p, m)


def test_lq_subproblem_matches_kkt_solution(lq_problem, lq_grid):
    settings = ScvxSettings(mu_r=1e-2, solver=ConicSolverSettings(feasibility_tol=1e-10, gap_tol=1e-10))
    ref = scvx.initial_reference(lq_problem, lq_grid)
    program = scvx.build_subproblem(lq_problem, ref, lq_grid, settings)
    solution = conic.solve(program, settings.solver)
    assert solution.status == SolutionStatus.OPTIMAL
    eta, xi = _lq_kkt(lq_problem, ref, lq_grid, settings)
    assert_allclose(solution.values["eta"], eta, atol=1e-5)
    assert_allclose(solution.values["xi"], xi, atol=1e-5)
    assert np.max(np.abs(solution.values["nu"])) <= 1e-7


def test_lq_converges_without_virtual_control(lq_problem, lq_grid):
    ref = scvx.initial_reference(lq_problem, lq_grid)
    result = scvx.run(lq_problem, ref, lq_grid, ScvxSettings())
    assert result.status == SolveStatus.CONVERGED
    assert len(result.history) <= 20
    assert all(rec.max_virtual_control <= 1e-7 for rec in result.history)
    final = result.reference
    assert_allclose(final.states[0, 0], [1.0, 0.0], atol=1e-9)
    assert_allclose(final.states[-1, -1], [0.0, 0.0], atol=1e-7)
    final.check_interfaces()


def test_run_is_deterministic(lq_problem, lq_grid):
    ref = scvx.initial_reference(lq_problem, lq_grid)
    a = scvx.run(lq_problem, ref, lq_grid)
    b = scvx.run(lq_problem, ref, lq_grid)
    assert [r.objective for r in a.history] == [r.objective for r in b.history]
    assert np.array_equal(a.reference.states, b.reference.states)
    assert np.array_equal(a.reference.controls, b.reference.controls)


def test_zero_step_keeps_reference_bit_identical(attitude_reference, attitude_grid):
    ref = attitude_reference
    N, p = ref.N, ref.p
    new = scvx.update_reference(ref, _solution(np.zeros((N, p + 1, 6)), np.zeros((N, p, 3))))
    assert np.array_equal(new.states, ref.states)
    assert np.array_equal(new.controls[:, 1:], ref.controls[:, 1:])
    assert np.array_equal(new.controls[0, 0], new.controls[0, 1])
    assert np.array_equal(new.controls[1, 0], new.controls[0, -1])
    assert new.sigma == ref.sigma


def test_quaternion_step_stays_on_manifold(attitude_reference, rng):
    ref = attitude_reference
    N, p = ref.N, ref.p
    eta = np.zeros((N, p + 1, 6))
    direction = rng.normal(size=(N, p + 1, 3))
    eta[..., :3] = 0.3 * direction / np.linalg.norm(direction, axis=2, keepdims=True)
    new = scvx.update_reference(ref, _solution(eta, np.zeros((N, p, 3))))
    assert new.membership_errors()[0] <= 1e-14
    new.check_interfaces()
    assert not np.array_equal(new.states, ref.states)


def test_time_scaling_update(attitude_reference):
    ref = attitude_reference
    N, p = ref.N, ref.p
    eta, xi = np.zeros((N, p + 1, 6)), np.zeros((N, p, 3))
    new = scvx.update_reference(ref, _solution(eta, xi, dsigma=0.1))
    assert new.sigma == pytest.approx(ref.sigma + 0.1)
    with pytest.raises(InvariantError):
        scvx.update_reference(ref, _solution(eta, xi, dsigma=-ref.sigma - 1.0))
    with pytest.raises(ArgumentError):
        scvx.update_reference(ref, ConicSolution(SolutionStatus.INFEASIBLE, None, float("nan")))


def test_infeasible_path_constraint_is_absorbed_by_slack(lq_problem, lq_grid):
    problem = dataclasses.replace(lq_problem, path_constraints=lambda x, u: np.array([1.0]))
    ref = scvx.initial_reference(problem, lq_grid)
    program = scvx.build_subproblem(problem, ref, lq_grid, ScvxSettings())
    solution = conic.solve(program)
    assert solution.status == SolutionStatus.OPTIMAL
    assert np.all(solution.values["s"] >= 1.0 - 1e-7)


def test_landing_subproblem_census():
    problem = landing.default_problem()
    grid = make_grid(5, 10, problem.t0, problem.tf)
    ref = scvx.initial_reference(problem, grid)
    program = scvx.build_subproblem(problem, ref, grid, ScvxSettings())
    assert program.census() == {"variables": 2415, "equalities": 727, "inequalities": 1750, "cones": 150}
    assert program.blocks["eta"].shape == (5, 11, 13)
    assert program.blocks["xi"].shape == (5, 10, 3)
    assert "dsigma" not in program.blocks


def test_attitude_converges_on_the_manifold(attitude_problem):
    grid = make_grid(2, 8, attitude_problem.t0, attitude_problem.tf)
    ref = scvx.initial_reference(attitude_problem, grid)
    result = scvx.run(attitude_problem, ref, grid, ScvxSettings())
    assert result.status == SolveStatus.CONVERGED
    assert len(result.history) <= 30
    assert all(rec.max_norm_violation < 1e-12 for rec in result.history)
    final = result.reference
    assert_allclose(final.states[-1, -1, :4], problems.attitude_target(), atol=1e-7)


def test_attitude_solution_survives_integration(attitude_problem):
    grid = make_grid(2, 8, attitude_problem.t0, attitude_problem.tf)
    ref = scvx.initial_reference(attitude_problem, grid)
    result = scvx.run(attitude_problem, ref, grid, ScvxSettings(mu_r=1e-4))
    assert result.status == SolveStatus.CONVERGED
    assert scvx.integration_defects(attitude_problem, result.reference, grid) <= 1e-6


def test_failed_subproblem_returns_last_reference(lq_problem, lq_grid, monkeypatch):
    def infeasible(program, settings=None):
        return ConicSolution(SolutionStatus.INFEASIBLE, None, float("nan"))

    monkeypatch.setattr(conic, "solve", infeasible)
    ref = scvx.initial_reference(lq_problem, lq_grid)
    result = scvx.run(lq_problem, ref, lq_grid)
    assert result.status == SolveStatus.SUBPROBLEM_FAILURE
    assert result.failure_iteration == 1
    assert "Infeasible" in result.failure_detail
    assert np.array_equal(result.reference.states, ref.states)
    assert result.history == []


def test_linearization_failure_is_reported(attitude_problem, attitude_grid, attitude_reference):
    ref = attitude_reference.copy()
    ref.states[0, 2, :4] = -ref.states[0, 1, :4]
    result = scvx.run(attitude_problem, ref, attitude_grid)
    assert result.status == SolveStatus.SUBPROBLEM_FAILURE
    assert "segment 0" in result.failure_detail


def test_iteration_cap(attitude_problem, attitude_grid):
    ref = scvx.initial_reference(attitude_problem, attitude_grid)
    result = scvx.run(attitude_problem, ref, attitude_grid, ScvxSettings(max_iters=1))
    assert result.status == SolveStatus.MAX_ITERS
    assert len(result.history) == 1
    assert result.history[0].iteration == 1


def test_step_tolerance_comes_from_problem_unless_overridden(attitude_problem, attitude_grid):
    loose = dataclasses.replace(attitude_problem, step_tolerance=1e6)
    ref = scvx.initial_reference(loose, attitude_grid)
    result = scvx.run(loose, ref, attitude_grid, ScvxSettings())
    assert result.status == SolveStatus.CONVERGED
    assert len(result.history) == 1

    result = scvx.run(loose, ref, attitude_grid, ScvxSettings(epsilon=1e-300, max_iters=2))
    assert result.status == SolveStatus.MAX_ITERS
    assert ScvxSettings().epsilon is None and ScvxSettings().max_iters == 100


def test_trust_weight_comes_from_problem_unless_overridden(lq_problem, lq_grid):
    N, p = lq_grid.N, lq_grid.p
    values = {"nu": np.zeros((N, p, 2)), "s": np.zeros((N, p, 0)), "r": np.ones((N, p))}
    solution = ConicSolution(SolutionStatus.OPTIMAL, np.zeros(1), 0.0, values)
    heavy = dataclasses.replace(lq_problem, trust_region_weight=3.0)
    total_w = N * lq_grid.segment.w.sum()
    out = scvx.penalty_breakdown(solution, heavy, lq_grid, ScvxSettings())
    assert out["penalty_trust"] == pytest.approx(3.0 * total_w)
    out = scvx.penalty_breakdown(solution, heavy, lq_grid, ScvxSettings(mu_r=0.5))
    assert out["penalty_trust"] == pytest.approx(0.5 * total_w)
