import numpy as np
import pytest
from numpy.testing import assert_allclose

import problems
import scvx
import transcription
from collocation import make_grid
from conftest import random_quaternion
from errors import DomainError
from geometry import Euclidean, Product, UnitQuaternion, quat_conj, quat_exp, quat_log, quat_mul
from models import BoundaryCondition, ProblemDefinition, ReferenceTrajectory


def _lq_reference(problem, grid, rng):
    ref = scvx.initial_reference(problem, grid)
    ref.states += 0.3 * rng.normal(size=ref.states.shape)
    ref.controls += 0.3 * rng.normal(size=ref.controls.shape)
    for h in range(1, ref.N):
        ref.states[h, 0] = ref.states[h - 1, -1]
    return ref


def test_euclidean_system_matches_classical_collocation(rng):
    problem = problems.lq_euclidean()
    grid = make_grid(2, 5, problem.t0, problem.tf)
    ref = _lq_reference(problem, grid, rng)
    nodes = transcription.linearize_all(ref, grid, problem)
    D = grid.segment.D
    n, p, sigma = 2, grid.p, grid.sigma
    for h in range(grid.N):
        blk = transcription.assemble_collocation_rows(nodes[h], grid, sigma, free_final_time=True)
        eta = np.kron(D, np.eye(n))
        for r in range(p):
            eta[r * n:(r + 1) * n, (r + 1) * n:(r + 2) * n] -= sigma * problems.LQ_A
        xi = np.kron(np.eye(p), -sigma * problems.LQ_B)
        f = np.array([problem.dynamics(ref.states[h, i], ref.controls[h, i]) for i in range(1, p + 1)])
        rhs = sigma * f.ravel() - (D @ ref.states[h]).ravel()
        assert np.max(np.abs(blk.eta - eta)) <= 1e-14
        assert np.max(np.abs(blk.xi - xi)) <= 1e-14
        assert np.array_equal(blk.nu, -np.eye(p * n))
        assert np.max(np.abs(blk.dsigma + f.ravel())) <= 1e-14
        assert_allclose(blk.rhs, rhs, atol=1e-12)


def test_defect_vanishes_on_exact_polynomial_trajectory():
    # ẋ = u，u 为常数时 x 线性
    problem = ProblemDefinition(
        name="integrator", state_chart=Euclidean(1), control_chart=Euclidean(1),
        dynamics=lambda x, u: u.copy(), boundary=BoundaryCondition(initial=np.zeros(1)), tf=2.0,
    )
    grid = make_grid(2, 4, 0.0, 2.0)
    times = grid.node_times()
    ref = ReferenceTrajectory(0.7 * times[..., None], np.full((2, 5, 1), 0.7), grid.sigma,
                              problem.state_chart, problem.control_chart)
    for h in range(2):
        for i in range(1, 5):
            assert np.max(np.abs(transcription.compute_defect(ref, grid, problem, h, i))) < 1e-12


def test_transport_blocks_are_identity_on_the_diagonal(attitude_reference, attitude_grid):
    for h in range(attitude_grid.N):
        for i in range(1, attitude_grid.p + 1):
            blocks = transcription.transport_blocks(attitude_reference, attitude_grid, h, i)
            assert blocks.shape == (attitude_grid.p + 1, 6, 6)
            assert np.array_equal(blocks[i], np.eye(6))


def _mixed_partial(a, h=1e-4):
    """∂η ∂t Log(R(q̄,η)⁻¹ ⊗ R(q̄,t a)) 的中心差分，R(q̄,·) 的 q̄ 在左乘中抵消"""
    M = np.zeros((3, 3))

    def L(eta, t):
        return quat_log(quat_mul(quat_conj(quat_exp(eta)), quat_exp(t * a)))

    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        M[:, j] = (L(e, h) - L(e, -h) - L(-e, h) + L(-e, -h)) / (4.0 * h * h)
    return M


def test_quaternion_retraction_terms_match_oracle(rng):
    chart = UnitQuaternion()
    for _ in range(100):
        q = random_quaternion(rng)
        f_hat = rng.normal(size=3)
        rho = rng.normal(size=3)
        terms = transcription.retraction_terms(chart, q, f_hat, rho)
        # −C + S − ℰ 等于参考速度对基点的敏感度 −[f̂ − ρ̂]×
        assert np.max(np.abs(terms + _mixed_partial(f_hat - rho))) < 1e-5


def test_quaternion_retraction_terms_in_product(rng):
    chart = Product([Euclidean(2), UnitQuaternion(), Euclidean(3)])
    x = np.concatenate((rng.normal(size=2), random_quaternion(rng), rng.normal(size=3)))
    f_hat = rng.normal(size=8)
    rho = rng.normal(size=8)
    terms = transcription.retraction_terms(chart, x, f_hat, rho)
    assert np.array_equal(terms[:2], np.zeros((2, 8)))
    assert np.array_equal(terms[5:], np.zeros((3, 8)))
    assert np.max(np.abs(terms[2:5, 2:5] + _mixed_partial(f_hat[2:5] - rho[2:5]))) < 1e-5


def test_linearization_is_frame_invariant(attitude_problem, attitude_grid, attitude_reference, rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(0.9) * K + (1 - np.cos(0.9)) * K @ K
    rotated_chart = Product([UnitQuaternion(frame_rotation=R), Euclidean(3)])
    rotated = ProblemDefinition(
        name="attitude-rotated", state_chart=rotated_chart, control_chart=attitude_problem.control_chart,
        dynamics=attitude_problem.dynamics, boundary=attitude_problem.boundary, tf=attitude_problem.tf,
    )
    ref_rot = ReferenceTrajectory(attitude_reference.states, attitude_reference.controls,
                                  attitude_reference.sigma, rotated_chart, attitude_reference.control_chart)
    P = np.eye(6)
    P[:3, :3] = R
    for h in range(attitude_grid.N):
        for i in (1, attitude_grid.p):
            a = transcription.linearize_node(attitude_reference, attitude_grid, attitude_problem, h, i)
            b = transcription.linearize_node(ref_rot, attitude_grid, rotated, h, i)
            assert_allclose(b.rho_hat, P.T @ a.rho_hat, atol=1e-11)
            assert_allclose(b.f_hat, P.T @ a.f_hat, atol=1e-12)
            assert_allclose(b.A_tilde, P.T @ a.A_tilde @ P, atol=1e-7)
            assert_allclose(b.B, P.T @ a.B, atol=1e-7)
            for k in range(attitude_grid.p + 1):
                assert_allclose(b.T_blocks[k], P.T @ a.T_blocks[k] @ P, atol=1e-13)


def test_concurrent_linearization_matches_sequential(attitude_problem, attitude_grid, attitude_reference):
    seq = transcription.linearize_all(attitude_reference, attitude_grid, attitude_problem, workers=1)
    par = transcription.linearize_all(attitude_reference, attitude_grid, attitude_problem, workers=3)
    for a_seg, b_seg in zip(seq, par):
        for a, b in zip(a_seg, b_seg):
            assert (a.h, a.i) == (b.h, b.i)
            assert np.array_equal(a.A_tilde, b.A_tilde)
            assert np.array_equal(a.rho_hat, b.rho_hat)


def test_fd_jacobians_recover_linear_dynamics(rng):
    problem = problems.lq_euclidean()
    A, B = transcription.fd_jacobians(problem.dynamics, problem.state_chart, problem.control_chart,
                                      rng.normal(size=2), rng.normal(size=1))
    assert_allclose(A, problems.LQ_A, atol=1e-9)
    assert_allclose(B, problems.LQ_B, atol=1e-9)


def test_linking_rows_pattern():
    grid = make_grid(3, 2, 0.0, 1.0)
    rows = transcription.linking_rows(grid, 2)
    assert rows.shape == (4, 18)
    eta = np.arange(18, dtype=float).reshape(3, 3, 2)
    eta[1, 0] = eta[0, 2]
    eta[2, 0] = eta[1, 2]
    assert np.array_equal(rows @ eta.ravel(), np.zeros(4))


def test_injectivity_violation_names_the_nodes(attitude_problem, attitude_grid, attitude_reference):
    ref = attitude_reference.copy()
    ref.states[0, 2, :4] = -ref.states[0, 1, :4]
    with pytest.raises(DomainError, match="segment 0"):
        transcription.compute_defect(ref, attitude_grid, attitude_problem, 0, 1)


def test_dense_output_passes_through_nodes(attitude_reference, attitude_grid, rng):
    seg = attitude_grid.segment
    for k, tau in enumerate(seg.nodes):
        x = transcription.interpolate_state(attitude_reference, attitude_grid, 1, tau)
        assert_allclose(x, attitude_reference.states[1, k], atol=1e-12)
    x = transcription.interpolate_state(attitude_reference, attitude_grid, 0, rng.uniform(-1, 1))
    assert abs(np.linalg.norm(x[:4]) - 1.0) <= 2e-15
