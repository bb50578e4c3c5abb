import numpy as np
import pytest

import problems
import scvx
from collocation import make_grid
from geometry import quat_exp, quat_mul


@pytest.fixture
def rng():
    return np.random.default_rng(20241017)


def random_quaternion(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_unit(rng, n: int = 3) -> np.ndarray:
    s = rng.normal(size=n)
    return s / np.linalg.norm(s)


def nearby_quaternion(rng, q, max_angle: float = 1.0) -> np.ndarray:
    """q ⊗ Exp(φ)，‖φ‖ < max_angle"""
    phi = random_unit(rng) * rng.uniform(0.0, max_angle)
    return quat_mul(q, quat_exp(phi))


@pytest.fixture
def lq_problem():
    return problems.lq_euclidean()


@pytest.fixture
def lq_grid(lq_problem):
    return make_grid(2, 4, lq_problem.t0, lq_problem.tf)


@pytest.fixture
def attitude_problem():
    return problems.attitude_toy()


@pytest.fixture
def attitude_grid(attitude_problem):
    return make_grid(2, 6, attitude_problem.t0, attitude_problem.tf)


@pytest.fixture
def attitude_reference(attitude_problem, attitude_grid, rng):
    """测地线初值上叠加随机角速度与力矩，保持分段接口一致"""
    ref = scvx.initial_reference(attitude_problem, attitude_grid)
    ref.states[:, :, 4:] += 0.1 * rng.normal(size=ref.states[:, :, 4:].shape)
    ref.controls += 0.1 * rng.normal(size=ref.controls.shape)
    for h in range(1, ref.N):
        ref.states[h, 0] = ref.states[h - 1, -1]
    return ref
