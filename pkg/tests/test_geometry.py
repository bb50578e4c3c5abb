import numpy as np
import pytest
from numpy.testing import assert_allclose

import geometry
from conftest import nearby_quaternion, random_quaternion, random_unit
from errors import ArgumentError, DomainError
from geometry import (Euclidean, Product, Sphere2, UnitQuaternion, chart_from_description, quat_exp,
                      quat_log, quat_mul, right_jacobian, skew)


def _random_point(chart, rng):
    if chart.kind == geometry.ChartKind.QUATERNION:
        return random_quaternion(rng)
    if chart.kind == geometry.ChartKind.SPHERE:
        return random_unit(rng)
    if chart.kind == geometry.ChartKind.PRODUCT:
        return np.concatenate([_random_point(c, rng) for c in chart.components])
    return rng.normal(size=chart.ambient_dim)


CHARTS = [
    Euclidean(4),
    UnitQuaternion(),
    Sphere2(),
    Product([Euclidean(7), UnitQuaternion(), Euclidean(3)]),
    Product([Euclidean(1), Sphere2()]),
]


@pytest.mark.parametrize("chart", CHARTS, ids=lambda c: c.describe())
def test_zero_retraction_is_bit_exact(chart, rng):
    for _ in range(10_000):
        x = _random_point(chart, rng)
        assert np.array_equal(chart.retract(x, np.zeros(chart.intrinsic_dim)), x)


@pytest.mark.parametrize("chart", CHARTS, ids=lambda c: c.describe())
def test_self_transport_is_identity(chart, rng):
    eye = np.eye(chart.intrinsic_dim)
    for _ in range(10_000):
        x = _random_point(chart, rng)
        assert np.array_equal(chart.transport_matrix(x, x), eye)


@pytest.mark.parametrize("chart", CHARTS, ids=lambda c: c.describe())
def test_retraction_differential_is_frame(chart, rng):
    eps = 1e-7
    for _ in range(200):
        x = _random_point(chart, rng)
        E = chart.frame(x)
        for j in range(chart.intrinsic_dim):
            e = np.zeros(chart.intrinsic_dim)
            e[j] = eps
            slope = (chart.retract(x, e) - x) / eps
            assert np.max(np.abs(slope - E[:, j])) < 1e-6


@pytest.mark.parametrize("chart", CHARTS, ids=lambda c: c.describe())
def test_frame_is_orthonormal_and_tangent(chart, rng):
    for _ in range(500):
        x = _random_point(chart, rng)
        E = chart.frame(x)
        assert E.shape == (chart.ambient_dim, chart.intrinsic_dim)
        assert_allclose(E.T @ E, np.eye(chart.intrinsic_dim), atol=1e-14)


@pytest.mark.parametrize("chart", CHARTS, ids=lambda c: c.describe())
def test_retraction_stays_on_manifold(chart, rng):
    for _ in range(10_000):
        x = _random_point(chart, rng)
        v = rng.normal(size=chart.intrinsic_dim)
        y = chart.retract(x, v)
        assert chart.membership_error(y) <= 2e-15 + chart.membership_error(x)


def test_inverse_retraction_round_trip(rng):
    for chart in (UnitQuaternion(), Sphere2(), CHARTS[3]):
        for _ in range(2000):
            x = _random_point(chart, rng)
            y = _random_point(chart, rng)
            v = chart.inverse_retract(x, y)
            assert_allclose(chart.retract(x, v), y, atol=1e-11)


def test_quaternion_inverse_retraction_rejects_cut_locus():
    chart = UnitQuaternion()
    q = np.array([0.5, 0.5, 0.5, 0.5])
    with pytest.raises(DomainError):
        chart.inverse_retract(q, -q)


def test_sphere_rejects_antipodal_points():
    chart = Sphere2()
    s = np.array([0.0, 0.6, 0.8])
    with pytest.raises(DomainError):
        chart.inverse_retract(s, -s)
    with pytest.raises(DomainError):
        chart.transport_matrix(s, -s)


def test_quat_exp_log():
    phi = np.array([0.3, -0.2, 0.5])
    q = quat_exp(phi)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-15
    assert_allclose(quat_log(q), phi, atol=1e-14)
    # q 与 −q 同一姿态，默认规范到标量非负
    assert_allclose(quat_log(-q), phi, atol=1e-14)
    assert np.array_equal(quat_exp(np.zeros(3)), np.array([1.0, 0.0, 0.0, 0.0]))
    with pytest.raises(ArgumentError):
        quat_exp(np.zeros(4))


def test_right_jacobian_small_angle_series():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    theta = 0.999 * geometry.SMALL_ANGLE
    K = skew(theta * axis)
    closed = np.eye(3) - 2.0 * np.sin(0.5 * theta) ** 2 / theta ** 2 * K + (theta - np.sin(theta)) / theta ** 3 * (K @ K)
    assert_allclose(right_jacobian(theta * axis), closed, atol=1e-12)
    assert np.array_equal(right_jacobian(np.zeros(3)), np.eye(3))


def _transport_oracle(chart, src, dst, eps=1e-6):
    """𝒯_{src→dst} v = D R_src(ξ)[v]，ξ = R⁻¹_src(dst)，在 dst 标架下取坐标"""
    xi = chart.inverse_retract(src, dst)
    n = chart.intrinsic_dim
    T = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        plus = chart.inverse_retract(dst, chart.retract(src, xi + e))
        minus = chart.inverse_retract(dst, chart.retract(src, xi - e))
        T[:, j] = (plus - minus) / (2.0 * eps)
    return T


def test_quaternion_transport_matches_differential_oracle(rng):
    chart = UnitQuaternion()
    for _ in range(100):
        q = random_quaternion(rng)
        r = nearby_quaternion(rng, q, 1.2)
        phi = quat_log(quat_mul(geometry.quat_conj(q), r), canonicalize=False)
        assert_allclose(chart.transport_matrix(q, r), right_jacobian(2.0 * phi), atol=1e-15)
        assert np.max(np.abs(chart.transport_matrix(q, r) - _transport_oracle(chart, q, r))) < 1e-5


def test_sphere_transport_matches_differential_oracle(rng):
    chart = Sphere2()
    for _ in range(100):
        s = random_unit(rng)
        y = chart.retract(s, rng.uniform(0.1, 1.5) * random_unit(rng, 2))
        assert np.max(np.abs(chart.transport_matrix(s, y) - _transport_oracle(chart, s, y))) < 1e-5


def test_frame_rotation_changes_coordinates_only(rng):
    axis = random_unit(rng)
    R = np.cos(0.7) * np.eye(3) + np.sin(0.7) * skew(axis) + (1 - np.cos(0.7)) * np.outer(axis, axis)
    plain, rotated = UnitQuaternion(), UnitQuaternion(frame_rotation=R)
    q = random_quaternion(rng)
    r = nearby_quaternion(rng, q)
    assert_allclose(rotated.inverse_retract(q, r), R.T @ plain.inverse_retract(q, r), atol=1e-14)
    assert_allclose(rotated.frame(q), plain.frame(q) @ R, atol=1e-15)
    assert_allclose(rotated.transport_matrix(q, r), R.T @ plain.transport_matrix(q, r) @ R, atol=1e-14)
    with pytest.raises(ArgumentError):
        UnitQuaternion(frame_rotation=np.diag([1.0, 1.0, -1.0]))


def test_sphere_frame_at_axis_points():
    chart = Sphere2()
    for s in np.eye(3):
        E = chart.frame(s)
        assert_allclose(E.T @ s, np.zeros(2), atol=1e-16)
        assert_allclose(E.T @ E, np.eye(2), atol=1e-16)


def test_quat_aux_terms_closed_forms(rng):
    C, S, E = geometry.quat_aux_terms(random_quaternion(rng), np.array([0.1, 0.2, 0.3]), np.array([1.0, 0.0, 0.0]))
    assert np.array_equal(C, np.zeros((3, 3)))
    assert np.array_equal(S, skew([1.0, 0.0, 0.0]))
    assert np.array_equal(E, skew([0.1, 0.2, 0.3]))


def test_transport_rate_matches_closed_form(rng):
    chart = UnitQuaternion()
    for _ in range(100):
        q = random_quaternion(rng)
        w = rng.normal(size=3)
        assert np.max(np.abs(geometry.transport_rate(chart, q, w) - skew(w))) < 1e-5


def test_module_level_operators_track_base_points(rng):
    chart = Sphere2()
    s = random_unit(rng)
    y = chart.retract(s, np.array([0.3, -0.2]))
    v = geometry.inverse_retract(chart, s, y)
    assert np.array_equal(v.base, s)
    assert_allclose(geometry.retract(chart, s, v), y, atol=1e-15)
    moved = geometry.transport(chart, s, y, v)
    assert np.array_equal(moved.base, y)
    with pytest.raises(ArgumentError):
        geometry.retract(chart, y, v)


def test_dimension_checks():
    chart = Product([Euclidean(7), UnitQuaternion(), Euclidean(3)])
    assert (chart.ambient_dim, chart.intrinsic_dim) == (14, 13)
    with pytest.raises(ArgumentError):
        chart.retract(np.zeros(13), np.zeros(13))
    with pytest.raises(ArgumentError):
        chart.retract(np.r_[np.zeros(7), 1.0, np.zeros(6)], np.zeros(14))


def test_describe_round_trip():
    chart = Product([Euclidean(7), UnitQuaternion(), Product([Euclidean(3), Sphere2()])])
    text = chart.describe()
    assert text == "euclidean:7;quaternion:4;euclidean:3;sphere:3"
    rebuilt = chart_from_description(text)
    assert rebuilt.describe() == text
    assert rebuilt.intrinsic_dim == chart.intrinsic_dim
    with pytest.raises(ArgumentError):
        chart_from_description("torus:2")


def test_closed_form_retractions():
    assert_allclose(quat_exp(np.array([np.pi / 2, 0.0, 0.0])), [0.0, 1.0, 0.0, 0.0], atol=1e-15)
    chart = Sphere2()
    s = np.array([1.0, 0.0, 0.0])
    w = chart.frame(s).T @ np.array([0.0, np.pi / 2, 0.0])
    assert_allclose(chart.retract(s, w), [0.0, 1.0, 0.0], atol=1e-15)
    x, v = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    assert np.array_equal(Euclidean(2).retract(x, v), x + v)
