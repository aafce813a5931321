import numpy as np
import pytest

from licalib.errors import InvalidArgumentError
from licalib.geometry import (
    RigidTransform,
    euler_to_matrix,
    exp_matrix,
    matrix_to_euler,
    matrix_to_quat,
    quat_canonical,
    quat_conjugate,
    quat_mul_matrices,
    quat_multiply,
    quat_to_matrix,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inverse,
    vee,
)


def _quat(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return so3_exp(rng.normal(scale=0.8, size=3))


def test_hamilton_product_matches_matrix_product() -> None:
    q1, q2 = _quat(1), _quat(2)
    product = quat_multiply(q1, q2)
    assert np.allclose(quat_to_matrix(product), quat_to_matrix(q1) @ quat_to_matrix(q2), atol=1e-12)


def test_left_and_right_multiplication_matrices() -> None:
    q1, q2 = _quat(3), _quat(4)
    left, _ = quat_mul_matrices(q1)
    _, right = quat_mul_matrices(q2)
    expected = quat_multiply(q1, q2)
    assert np.allclose(left @ q2, expected, atol=1e-12)
    assert np.allclose(right @ q1, expected, atol=1e-12)


def test_identity_and_conjugate() -> None:
    q = _quat(5)
    identity = np.array([0.0, 0.0, 0.0, 1.0])
    assert np.allclose(quat_multiply(identity, q), q)
    assert np.allclose(quat_canonical(quat_multiply(q, quat_conjugate(q))), identity, atol=1e-12)


def test_exp_log_inverse_for_small_and_large_angles() -> None:
    angles = (np.array([1e-10, -2e-10, 3e-10]), np.array([0.3, -0.2, 0.1]), np.array([0.0, 0.0, np.pi - 0.1]))
    for phi in angles:
        assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-12)


def test_log_rejects_non_unit_quaternion() -> None:
    with pytest.raises(InvalidArgumentError):
        so3_log([0.0, 0.0, 0.0, 2.0])


def test_exp_rejects_non_finite_input() -> None:
    with pytest.raises(InvalidArgumentError):
        so3_exp([np.nan, 0.0, 0.0])


def test_skew_vee_inverse() -> None:
    v = np.array([0.4, -1.2, 2.5])
    assert np.allclose(vee(skew(v)), v)
    assert np.allclose(skew(v) @ np.array([1.0, 2.0, 3.0]), np.cross(v, [1.0, 2.0, 3.0]))


def test_euler_convention_is_zyx() -> None:
    roll, pitch, yaw = 0.1, -0.2, 0.3
    rx = exp_matrix(np.array([roll, 0.0, 0.0]))
    ry = exp_matrix(np.array([0.0, pitch, 0.0]))
    rz = exp_matrix(np.array([0.0, 0.0, yaw]))
    rotation = euler_to_matrix(roll, pitch, yaw)
    assert np.allclose(rotation, rz @ ry @ rx)
    assert np.allclose(matrix_to_euler(rotation), [roll, pitch, yaw])


def test_matrix_to_quat_is_canonical() -> None:
    rotation = quat_to_matrix(-_quat(6))
    assert matrix_to_quat(rotation)[3] >= 0.0


def test_right_jacobian_first_order() -> None:
    phi = np.array([0.5, -0.3, 0.8])
    delta = np.array([1e-5, -2e-5, 1.5e-5])
    lhs = exp_matrix(phi + delta)
    rhs = exp_matrix(phi) @ exp_matrix(so3_right_jacobian(phi) @ delta)
    assert np.max(np.abs(lhs - rhs)) < 1e-9
    assert np.allclose(so3_right_jacobian(phi) @ so3_right_jacobian_inverse(phi), np.eye(3), atol=1e-12)


def test_rigid_transform_compose_and_inverse() -> None:
    transform = RigidTransform(quat_to_matrix(_quat(7)), np.array([1.0, -2.0, 0.5]))
    identity = transform.compose(transform.inverse())
    assert np.allclose(identity.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(identity.translation, 0.0, atol=1e-12)
    point = np.array([0.3, 0.2, -0.1])
    assert np.allclose(transform.inverse().apply(transform.apply(point)), point)
    assert np.allclose(transform.as_matrix()[:3, 3], transform.translation)
