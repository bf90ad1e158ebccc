import numpy as np
import pytest

from qforest.errors import NumericalConsistencyError, PreconditionError, ShapeError
from qforest.tensor_core import (
    batched_svd,
    complete_orthonormal,
    contract,
    kron,
    orthogonality_error,
    qr_positive,
    svd,
)


def test_contract_matches_einsum():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5, 3))
    out = contract(a, b, [1, 2], [2, 0])
    np.testing.assert_allclose(out, np.einsum("ijk,kmj->im", a, b), atol=1e-13)


def test_contract_reports_both_axes_on_mismatch():
    with pytest.raises(ShapeError, match=r"a axis 1 \(dim 3\).*b axis 0 \(dim 4\)"):
        contract(np.ones((2, 3)), np.ones((4, 2)), [1], [0])


def test_contract_rejects_nan():
    with pytest.raises(NumericalConsistencyError):
        contract(np.array([np.nan]), np.ones(1), [0], [0])


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (4, 4)])
def test_svd_reconstructs(shape):
    m = np.random.default_rng(1).normal(size=shape)
    u, s, vt = svd(m)
    np.testing.assert_allclose(u @ np.diag(s) @ vt, m, atol=1e-12)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert u.shape == (shape[0], min(shape)) and vt.shape == (min(shape), shape[1])


def test_svd_of_identity():
    u, s, vt = svd(np.eye(3))
    np.testing.assert_allclose(s, np.ones(3))
    np.testing.assert_allclose(u @ vt, np.eye(3), atol=1e-15)


def test_svd_sign_convention_is_deterministic():
    m = np.random.default_rng(2).normal(size=(4, 3))
    u1, _, _ = svd(m)
    u2, _, _ = svd(m.copy())
    np.testing.assert_array_equal(u1, u2)
    assert np.all(u1[np.argmax(np.abs(u1), axis=0), range(3)] > 0)


def test_batched_svd_matches_loop():
    ms = np.random.default_rng(3).normal(size=(6, 4, 8))
    res = batched_svd(ms)
    for i, m in enumerate(ms):
        one = svd(m)
        np.testing.assert_allclose(res.s[i], one.s, atol=1e-13)
        np.testing.assert_allclose(res.u[i], one.u, atol=1e-12)


def test_complete_orthonormal_keeps_rows_bit_identical():
    v = np.linalg.qr(np.random.default_rng(4).normal(size=(8, 2)))[0].T
    q = complete_orthonormal(v)
    np.testing.assert_array_equal(q[:2], v)
    assert orthogonality_error(q) < 1e-13


def test_complete_orthonormal_rejects_non_isometry():
    with pytest.raises(PreconditionError, match="not orthonormal"):
        complete_orthonormal(np.array([[1.0, 1.0, 0.0]]))


def test_kron_shape_and_values():
    a = np.arange(4.0).reshape(2, 2)
    b = np.eye(3)
    k = kron(a, b)
    assert k.shape == (6, 6)
    np.testing.assert_array_equal(k[3:, :3], 2 * np.eye(3))


def test_qr_positive_diagonal_and_fixed_point():
    a = np.random.default_rng(5).normal(size=(3, 5, 5))
    q, r = qr_positive(a)
    assert np.all(np.diagonal(r, axis1=-2, axis2=-1) >= 0)
    np.testing.assert_allclose(q @ r, a, atol=1e-12)
    q2, _ = qr_positive(q)
    np.testing.assert_allclose(q2, q, atol=1e-14)
