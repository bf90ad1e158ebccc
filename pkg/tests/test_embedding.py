import numpy as np
import pytest

from qforest.embedding import block_encode_top, embed_ftn, isometry_to_unitary
from qforest.errors import DegenerateInputError, IsometryError, StateError
from qforest.ftn import FTNClassifier, canonicalize_ftn, ftn_forward
from qforest.qsim import qftn_forward
from qforest.tensor_core import svd


def _random_isometry(rng, chi):
    return np.linalg.qr(rng.normal(size=(chi * chi, chi)))[0].T


def _orth_err(u):
    return np.linalg.norm(u.T @ u - np.eye(len(u)))


def test_identity_isometry_embeds_as_identity():
    v = np.eye(4)[:2]
    np.testing.assert_array_equal(isometry_to_unitary(v), np.eye(4))


def test_isometry_block_reproduces_action():
    rng = np.random.default_rng(0)
    v = _random_isometry(rng, 2)
    u = isometry_to_unitary(v)
    psi = rng.normal(size=4)
    np.testing.assert_allclose((u @ psi)[:2], v @ psi, atol=1e-14)
    assert _orth_err(u) < 1e-12


def test_chi8_isometry_is_orthogonal():
    u = isometry_to_unitary(_random_isometry(np.random.default_rng(1), 8))
    assert u.shape == (64, 64) and _orth_err(u) < 1e-10


def test_isometry_precondition():
    with pytest.raises(IsometryError):
        isometry_to_unitary(np.ones((2, 4)))


def test_block_encode_isometric_top():
    rng = np.random.default_rng(2)
    m = _random_isometry(rng, 2).reshape(2, 2, 2)
    gate, scale = block_encode_top(m)
    np.testing.assert_allclose(scale, 1.0, atol=1e-12)
    np.testing.assert_allclose(gate[:2, :4], m.reshape(2, 4), atol=1e-12)
    # B = 0: the ancilla-|1> rows carry nothing of the |0> ancilla block
    np.testing.assert_allclose(gate[4:6, :4], 0.0, atol=1e-7)


def test_block_encode_hand_svd():
    m = np.zeros((2, 2, 2))
    m[0, 0, 0] = 2.0
    m[1, 0, 1] = 1.0
    gate, scale = block_encode_top(m)
    assert scale == 0.5
    np.testing.assert_allclose(svd(gate[:2, :4]).s, [1.0, 0.5], atol=1e-14)


@pytest.mark.parametrize("chi", [2, 4, 8])
def test_block_encode_random(chi):
    rng = np.random.default_rng(chi)
    m = rng.normal(size=(chi, chi, chi))
    gate, scale = block_encode_top(m)
    mt = scale * m.reshape(chi, chi * chi)
    assert gate.shape == (2 * chi * chi, 2 * chi * chi)
    assert _orth_err(gate) < 1e-10
    # column-oriented view: the chi**2 x chi top-left block of gate.T is Mt^T
    np.testing.assert_allclose(gate.T[: chi * chi, :chi], mt.T, atol=1e-10)
    assert svd(mt).s[0] <= 1 + 1e-12
    psi = rng.normal(size=chi * chi)
    out = gate @ np.concatenate([psi, np.zeros(chi * chi)])
    np.testing.assert_allclose(out[:chi], mt @ psi, atol=1e-12)


def test_block_encode_zero():
    with pytest.raises(DegenerateInputError):
        block_encode_top(np.zeros((2, 2, 2)))


def test_embed_requires_canonical():
    with pytest.raises(StateError):
        embed_ftn(FTNClassifier.random(2, 1, 2))


def test_embed_toy_exactness():
    ftn = canonicalize_ftn(FTNClassifier.random(2, 1, 2, seed=3))
    q = embed_ftn(ftn)
    x = np.random.default_rng(3).random((50, 2, 2, 1))
    logits, _ = qftn_forward(q, x, 0.0)
    np.testing.assert_allclose(logits, ftn_forward(ftn, x), atol=1e-9)


def test_embed_structure_16x16():
    ftn = canonicalize_ftn(FTNClassifier.random(16, 1, 10, seed=4))
    q = embed_ftn(ftn)
    assert q.w == 0.0
    assert sum(U.shape[1] for U in q.unitaries) == 254
    assert q.top.shape == (10, 8, 8)
    assert len(q.circuits) == 10 and len(q.circuits[0].gates()) == 255
    assert q.max_orthogonality_error() < 1e-9
    for t in range(10):
        m = ftn.levels[-1][t, 0].reshape(2, 4)
        np.testing.assert_allclose(q.top[t][:2, :4], q.scales[t] * m, atol=1e-10)
    for l, U in enumerate(q.unitaries):
        np.testing.assert_array_equal(U[:, :, :2, :], ftn.levels[l].reshape(U.shape[:2] + (2, 4)))


def test_identity_like_forest_embeds_identity_completions():
    ftn = FTNClassifier.random(2, 1, 1, seed=0)
    ftn.levels[0][:] = np.eye(4)[:2].reshape(2, 2, 2)
    ftn.is_canonical = True
    q = embed_ftn(ftn)
    np.testing.assert_array_equal(q.unitaries[0][0, 0], np.eye(4))
    np.testing.assert_array_equal(q.unitaries[0][0, 1], np.eye(4))
