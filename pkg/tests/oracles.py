"""Independent reference implementations used by the tests.

They are deliberately naive (dense tensors, explicit outcome enumeration)
and share no code with the package beyond the documented conventions:
node tensors are (output, left, right); gate output indices are
(measured register, kept register) with the measured part most
significant; the top gate acts on (ancilla, left, right).
"""

import string

import numpy as np


# -- dense tree tensor ------------------------------------------------------


def dense_tree_matrix(tensors):
    """Contract a tree into the ``chi x chi**N`` matrix ``W``.

    ``tensors[l]`` has shape ``(nodes_in_level_l, chi, chi, chi)``; level 0
    node ``j`` reads leaf slots ``2j`` and ``2j + 1``.
    """
    chi = tensors[0].shape[-1]
    blocks = [np.eye(chi) for _ in range(2 * tensors[0].shape[0])]
    for T in tensors:
        nxt = []
        for j, node in enumerate(T):
            a, b = blocks[2 * j], blocks[2 * j + 1]
            W = np.einsum("oij,ip,jq->opq", node, a, b)
            nxt.append(W.reshape(chi, -1))
        blocks = nxt
    return blocks[0]


def product_state(leaves):
    """Kronecker product of the leaf vectors in slot order."""
    phi = np.ones(1)
    for f in leaves:
        phi = np.kron(phi, f)
    return phi


# -- state-vector circuit oracle -------------------------------------------


def _apply(state, gate, legs, out_dims, in_dims):
    """Apply a gate reshaped to ``out_dims + in_dims`` on the given legs."""
    letters = string.ascii_letters
    n = state.ndim
    src = list(letters[:n])
    fresh = list(letters[n:n + len(legs)])
    g = gate.reshape(tuple(out_dims) + tuple(in_dims))
    dst = src.copy()
    for leg, f in zip(legs, fresh):
        dst[leg] = f
    spec = "".join(fresh) + "".join(src[l] for l in legs) + "," + "".join(src) + "->" + "".join(dst)
    return np.einsum(spec, g, state)


def _evolve(internal, top, leaves):
    """Full pure state after every gate, split into measured and kept parts.

    Returns ``psi`` of shape ``(outcomes, chi)`` together with the shapes of
    the measured registers, in the order their indices appear in ``psi``.
    """
    chi = leaves.shape[1]
    N = len(leaves)
    state = np.ones(())
    for f in leaves:
        state = np.multiply.outer(state, f)
    state = np.multiply.outer(state, np.array([1.0, 0.0]))  # ancilla |0>, last leg
    anc = N
    kept = list(range(N))
    measured = []  # (legs, register shape)
    for U in internal:
        nxt = []
        for j, u in enumerate(U):
            l, r = kept[2 * j], kept[2 * j + 1]
            state = _apply(state, u, [l, r], (chi, chi), (chi, chi))
            measured.append(([l], (chi,)))
            nxt.append(r)
        kept = nxt
    l, r = kept
    state = _apply(state, top, [anc, l, r], (2, chi, chi), (2, chi, chi))
    measured.append(([anc, l], (2, chi)))
    order = [leg for legs, _ in measured for leg in legs]
    psi = np.transpose(state, order + [r]).reshape(-1, chi)
    return psi, [shape for _, shape in measured]


def _outcome_weights(shapes, w):
    """Weight of every joint outcome: 1 per all-zero register, ``w`` otherwise."""
    wt = np.ones(())
    for shape in shapes:
        weight = np.full(shape, w)
        weight[(0,) * len(shape)] = 1.0
        wt = np.multiply.outer(wt, weight)
    return wt.reshape(-1)


def statevector_weighted_state(internal, top, leaves, w):
    """Final weighted kept-register state of one tree circuit.

    ``internal[l]`` is ``(nodes, chi**2, chi**2)``, ``top`` is
    ``(2 chi**2, 2 chi**2)`` and ``leaves`` is ``(N, chi)``.  The full
    pure state of all leaf registers plus the ancilla is evolved; then every
    pattern of measurement outcomes is weighted by ``1`` for an all-zero
    register and ``w`` otherwise, and the kept register's projected state is
    accumulated.
    """
    psi, shapes = _evolve(internal, top, leaves)
    wt = _outcome_weights(shapes, w)
    return psi.T @ (wt[:, None] * psi)


def outcome_probabilities(internal, top, leaves):
    """Born probabilities ``p_m`` of every joint measurement outcome ``m``."""
    psi, _ = _evolve(internal, top, leaves)
    return np.sum(psi * psi, axis=1)


def outcome_weights(internal, top, leaves, w):
    """Classical weights ``W_m`` aligned with ``outcome_probabilities``."""
    _, shapes = _evolve(internal, top, leaves)
    return _outcome_weights(shapes, w)


# -- finite differences -----------------------------------------------------


def central_difference(f, x, index, h=1e-5):
    """Central difference of scalar ``f`` with respect to ``x[index]`` (in place)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def relative_error(a, b, floor=1e-6):
    """``|a - b| / max(|a|, |b|, floor)``."""
    return abs(a - b) / max(abs(a), abs(b), floor)
