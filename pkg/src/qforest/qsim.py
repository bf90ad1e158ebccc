"""Density-matrix simulation of tree circuits with weighted mid-circuit measurements.

Each wire between gates carries a ``chi x chi`` weighted state: a PSD
matrix whose trace is the probability that every measurement below it was
accepted.  A gate takes ``left (x) right``, conjugates it, measures its
leading register and keeps the rest.  The all-zero outcome is always
accepted; every other outcome is accepted with probability ``w``.  So the
output is ``A + w (T - A)`` with ``A`` the zero-outcome block and ``T`` the
partial trace over the measured register.

The top gate additionally takes an ancilla in ``|0>`` and measures the
ancilla together with ``k`` qubits.

All routines are batched over arbitrary leading axes; the forest routines
use ``(batch, trees, nodes)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import pixel_features
from .errors import ArgumentError, ShapeError, UnderflowError
from .ftn import prepare_leaves, softmax_nll, _check_labels

__all__ = [
    "SimOutput",
    "QFTNGrad",
    "leaf_state",
    "node_channel",
    "top_channel",
    "outcome_weights",
    "forest_sim_forward",
    "forest_sim_backward",
    "qttn_forward",
    "qftn_forward",
    "qftn_loss_and_grad",
    "qftn_evaluate",
    "sample_stats",
    "chunk_size",
    "TRACE_FLOOR",
]

TRACE_FLOOR = 1e-300


@dataclass
class SimOutput:
    probs: np.ndarray
    success_prob: float
    srpg: float


@dataclass
class QFTNGrad:
    unitaries: list[np.ndarray]
    top: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def gates(self) -> list[np.ndarray]:
        return [*self.unitaries, self.top]


def _check_w(w: float) -> float:
    w = float(w)
    if not 0.0 <= w <= 1.0:
        raise ArgumentError(f"acceptance weight w must lie in [0, 1], got {w}")
    return w


def outcome_weights(measured_dim: int, w: float) -> np.ndarray:
    c = np.full(measured_dim, _check_w(w))
    c[0] = 1.0
    return c


def leaf_state(f) -> np.ndarray:
    """Projector ``f f^T`` onto a unit feature vector."""
    f = np.asarray(f, dtype=np.float64)
    if abs(np.linalg.norm(f) - 1.0) > 1e-10:
        raise ArgumentError(f"leaf vector must have unit norm, got {np.linalg.norm(f):.6g}")
    return np.outer(f, f)


def _gate_blocks(u: np.ndarray, chi: int, top: bool) -> np.ndarray:
    """Reshape gates to ``(..., measured, kept, left, right)``.

    For the top gate only the ancilla-``|0>`` half of the columns is used.
    """
    if top:
        u = u[..., : chi * chi]
        return u.reshape(u.shape[:-2] + (2 * chi, chi, chi, chi))
    return u.reshape(u.shape[:-2] + (chi, chi, chi, chi))


def _channel(U4: np.ndarray, left: np.ndarray, right: np.ndarray, c: np.ndarray):
    """Weighted output ``sum_m c_m (U rho U^T)[m, :, m, :]`` for ``rho = left (x) right``.

    Returns the output and the intermediates ``(Y, Z)`` where ``Y = U (left (x) 1)``
    acting from the right on the left leg and ``Z = Y (1 (x) right)``.
    """
    chi = left.shape[-1]
    # Y[m,s,i',j] = sum_i left[i,i'] U[m,s,i,j]
    Y = np.swapaxes(left, -1, -2)[..., None, None, :, :] @ U4
    # Z[m,s,i',j'] = sum_j Y[m,s,i',j] right[j,j']
    Z = Y @ right[..., None, None, :, :]
    Zf = Z.reshape(Z.shape[:-2] + (chi * chi,))
    Uf = U4.reshape(U4.shape[:-2] + (chi * chi,))
    blocks = Zf @ np.swapaxes(Uf, -1, -2)  # (..., M, s, s')
    out = np.tensordot(blocks, c, axes=([-3], [0]))
    return out, Y, Z


def _channel_backward(U4, left, right, c, G, Y, Z, batch_axes: int):
    """Gradients of ``<G, out>`` w.r.t. the gate blocks, ``left`` and ``right``.

    The gate gradient is summed over the first ``batch_axes`` axes.
    """
    chi = left.shape[-1]
    Uf = U4.reshape(U4.shape[:-2] + (chi * chi,))
    Zf = Z.reshape(Z.shape[:-2] + (chi * chi,))
    cG = c[:, None, None] * G[..., None, :, :]  # (..., M, s, s')
    dZf = cG @ Uf
    dUf = np.swapaxes(cG, -1, -2) @ Zf
    dZ = dZf.reshape(Z.shape)
    dY = dZ @ np.swapaxes(right, -1, -2)[..., None, None, :, :]
    # dright[j,j'] = sum_{m,s,i'} Y[m,s,i',j] dZ[m,s,i',j']
    Yr = Y.reshape(Y.shape[:-4] + (-1, chi))
    dZr = dZ.reshape(dZ.shape[:-4] + (-1, chi))
    d_right = np.swapaxes(Yr, -1, -2) @ dZr
    # dU[m,s,i,j] += sum_i' left[i,i'] dY[m,s,i',j]
    dU4 = dUf.reshape(dZ.shape) + left[..., None, None, :, :] @ dY
    # dleft[i,i'] = sum_{m,s,j} U[m,s,i,j] dY[m,s,i',j]
    Ur = np.moveaxis(U4, -2, -4).reshape(U4.shape[:-4] + (chi, -1))
    dYr = np.moveaxis(dY, -2, -4).reshape(dY.shape[:-4] + (chi, -1))
    d_left = Ur @ np.swapaxes(dYr, -1, -2)
    dU4 = dU4.sum(axis=tuple(range(batch_axes)))
    return dU4, d_left, d_right


def node_channel(u, left, right, w: float) -> np.ndarray:
    """Weighted state after a ``chi**2`` square gate on ``left (x) right``."""
    u = np.asarray(u, dtype=np.float64)
    chi = np.shape(left)[-1]
    if u.shape[-2:] != (chi * chi, chi * chi):
        raise ShapeError(f"gate must be {chi * chi} square, got {u.shape}")
    out, _, _ = _channel(_gate_blocks(u, chi, False), np.asarray(left, float), np.asarray(right, float), outcome_weights(chi, w))
    return out


def top_channel(u_b, left, right, w: float) -> np.ndarray:
    """Weighted state after the ``2 chi**2`` top gate with ancilla in ``|0>``."""
    u_b = np.asarray(u_b, dtype=np.float64)
    chi = np.shape(left)[-1]
    if u_b.shape[-2:] != (2 * chi * chi, 2 * chi * chi):
        raise ShapeError(f"top gate must be {2 * chi * chi} square, got {u_b.shape}")
    out, _, _ = _channel(_gate_blocks(u_b, chi, True), np.asarray(left, float), np.asarray(right, float), outcome_weights(2 * chi, w))
    return out


# -- forest-level simulation ------------------------------------------------


def _leaf_states(feats: np.ndarray) -> np.ndarray:
    return feats[..., :, None] * feats[..., None, :]


def forest_sim_forward(gates: list[np.ndarray], feats: np.ndarray, w: float):
    """Sweep weighted states up every tree.

    ``gates`` holds the stacked internal gates per level followed by the top
    gates ``(trees, 2 chi**2, 2 chi**2)``; ``feats`` are leaf vectors
    ``(batch, trees, N, chi)``.  Returns the final weighted states
    ``(batch, trees, chi, chi)`` and the list of per-level input states.
    """
    chi = feats.shape[-1]
    w = _check_w(w)
    rho = _leaf_states(feats)
    states = [rho]
    for l, U in enumerate(gates):
        is_top = l == len(gates) - 1
        if is_top:
            U = U[:, None]
        if rho.shape[-3] != 2 * U.shape[-3]:
            raise ShapeError(f"level {l} expects {2 * U.shape[-3]} inputs, got {rho.shape[-3]}")
        U4 = _gate_blocks(U, chi, is_top)
        c = outcome_weights(U4.shape[-4], w)
        rho, _, _ = _channel(U4, rho[..., 0::2, :, :], rho[..., 1::2, :, :], c)
        states.append(rho)
    return rho[..., 0, :, :], states


def forest_sim_backward(gates, states, w: float, upstream: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum <upstream, final_state>`` for every stacked gate array."""
    chi = states[0].shape[-1]
    grads = [None] * len(gates)
    G = upstream[..., None, :, :]
    for l in range(len(gates) - 1, -1, -1):
        U = gates[l]
        is_top = l == len(gates) - 1
        if is_top:
            U = U[:, None]
        U4 = _gate_blocks(U, chi, is_top)
        c = outcome_weights(U4.shape[-4], w)
        rho = states[l]
        left, right = rho[..., 0::2, :, :], rho[..., 1::2, :, :]
        _, Y, Z = _channel(U4, left, right, c)
        dU4, d_left, d_right = _channel_backward(U4, left, right, c, G, Y, Z, batch_axes=1)
        if is_top:
            g = np.zeros(gates[l].shape)
            g[..., : chi * chi] = dU4.reshape(dU4.shape[:-4] + (2 * chi * chi, chi * chi))[:, 0]
        else:
            g = dU4.reshape(U.shape)
        grads[l] = g
        if l == 0:
            break
        G = np.empty(rho.shape)
        G[..., 0::2, :, :] = d_left
        G[..., 1::2, :, :] = d_right
    return grads


def _normalize(final: np.ndarray):
    diag = np.diagonal(final, axis1=-2, axis2=-1)
    trace = diag.sum(axis=-1)
    if np.any(trace < TRACE_FLOOR):
        raise UnderflowError(
            f"acceptance probability {trace.min():.3e} underflows; cannot normalize"
        )
    return diag / trace[..., None], trace


def sample_stats(trace: np.ndarray, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample success probability and per-gate rate, averaged over trees."""
    srpg = np.power(np.clip(trace, 0.0, None), 1.0 / num_nodes)
    return trace.mean(axis=-1), srpg.mean(axis=-1)


def qttn_forward(circuit, image) -> SimOutput:
    """Simulate one tree circuit on one ``(L, L, k)`` image."""
    from .ttn import leaf_indices

    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    topo = circuit.topology
    if image.shape != (topo.side, topo.side, topo.channels):
        raise ShapeError(f"image shape {image.shape} does not match the circuit topology")
    idx = leaf_indices(topo, [circuit.shift])
    feats = pixel_features(image).reshape(-1, topo.chi)[idx][None]  # (1, 1, N, chi)
    gates = [U[None] for U in circuit.internal_unitaries] + [circuit.top_unitary[None]]
    final, _ = forest_sim_forward(gates, feats, circuit.w)
    probs, trace = _normalize(final)
    p = float(trace[0, 0])
    return SimOutput(probs[0, 0], p, p ** (1.0 / topo.num_nodes))


def _forward(model, images: np.ndarray, w: float):
    feats = prepare_leaves(model, images)
    final, states = forest_sim_forward(model.gate_stacks(), feats, w)
    probs, trace = _normalize(final)
    z = probs.reshape(len(probs), -1)
    logits = z @ model.head_w.T + model.head_b
    return logits, (feats, final, states, probs, trace, z)


def qftn_forward(model, image, w: float | None = None):
    """Logits and success statistics for one image or a batch.

    Returns ``(logits, stats)`` where ``stats`` has per-sample
    ``success_prob`` and ``srpg`` (means over the trees).
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    single = x.ndim == 3
    if single:
        x = x[None]
    if len(x) == 0:
        raise ArgumentError("empty batch")
    w = model.w if w is None else w
    if single:
        logits, cache = _forward(model, x, w)
        success, srpg = sample_stats(cache[4], model.topology.num_nodes)
        return logits[0], SimOutput(cache[3][0].reshape(-1), float(success[0]), float(srpg[0]))
    step = chunk_size(model)
    parts = []
    for s in range(0, len(x), step):
        logits, cache = _forward(model, x[s:s + step], w)
        parts.append((logits, *sample_stats(cache[4], model.topology.num_nodes)))
    logits, success, srpg = (np.concatenate(p) for p in zip(*parts))
    return logits, {"success_prob": success, "srpg": srpg}


def qftn_logits(model, images) -> np.ndarray:
    return qftn_forward(model, images)[0]


def chunk_size(model, budget: float = 2e7) -> int:
    """Samples per chunk keeping simulator intermediates near ``budget`` floats."""
    chi = model.chi
    per_sample = model.num_classes * (model.topology.num_leaves // 2) * chi**4
    top = model.num_classes * 2 * chi**4
    return max(1, int(budget // max(per_sample, top)))


def qftn_loss_and_grad(model, images, labels, w: float | None = None):
    """Mean cross-entropy and Euclidean gradients for every gate and the head.

    Returns ``(loss, QFTNGrad, stats)``.  Large batches are processed in
    chunks; the result does not depend on the chunking.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = _check_labels(labels, model.num_classes)
    if len(images) == 0:
        raise ArgumentError("empty batch")
    w = model.w if w is None else w
    B = len(labels)
    step = chunk_size(model)
    total = 0.0
    grad = None
    success, srpg = [], []
    for s in range(0, B, step):
        nll_sum, g, stats = _loss_grad_chunk(model, images[s:s + step], labels[s:s + step], w, B)
        total += nll_sum
        success.append(stats[0])
        srpg.append(stats[1])
        if grad is None:
            grad = g
        else:
            for acc, part in zip(grad.gates() + [grad.head_w, grad.head_b], g.gates() + [g.head_w, g.head_b]):
                acc += part
    stats = {"success_prob": np.concatenate(success), "srpg": np.concatenate(srpg)}
    return total / B, grad, stats


def _loss_grad_chunk(model, images, labels, w, total_batch):
    logits, (feats, final, states, probs, trace, z) = _forward(model, images, w)
    nll, sm = softmax_nll(logits, labels)
    dlogits = sm
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= total_batch
    g_w = dlogits.T @ z
    g_b = dlogits.sum(axis=0)
    dprobs = (dlogits @ model.head_w).reshape(probs.shape)
    # probs = diag / trace, quotient rule
    ddiag = (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) / trace[..., None]
    upstream = ddiag[..., :, None] * np.eye(final.shape[-1])
    gate_grads = forest_sim_backward(model.gate_stacks(), states, w, upstream)
    grad = QFTNGrad(gate_grads[:-1], gate_grads[-1], g_w, g_b)
    return float(nll.sum()), grad, sample_stats(trace, model.topology.num_nodes)


def qftn_evaluate(model, dataset, w: float | None = None) -> dict:
    """Loss and accuracy over a dataset together with per-sample success statistics."""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    step = chunk_size(model)
    nll_sum, correct = 0.0, 0
    success, srpg = [], []
    for s in range(0, len(dataset), step):
        x = dataset.images[s:s + step]
        y = dataset.labels[s:s + step]
        logits, stats = qftn_forward(model, x, w)
        nll, _ = softmax_nll(logits, y)
        nll_sum += float(nll.sum())
        correct += int((np.argmax(logits, axis=-1) == y).sum())
        success.append(stats["success_prob"])
        srpg.append(stats["srpg"])
    return {
        "loss": nll_sum / len(dataset),
        "acc": correct / len(dataset),
        "success_prob": np.concatenate(success),
        "srpg": np.concatenate(srpg),
    }
