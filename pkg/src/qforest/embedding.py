"""Exact embedding of a canonical forest into quantum tree circuits.

Every matrix is stored in gate orientation, i.e. it acts on state vectors
from the left.  Output indices of a gate are ordered (measured register,
kept register) with the measured qubits most significant, so the all-zero
measurement outcome selects the first rows.

* A non-top node isometry ``V`` (``chi x chi**2``) becomes the orthogonal
  ``chi**2 x chi**2`` gate whose first ``chi`` rows are ``V``.
* The top tensor ``M`` is rescaled to ``M / sigma_max`` and block-encoded in
  a ``2 chi**2 x 2 chi**2`` gate acting on (ancilla, left, right).  With the
  ancilla prepared in ``|0>`` and the ancilla plus ``k`` qubits postselected
  on ``|0...0>``, the gate acts as the rescaled top tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, IsometryError, NumericalConsistencyError, PreconditionError, ShapeError, StateError
from .ftn import FTNClassifier
from .tensor_core import complete_orthonormal, svd
from .ttn import TreeTopology, leaf_indices

__all__ = [
    "QTTNCircuit",
    "QFTNModel",
    "isometry_to_unitary",
    "block_encode_top",
    "embed_ftn",
    "EIGEN_CLAMP",
]

EIGEN_CLAMP = 1e-10


@dataclass
class QTTNCircuit:
    """One tree circuit.

    ``internal_unitaries[l]`` has shape ``(nodes_in_level_l, chi**2, chi**2)``
    for every level below the top; ``top_unitary`` is ``2 chi**2`` square.
    """

    topology: TreeTopology
    internal_unitaries: list[np.ndarray]
    top_unitary: np.ndarray
    w: float = 0.0
    scale: float = 1.0
    shift: tuple[int, int] = (0, 0)

    @property
    def chi(self) -> int:
        return self.topology.chi

    def gates(self) -> list[np.ndarray]:
        return [u for U in self.internal_unitaries for u in U] + [self.top_unitary]


class QFTNModel:
    """``d`` tree circuits with shared acceptance weight ``w`` and a linear head.

    Gates are stored stacked across circuits: ``unitaries[l]`` has shape
    ``(d, nodes_in_level_l, chi**2, chi**2)`` and ``top`` has shape
    ``(d, 2 chi**2, 2 chi**2)``.
    """

    def __init__(self, topology, unitaries, top, scales, shifts, head_w, head_b, num_classes, w=0.0):
        d, chi = num_classes, topology.chi
        unitaries = [np.asarray(U, dtype=np.float64) for U in unitaries]
        if len(unitaries) != topology.depth - 1:
            raise ShapeError(f"expected {topology.depth - 1} internal levels, got {len(unitaries)}")
        for l, (U, n) in enumerate(zip(unitaries, topology.level_sizes)):
            if U.shape != (d, n, chi * chi, chi * chi):
                raise ShapeError(f"level {l}: expected {(d, n, chi * chi, chi * chi)}, got {U.shape}")
        top = np.asarray(top, dtype=np.float64)
        if top.shape != (d, 2 * chi * chi, 2 * chi * chi):
            raise ShapeError(f"top gates must be {(d, 2 * chi * chi, 2 * chi * chi)}, got {top.shape}")
        if not 0.0 <= w <= 1.0:
            raise PreconditionError(f"w must lie in [0, 1], got {w}")
        self.topology = topology
        self.unitaries = unitaries
        self.top = top
        self.scales = np.asarray(scales, dtype=np.float64).reshape(d)
        self.shifts = [tuple(int(v) for v in s) for s in shifts]
        self.head_w = np.asarray(head_w, dtype=np.float64)
        self.head_b = np.asarray(head_b, dtype=np.float64)
        if self.head_w.shape != (d, d * chi) or self.head_b.shape != (d,):
            raise ShapeError("head dimensions do not match the model")
        self.num_classes = d
        self.w = float(w)
        self._leaf_index = leaf_indices(topology, self.shifts)

    @property
    def chi(self) -> int:
        return self.topology.chi

    @property
    def channels(self) -> int:
        return self.topology.channels

    @property
    def side(self) -> int:
        return self.topology.side

    @property
    def leaf_index(self) -> np.ndarray:
        return self._leaf_index

    @property
    def circuits(self) -> list[QTTNCircuit]:
        return [
            QTTNCircuit(
                self.topology,
                [U[t] for U in self.unitaries],
                self.top[t],
                self.w,
                float(self.scales[t]),
                self.shifts[t],
            )
            for t in range(self.num_classes)
        ]

    def gate_stacks(self) -> list[np.ndarray]:
        return [*self.unitaries, self.top]

    def parameters(self) -> list[np.ndarray]:
        return [*self.unitaries, self.top, self.head_w, self.head_b]

    def copy(self) -> "QFTNModel":
        return QFTNModel(
            self.topology,
            [U.copy() for U in self.unitaries],
            self.top.copy(),
            self.scales.copy(),
            self.shifts,
            self.head_w.copy(),
            self.head_b.copy(),
            self.num_classes,
            self.w,
        )

    def max_orthogonality_error(self) -> float:
        worst = 0.0
        for U in self.gate_stacks():
            n = U.shape[-1]
            gram = np.swapaxes(U, -1, -2) @ U
            worst = max(worst, float(np.linalg.norm(gram - np.eye(n), axis=(-2, -1)).max()))
        return worst


def isometry_to_unitary(v, tol: float = 1e-8) -> np.ndarray:
    """Orthogonal ``chi**2 x chi**2`` gate whose first ``chi`` rows are ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3:
        v = v.reshape(v.shape[0], -1)
    if v.ndim != 2:
        raise ShapeError(f"expected a chi x chi**2 isometry, got shape {v.shape}")
    dev = float(np.linalg.norm(v @ v.T - np.eye(v.shape[0])))
    if dev > tol:
        raise IsometryError(f"node is not an isometry: ||V V^T - I||_F = {dev:.3e}")
    return complete_orthonormal(v, tol)


def block_encode_top(m) -> tuple[np.ndarray, float]:
    """Block-encode a ``chi x chi x chi`` top tensor.

    Returns the ``2 chi**2`` square orthogonal gate and the rescaling factor
    ``1 / sigma_max``.  With ``Mt = scale * m.reshape(chi, chi**2)`` the gate
    satisfies ``gate[:chi, :chi**2] == Mt``.  Its transpose is the
    column-oriented form with ``Mt.T`` as top-left ``chi**2 x chi`` block.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3 or len(set(m.shape)) != 1:
        raise ShapeError(f"top tensor must be chi x chi x chi, got {m.shape}")
    chi = m.shape[0]
    op = m.reshape(chi, chi * chi)
    if not np.any(op):
        raise DegenerateInputError("cannot block-encode an all-zero top tensor")
    scale = 1.0 / float(svd(op).s[0])
    mt = scale * op.T  # (chi**2, chi)
    gram = np.eye(chi) - mt.T @ mt
    lam, X = np.linalg.eigh((gram + gram.T) / 2.0)
    if lam.min() < -EIGEN_CLAMP:
        raise NumericalConsistencyError(
            f"I - Mt^T Mt has eigenvalue {lam.min():.3e} below -{EIGEN_CLAMP:g}"
        )
    lam = np.clip(lam, 0.0, None)
    b = np.sqrt(lam)[:, None] * X.T  # (chi, chi)
    w_iso = np.zeros((2 * chi * chi, chi))
    w_iso[: chi * chi] = mt
    w_iso[chi * chi: chi * chi + chi] = b
    gate = complete_orthonormal(w_iso.T)
    return gate, scale


def embed_ftn(ftn: FTNClassifier) -> QFTNModel:
    """Exact gate-level image of a canonical forest at ``w = 0``."""
    if not ftn.is_canonical:
        raise StateError("embed_ftn needs a canonical forest; run canonicalize_ftn first")
    d, chi = ftn.num_classes, ftn.chi
    unitaries = []
    for l, T in enumerate(ftn.levels[:-1]):
        U = np.empty((d, T.shape[1], chi * chi, chi * chi))
        for t in range(d):
            for j in range(T.shape[1]):
                try:
                    U[t, j] = isometry_to_unitary(T[t, j])
                except IsometryError as exc:
                    raise IsometryError(f"tree {t}, level {l}, node {j}: {exc}") from None
        unitaries.append(U)
    top = np.empty((d, 2 * chi * chi, 2 * chi * chi))
    scales = np.empty(d)
    for t in range(d):
        top[t], scales[t] = block_encode_top(ftn.levels[-1][t, 0])
    return QFTNModel(
        ftn.topology, unitaries, top, scales, ftn.shifts,
        ftn.head_w.copy(), ftn.head_b.copy(), d, w=0.0,
    )
