"""Riemannian training of tree circuits and the adiabatic acceptance schedule.

Gates live on the orthogonal group.  A step projects the Euclidean gradient
onto the tangent space, ``xi = skew(G U^T) U``, moves to ``U - lr * xi`` and
retracts back with a QR factorization.  The linear head is updated with
plain SGD.

``adiabatic_encode`` raises the acceptance weight ``w`` of the non-zero
measurement outcomes from 0 to 1 in equal steps and retrains after every
step until the training loss is back under a threshold.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_io import ImageDataset, default_shift
from .embedding import QFTNModel, QTTNCircuit
from .errors import ArgumentError, DivergenceError, PreconditionError, ShapeError, StepTooLargeError
from .qsim import qftn_evaluate, qftn_loss_and_grad
from .tensor_core import qr_positive
from .ttn import TreeTopology, build_topology

log = logging.getLogger(__name__)

__all__ = [
    "EncodeConfig",
    "DirectConfig",
    "EncodeTrajectory",
    "riemannian_grad",
    "retract",
    "riemannian_step",
    "adiabatic_encode",
    "haar_orthogonal",
    "haar_random_init",
    "haar_random_qftn",
    "train_direct",
    "first_gate_grad_norms",
    "TRAJECTORY_COLUMNS",
]

TRAJECTORY_COLUMNS = [
    "step", "w", "epoch", "train_loss", "train_acc", "test_loss", "test_acc",
    "success_prob", "srpg", "grad_norm_mean", "grad_norm_std",
]
DRIFT_LIMIT = 1e-11


# -- manifold operations ----------------------------------------------------


def _skew(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x - np.swapaxes(x, -1, -2))


def riemannian_grad(u, g) -> np.ndarray:
    """Project a Euclidean gradient onto the tangent space at ``u``."""
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return _skew(g @ np.swapaxes(u, -1, -2)) @ u


def _retract(u: np.ndarray, step: np.ndarray) -> np.ndarray:
    q, r = qr_positive(u - step)
    diag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    if np.any(diag < 1e-12 * max(1.0, float(np.abs(r).max()))):
        raise StepTooLargeError("u - step is numerically singular; reduce the learning rate")
    return q


def retract(u, step) -> np.ndarray:
    """QR retraction of ``u - step`` back onto the orthogonal group."""
    u = np.asarray(u, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    a = step @ np.swapaxes(u, -1, -2)
    asym = float(np.abs(a + np.swapaxes(a, -1, -2)).max()) if a.size else 0.0
    if asym > 1e-8:
        raise PreconditionError(f"step is not tangent at u (symmetric part {asym:.2e})")
    return _retract(u, step)


def _orth_drift(u: np.ndarray) -> np.ndarray:
    n = u.shape[-1]
    return np.linalg.norm(np.swapaxes(u, -1, -2) @ u - np.eye(n), axis=(-2, -1))


def riemannian_step(model: QFTNModel, grad, lr: float) -> int:
    """One in-place Riemannian SGD step; returns the number of re-orthonormalized gates."""
    corrections = 0
    for U, G in zip(model.gate_stacks(), grad.gates()):
        new = _retract(U, lr * riemannian_grad(U, G))
        drift = _orth_drift(new)
        bad = drift > DRIFT_LIMIT
        if np.any(bad):
            new[bad] = qr_positive(new[bad])[0]
            corrections += int(bad.sum())
        U[...] = new
    model.head_w -= lr * grad.head_w
    model.head_b -= lr * grad.head_b
    return corrections


# -- configuration and logs -------------------------------------------------


@dataclass
class EncodeConfig:
    delta_w: float = 0.05
    loss_threshold: float | None = None
    threshold_factor: float = 1.05
    max_epochs_per_step: int = 30
    learning_rate: float = 0.5
    batch_size: int = 32
    seed: int = 0
    probe_gradients: bool = True
    adaptive: bool = False
    max_jump: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.delta_w <= 1.0:
            raise ArgumentError(f"delta_w must lie in (0, 1], got {self.delta_w}")
        n = 1.0 / self.delta_w
        if abs(n - round(n)) > 1e-12 * n:
            raise ArgumentError(f"delta_w = {self.delta_w} does not divide 1")
        if self.loss_threshold is not None and not self.loss_threshold > 0:
            raise ArgumentError("loss_threshold must be positive")
        if self.max_epochs_per_step < 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ArgumentError("invalid epoch budget, batch size or learning rate")

    @property
    def num_steps(self) -> int:
        return int(round(1.0 / self.delta_w))


@dataclass
class DirectConfig:
    learning_rate: float = 0.5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ArgumentError("invalid learning rate, batch size or epoch count")


@dataclass
class EncodeTrajectory:
    """Per-epoch rows plus per-step summaries of an encoding run.

    ``rows`` follow ``TRAJECTORY_COLUMNS``.  The first row (step 0) is the
    starting model; epoch 0 of every later step is the state right after
    ``w`` was raised, before any training.  ``step_success[i]`` holds the
    per-sample success probabilities at the end of step ``i + 1`` and
    ``initial_success`` those of the starting model.
    """

    rows: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    step_success: list[np.ndarray] = field(default_factory=list)
    step_srpg: list[np.ndarray] = field(default_factory=list)
    initial_success: np.ndarray | None = None
    initial_srpg: np.ndarray | None = None
    threshold: float = math.inf
    initial_loss: float = math.nan
    completed: bool = False
    last_w: float = 0.0
    corrections: int = 0

    @property
    def w_values(self) -> list[float]:
        return [s["w"] for s in self.steps]


# -- training loops ---------------------------------------------------------


def first_gate_grad_norms(grad) -> np.ndarray:
    """Euclidean gradient norm of the gate reading leaf slot 0, per circuit."""
    first = grad.unitaries[0][:, 0] if grad.unitaries else grad.top
    return np.linalg.norm(first, axis=(-2, -1))


def _run_epoch(model, dataset, lr, batch_size, rng, w):
    order = rng.permutation(len(dataset))
    norms = []
    corrections = 0
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        loss, grad, _ = qftn_loss_and_grad(model, dataset.images[idx], dataset.labels[idx], w)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss during Riemannian training")
        norms.append(first_gate_grad_norms(grad))
        corrections += riemannian_step(model, grad, lr)
    return np.mean(norms, axis=0), corrections


def _row(step, w, epoch, ev, test_ev, norms):
    return {
        "step": step,
        "w": w,
        "epoch": epoch,
        "train_loss": ev["loss"],
        "train_acc": ev["acc"],
        "test_loss": test_ev["loss"] if test_ev else math.nan,
        "test_acc": test_ev["acc"] if test_ev else math.nan,
        "success_prob": float(ev["success_prob"].mean()),
        "srpg": float(ev["srpg"].mean()),
        "grad_norm_mean": float(norms.mean()) if norms is not None else math.nan,
        "grad_norm_std": float(norms.std()) if norms is not None else math.nan,
    }


def _probe(model, dataset, cfg, w):
    n = min(len(dataset), cfg.batch_size)
    _, grad, _ = qftn_loss_and_grad(model, dataset.images[:n], dataset.labels[:n], w)
    return first_gate_grad_norms(grad)


def adiabatic_encode(
    model: QFTNModel,
    dataset: ImageDataset,
    cfg: EncodeConfig,
    test: ImageDataset | None = None,
) -> tuple[QFTNModel, EncodeTrajectory]:
    """Raise ``w`` from 0 to 1, retraining the gates and head after each raise.

    If the epoch budget runs out before the loss recovers at some ``w`` the
    run stops there and the trajectory has ``completed = False`` and
    ``last_w`` set; the partially encoded model is returned.
    """
    if model.side != dataset.side or model.channels != dataset.channels:
        raise ShapeError("dataset does not match the model's image shape")
    model = model.copy()
    traj = EncodeTrajectory()
    rng = np.random.default_rng(cfg.seed)
    start_w = model.w
    ev0 = qftn_evaluate(model, dataset, start_w)
    traj.initial_loss = ev0["loss"]
    traj.threshold = cfg.loss_threshold if cfg.loss_threshold is not None else cfg.threshold_factor * ev0["loss"]
    traj.initial_success, traj.initial_srpg = ev0["success_prob"], ev0["srpg"]
    test_ev0 = qftn_evaluate(model, test, start_w) if test is not None else None
    norms0 = _probe(model, dataset, cfg, start_w) if cfg.probe_gradients else None
    traj.rows.append(_row(0, start_w, 0, ev0, test_ev0, norms0))
    traj.last_w = start_w
    n_steps = cfg.num_steps
    delta = cfg.delta_w
    w_prev = start_w
    k = 0
    t0 = time.perf_counter()
    while True:
        k += 1
        if cfg.adaptive:
            w = min(1.0, w_prev + delta)
        else:
            w = min(k, n_steps) / n_steps
        model.w = w
        ev = qftn_evaluate(model, dataset, w)
        if cfg.adaptive and ev["loss"] > cfg.max_jump * traj.threshold and delta > 1e-4:
            delta /= 2.0
            model.w = w_prev
            k -= 1
            log.info("loss jump %.4f at w=%.4f, halving delta_w to %.4g", ev["loss"], w, delta)
            continue
        test_ev = qftn_evaluate(model, test, w) if test is not None else None
        norms = _probe(model, dataset, cfg, w) if cfg.probe_gradients else None
        traj.rows.append(_row(k, w, 0, ev, test_ev, norms))
        loss_before = ev["loss"]
        epochs = 0
        while ev["loss"] >= traj.threshold and epochs < cfg.max_epochs_per_step:
            epochs += 1
            norms, corr = _run_epoch(model, dataset, cfg.learning_rate, cfg.batch_size, rng, w)
            traj.corrections += corr
            ev = qftn_evaluate(model, dataset, w)
            if not np.isfinite(ev["loss"]):
                raise DivergenceError(f"non-finite loss at w={w}", None, traj)
            test_ev = qftn_evaluate(model, test, w) if test is not None else None
            traj.rows.append(_row(k, w, epochs, ev, test_ev, norms))
        traj.steps.append({
            "step": k,
            "w": w,
            "epochs": epochs,
            "loss_before": loss_before,
            "loss_after": ev["loss"],
            "threshold": traj.threshold,
            "train_acc": ev["acc"],
            "success_prob": float(ev["success_prob"].mean()),
            "srpg": float(ev["srpg"].mean()),
            "grad_norm_mean": traj.rows[-1]["grad_norm_mean"],
            "grad_norm_std": traj.rows[-1]["grad_norm_std"],
        })
        traj.step_success.append(ev["success_prob"])
        traj.step_srpg.append(ev["srpg"])
        traj.last_w = w
        log.info(
            "w=%.4f epochs=%d loss %.5f -> %.5f acc %.4f (%.1fs)",
            w, epochs, loss_before, ev["loss"], ev["acc"], time.perf_counter() - t0,
        )
        if ev["loss"] >= traj.threshold:
            return model, traj
        w_prev = w
        if w >= 1.0:
            traj.completed = True
            return model, traj


def train_direct(
    model: QFTNModel,
    dataset: ImageDataset,
    cfg: DirectConfig,
    test: ImageDataset | None = None,
) -> tuple[QFTNModel, list[dict]]:
    """Riemannian SGD at fixed ``w = 1`` from any starting point.

    Each row also carries the first-gate gradient norms (mean and standard
    deviation over circuits) averaged over the epoch's mini-batches.  Row 0
    is the untrained model.
    """
    if model.w != 1.0:
        raise PreconditionError(f"direct training runs at w = 1, model has w = {model.w}")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    ev = qftn_evaluate(model, dataset, 1.0)
    test_ev = qftn_evaluate(model, test, 1.0) if test is not None else None
    n = min(len(dataset), cfg.batch_size)
    _, g0, _ = qftn_loss_and_grad(model, dataset.images[:n], dataset.labels[:n], 1.0)
    rows = [_row(0, 1.0, 0, ev, test_ev, first_gate_grad_norms(g0))]
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        norms, _ = _run_epoch(model, dataset, cfg.learning_rate, cfg.batch_size, rng, 1.0)
        ev = qftn_evaluate(model, dataset, 1.0)
        if not np.isfinite(ev["loss"]):
            raise DivergenceError(f"non-finite loss in epoch {epoch}", None, rows)
        test_ev = qftn_evaluate(model, test, 1.0) if test is not None else None
        row = _row(0, 1.0, epoch, ev, test_ev, norms)
        row["wall_seconds"] = time.perf_counter() - t0
        rows.append(row)
        log.info("direct epoch %d loss %.5f acc %.4f", epoch, ev["loss"], ev["acc"])
    return model, rows


# -- Haar initialization ----------------------------------------------------


def haar_orthogonal(n: int, rng: np.random.Generator, size=()) -> np.ndarray:
    """Haar-distributed ``n x n`` orthogonal matrices (stacked by ``size``)."""
    size = (size,) if isinstance(size, int) else tuple(size)
    return qr_positive(rng.standard_normal(size + (n, n)))[0]


def haar_random_init(topology: TreeTopology, chi: int, seed: int, shift=(0, 0)) -> QTTNCircuit:
    if chi != topology.chi:
        raise ShapeError(f"chi = {chi} does not match 2**k = {topology.chi}")
    rng = np.random.default_rng(seed)
    internal = [haar_orthogonal(chi * chi, rng, n) for n in topology.level_sizes[:-1]]
    top = haar_orthogonal(2 * chi * chi, rng)
    return QTTNCircuit(topology, internal, top, w=1.0, scale=1.0, shift=tuple(shift))


def haar_random_qftn(L: int, k: int, d: int, seed: int = 0, shifts=None) -> QFTNModel:
    """Forest of ``d`` Haar-random circuits at ``w = 1`` with a Gaussian head."""
    topology = build_topology(L, k)
    chi = topology.chi
    shifts = shifts or [default_shift(t) for t in range(d)]
    circuits = [haar_random_init(topology, chi, seed * 1000003 + t, shifts[t]) for t in range(d)]
    unitaries = [np.stack([c.internal_unitaries[l] for c in circuits]) for l in range(topology.depth - 1)]
    top = np.stack([c.top_unitary for c in circuits])
    rng = np.random.default_rng(seed)
    head_w = rng.normal(0.0, (d * chi) ** -0.5, size=(d, d * chi))
    return QFTNModel(topology, unitaries, top, np.ones(d), shifts, head_w, np.zeros(d), d, w=1.0)


def config_dict(cfg) -> dict:
    return asdict(cfg)
