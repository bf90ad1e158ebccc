"""Forest tensor network classifier.

``d`` independently parameterized trees each see a cyclically shifted copy
of the image.  Their top outputs go through the squared-amplitude map
``psi(y) = y**2 / sum(y**2)``, are concatenated, and feed one linear layer
producing ``d`` logits.  Training minimizes softmax cross-entropy with Adam.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data_io import ImageDataset, default_shift, pixel_features
from .errors import ArgumentError, DataError, DegenerateInputError, DivergenceError, ShapeError
from .ttn import (
    INIT_SCHEMES,
    averaging_levels,
    TreeTopology,
    TTNClassifier,
    build_topology,
    forest_backward,
    forest_canonicalize,
    forest_forward,
    leaf_indices,
    random_levels,
)

log = logging.getLogger(__name__)

__all__ = [
    "FTNClassifier",
    "FTNGrad",
    "TrainConfig",
    "Adam",
    "measurement_map",
    "ftn_forward",
    "loss_and_grad",
    "evaluate",
    "predict",
    "train_ftn",
    "canonicalize_ftn",
    "softmax_nll",
]


# -- psi ------------------------------------------------------------------


def _psi(y: np.ndarray) -> np.ndarray:
    sq = y * y
    total = sq.sum(axis=-1, keepdims=True)
    if np.any(total == 0.0):
        raise DegenerateInputError("psi is undefined for an all-zero vector")
    return sq / total


def _psi_backward(y: np.ndarray, p: np.ndarray, g: np.ndarray) -> np.ndarray:
    # dpsi_i/dy_j = 2 y_j (delta_ij - p_i) / sum(y**2)
    total = (y * y).sum(axis=-1, keepdims=True)
    return 2.0 * y * (g - (g * p).sum(axis=-1, keepdims=True)) / total


def measurement_map(y) -> np.ndarray:
    """Squared amplitudes of ``y`` normalized to a probability vector."""
    return _psi(np.asarray(y, dtype=np.float64))


def softmax_nll(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample negative log-likelihood and softmax probabilities."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    nll = -np.take_along_axis(logp, labels[:, None], axis=-1)[:, 0]
    return nll, np.exp(logp)


# -- model ----------------------------------------------------------------


class FTNClassifier:
    """A forest of ``d`` shifted trees plus a linear head.

    Tree tensors are stored stacked: ``levels[l]`` has shape
    ``(d, nodes_in_level_l, chi, chi, chi)``.
    """

    def __init__(
        self,
        topology: TreeTopology,
        levels: list[np.ndarray],
        shifts,
        head_w: np.ndarray,
        head_b: np.ndarray,
        num_classes: int,
        is_canonical: bool = False,
    ):
        d, chi = num_classes, topology.chi
        shifts = [tuple(int(v) for v in s) for s in shifts]
        if len(shifts) != d:
            raise ShapeError(f"need {d} shifts, got {len(shifts)}")
        levels = [np.asarray(T, dtype=np.float64) for T in levels]
        for l, (T, n) in enumerate(zip(levels, topology.level_sizes)):
            if T.shape != (d, n, chi, chi, chi):
                raise ShapeError(f"level {l}: expected {(d, n, chi, chi, chi)}, got {T.shape}")
        if len(levels) != topology.depth:
            raise ShapeError(f"expected {topology.depth} levels, got {len(levels)}")
        head_w = np.asarray(head_w, dtype=np.float64)
        head_b = np.asarray(head_b, dtype=np.float64)
        if head_w.shape != (d, d * chi) or head_b.shape != (d,):
            raise ShapeError(
                f"head must be ({d}, {d * chi}) and ({d},), got {head_w.shape} and {head_b.shape}"
            )
        self.topology = topology
        self.levels = levels
        self.shifts = shifts
        self.head_w = head_w
        self.head_b = head_b
        self.num_classes = d
        self.is_canonical = is_canonical
        self._leaf_index = leaf_indices(topology, shifts)

    @classmethod
    def random(
        cls, L: int, k: int, d: int, seed: int = 0, shifts=None, init: str = "gaussian", noise: float = 0.1
    ) -> "FTNClassifier":
        """Fresh forest.  ``init`` is ``"gaussian"`` (i.i.d. entries, std
        ``chi**-0.5``) or ``"averaging"`` (see ``averaging_levels``)."""
        if init not in INIT_SCHEMES:
            raise ArgumentError(f"unknown init {init!r}; expected one of {INIT_SCHEMES}")
        topology = build_topology(L, k)
        rng = np.random.default_rng(seed)
        if init == "gaussian":
            levels = random_levels(topology, d, rng)
        else:
            levels = averaging_levels(topology, d, rng, noise)
        chi = topology.chi
        head_w = rng.normal(0.0, (d * chi) ** -0.5, size=(d, d * chi))
        head_b = np.zeros(d)
        if shifts is None:
            shifts = [default_shift(t) for t in range(d)]
        model = cls(topology, levels, shifts, head_w, head_b, d)
        expected = (topology.num_leaves - 1) * chi**3 * d + chi * d * d + d
        assert model.num_parameters() == expected
        return model

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
    def ttns(self) -> list[TTNClassifier]:
        return [
            TTNClassifier(self.topology, [T[t] for T in self.levels], self.is_canonical)
            for t in range(self.num_classes)
        ]

    def parameters(self) -> list[np.ndarray]:
        return [*self.levels, self.head_w, self.head_b]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "FTNClassifier":
        return FTNClassifier(
            self.topology,
            [T.copy() for T in self.levels],
            self.shifts,
            self.head_w.copy(),
            self.head_b.copy(),
            self.num_classes,
            self.is_canonical,
        )


@dataclass
class FTNGrad:
    levels: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        return [*self.levels, self.head_w, self.head_b]


def prepare_leaves(model, images: np.ndarray) -> np.ndarray:
    """Shifted feature leaves ``(batch, trees, N, chi)`` for ``(batch, L, L, k)`` images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (model.side, model.side, model.channels):
        raise ShapeError(
            f"expected images of shape (batch, {model.side}, {model.side}, {model.channels}), "
            f"got {images.shape}"
        )
    feats = pixel_features(images).reshape(len(images), -1, model.chi)
    return feats[:, model.leaf_index]


def _as_batch(images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    single = x.ndim == 3
    return (x[None] if single else x), single


def _forward(model: FTNClassifier, images: np.ndarray):
    acts = forest_forward(model.levels, prepare_leaves(model, images))
    y = acts[-1][:, :, 0, :]
    p = _psi(y)
    z = p.reshape(len(p), -1)
    logits = z @ model.head_w.T + model.head_b
    return logits, (acts, y, p, z)


def ftn_forward(model: FTNClassifier, image) -> np.ndarray:
    """Logits for one ``(L, L, k)`` image or a ``(batch, L, L, k)`` stack."""
    x, single = _as_batch(image)
    logits, _ = _forward(model, x)
    return logits[0] if single else logits


def predict(model: FTNClassifier, image) -> np.ndarray | int:
    """Argmax class; ties go to the lowest index."""
    logits = ftn_forward(model, image)
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def _check_labels(labels, d: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= d):
        raise DataError(f"labels must lie in [0, {d})")
    return labels


def loss_and_grad(model: FTNClassifier, images, labels) -> tuple[float, FTNGrad]:
    """Mean cross-entropy over the batch and its exact gradient."""
    images = np.asarray(images, dtype=np.float64)
    labels = _check_labels(labels, model.num_classes)
    if len(images) == 0:
        raise ArgumentError("empty batch")
    logits, (acts, y, p, z) = _forward(model, images)
    nll, probs = softmax_nll(logits, labels)
    B = len(labels)
    dlogits = probs
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    g_w = dlogits.T @ z
    g_b = dlogits.sum(axis=0)
    dp = (dlogits @ model.head_w).reshape(p.shape)
    dy = _psi_backward(y, p, dp)
    g_levels = forest_backward(model.levels, acts, dy)
    return float(nll.mean()), FTNGrad(g_levels, g_w, g_b)


def evaluate(model, dataset: ImageDataset, batch_size: int = 1024, forward=None) -> tuple[float, float]:
    """Mean loss and accuracy over ``dataset``."""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    forward = forward or ftn_forward
    nll_sum, correct = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        yl = dataset.labels[start:start + batch_size]
        logits = forward(model, x)
        nll, _ = softmax_nll(logits, yl)
        nll_sum += float(nll.sum())
        correct += int((np.argmax(logits, axis=-1) == yl).sum())
    return nll_sum / len(dataset), correct / len(dataset)


# -- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    subset_size: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0 or self.eps <= 0:
            raise ArgumentError("learning_rate, batch_size, epochs and eps must be non-negative")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ArgumentError("Adam betas must lie in (0, 1)")
        if self.subset_size < 0:
            raise ArgumentError("subset_size must be >= 0")


@dataclass
class Adam:
    params: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_ftn(
    model: FTNClassifier,
    dataset: ImageDataset,
    cfg: TrainConfig,
    test: ImageDataset | None = None,
) -> tuple[FTNClassifier, list[dict]]:
    """Adam over seeded mini-batches; one metrics row per epoch.

    Returns a trained copy of ``model``.  The input model is not modified.
    """
    if dataset.side != model.side or dataset.channels != model.channels:
        raise ShapeError(
            f"dataset images are {dataset.side}x{dataset.side}x{dataset.channels}, "
            f"model expects {model.side}x{model.side}x{model.channels}"
        )
    if cfg.subset_size:
        dataset = dataset.subset(cfg.subset_size, cfg.seed)
    model = model.copy()
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    good = model.copy()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grad = loss_and_grad(model, dataset.images[idx], dataset.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", good, history)
            opt.step(grad.as_list())
        row = {"epoch": epoch}
        row["train_loss"], row["train_acc"] = evaluate(model, dataset)
        if not np.isfinite(row["train_loss"]):
            raise DivergenceError(f"non-finite loss after epoch {epoch}", good, history)
        if test is not None and len(test):
            row["test_loss"], row["test_acc"] = evaluate(model, test)
        else:
            row["test_loss"], row["test_acc"] = float("nan"), float("nan")
        row["wall_seconds"] = time.perf_counter() - start
        history.append(row)
        good = model.copy()
        log.info("epoch %d loss %.5f acc %.4f", epoch, row["train_loss"], row["train_acc"])
    return model, history


def canonicalize_ftn(model: FTNClassifier) -> FTNClassifier:
    """Every tree isometrized below its top node; logits are unchanged."""
    return FTNClassifier(
        model.topology,
        forest_canonicalize(model.levels),
        model.shifts,
        model.head_w.copy(),
        model.head_b.copy(),
        model.num_classes,
        is_canonical=True,
    )
