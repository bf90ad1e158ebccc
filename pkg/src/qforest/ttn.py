"""Balanced binary tree tensor networks over image pixels.

Node tensors are stored level by level.  Level 0 holds the ``N/2`` nodes
that read pixel leaves, level ``depth - 1`` holds the single top node.
Node ``j`` of level ``l > 0`` has children ``2j`` and ``2j + 1`` of level
``l - 1``; node ``j`` of level 0 reads leaf slots ``2j`` and ``2j + 1``.
Every node tensor is indexed ``(output, left, right)``.

Most routines work on "forest stacks": lists of arrays shaped
``(trees, nodes_in_level, chi, chi, chi)`` so that the ``d`` trees of a
forest are contracted together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateGaugeError, ShapeError, StaleCacheError
from .tensor_core import batched_svd

__all__ = [
    "TreeTopology",
    "TTNClassifier",
    "build_topology",
    "build_tree",
    "leaf_indices",
    "random_levels",
    "averaging_levels",
    "INIT_SCHEMES",
    "forest_forward",
    "forest_backward",
    "forest_canonicalize",
    "isometry_residuals",
    "ttn_forward",
    "ttn_grad",
    "canonicalize",
]

PAIRING_SCHEME = "alternating-vertical-first"
_ISOMETRY_KEEP_TOL = 1e-12
INIT_SCHEMES = ("gaussian", "averaging")


@dataclass(frozen=True)
class TreeTopology:
    """Pixel layout of a height-balanced binary tree.

    ``leaf_order[s]`` is the ``(row, col)`` pixel read by leaf slot ``s``.
    Image models use square grids; ``build_tree`` also produces the 2:1
    rectangles needed for leaf counts that are odd powers of two.
    """

    rows: int
    cols: int
    channels: int
    leaf_order: np.ndarray = field(repr=False)

    @property
    def side(self) -> int:
        if self.rows != self.cols:
            raise ShapeError(f"a {self.rows}x{self.cols} tree has no square side length")
        return self.rows

    @property
    def num_leaves(self) -> int:
        return self.rows * self.cols

    @property
    def depth(self) -> int:
        return int(np.log2(self.num_leaves))

    @property
    def level_sizes(self) -> list[int]:
        return [self.num_leaves >> (l + 1) for l in range(self.depth)]

    @property
    def num_nodes(self) -> int:
        return self.num_leaves - 1

    @property
    def chi(self) -> int:
        return 2**self.channels

    def node_id(self, level: int, index: int) -> int:
        """Global node number: level-0 nodes first, the top node last."""
        return sum(self.level_sizes[:level]) + index

    def node_children(self, node: int) -> tuple[tuple[str, int], tuple[str, int]]:
        level, index = self.locate(node)
        kind = "leaf" if level == 0 else "node"
        base = 0 if level == 0 else self.node_id(level - 1, 0)
        return (kind, base + 2 * index), (kind, base + 2 * index + 1)

    def locate(self, node: int) -> tuple[int, int]:
        for level, size in enumerate(self.level_sizes):
            if node < size:
                return level, node
            node -= size
        raise ArgumentError("node id out of range")

    @property
    def nodes(self) -> list[tuple[tuple[str, int], tuple[str, int]]]:
        return [self.node_children(n) for n in range(self.num_nodes)]


def _leaf_order(rows: int, cols: int, r0: int, c0: int, level: int, out: list) -> None:
    if level < 0:
        out.append((r0, c0))
        return
    if level % 2 == 0:
        # even levels join vertically adjacent blocks
        h = rows // 2
        _leaf_order(h, cols, r0, c0, level - 1, out)
        _leaf_order(h, cols, r0 + h, c0, level - 1, out)
    else:
        w = cols // 2
        _leaf_order(rows, w, r0, c0, level - 1, out)
        _leaf_order(rows, w, r0, c0 + w, level - 1, out)


def build_topology(L: int, k: int = 1) -> TreeTopology:
    """Tree whose level-0 nodes pair pixels ``(r, c)`` and ``(r + 1, c)``.

    Levels then alternate horizontal and vertical joins, so every subtree
    covers a square or a 2:1 rectangle of pixels.
    """
    if L < 2 or L & (L - 1):
        raise ArgumentError(f"side length must be a power of two >= 2, got {L}")
    if k < 1:
        raise ArgumentError(f"channel count must be positive, got {k}")
    order: list = []
    depth = int(np.log2(L * L))
    _leaf_order(L, L, 0, 0, depth - 1, order)
    return TreeTopology(L, L, k, np.array(order, dtype=np.int64))


def build_tree(num_leaves: int, k: int = 1) -> TreeTopology:
    """Tree over ``num_leaves`` pixels (a power of two >= 2).

    Even depths give the square ``build_topology`` layout; odd depths give
    a grid with twice as many rows as columns, with the same pairing rule.
    """
    if num_leaves < 2 or num_leaves & (num_leaves - 1):
        raise ArgumentError(f"leaf count must be a power of two >= 2, got {num_leaves}")
    if k < 1:
        raise ArgumentError(f"channel count must be positive, got {k}")
    depth = int(np.log2(num_leaves))
    rows, cols = 2 ** ((depth + 1) // 2), 2 ** (depth // 2)
    order: list = []
    _leaf_order(rows, cols, 0, 0, depth - 1, order)
    return TreeTopology(rows, cols, k, np.array(order, dtype=np.int64))


def leaf_indices(topology: TreeTopology, shifts) -> np.ndarray:
    """Flat pixel index read by every leaf slot after each cyclic shift.

    Returns an int array ``(trees, N)``.  A shifted image has
    ``out[(r + dv) % L, (c + dh) % L] = in[r, c]``, so slot ``(R, C)``
    reads input pixel ``((R - dv) % L, (C - dh) % L)``.
    """
    R, C = topology.rows, topology.cols
    rows, cols = topology.leaf_order[:, 0], topology.leaf_order[:, 1]
    out = []
    for dv, dh in shifts:
        out.append(((rows - dv) % R) * C + (cols - dh) % C)
    return np.array(out, dtype=np.int64)


def random_levels(topology: TreeTopology, trees: int, rng: np.random.Generator) -> list[np.ndarray]:
    chi = topology.chi
    std = chi**-0.5
    return [
        rng.normal(0.0, std, size=(trees, n, chi, chi, chi))
        for n in topology.level_sizes
    ]


def averaging_levels(
    topology: TreeTopology, trees: int, rng: np.random.Generator, noise: float = 0.1
) -> list[np.ndarray]:
    """Tensors that make every tree compute (1, mean intensity), plus noise.

    Bond index 0 carries the constant function and bond index 1 the running
    average of the pixel intensities; the remaining bond indices start at
    zero.  Gaussian noise of standard deviation ``noise`` is added to every
    entry so the trees break symmetry.  Deep random products start as a
    scrambled high-degree polynomial, while this starting point is close to
    a linear model of the image, which trains far more reliably.
    """
    chi, k = topology.chi, topology.channels
    bits = (np.arange(chi)[:, None] >> (k - 1 - np.arange(k))) & 1
    const = np.ones(chi)
    mean = (bits == 0).mean(axis=1)  # mean . phi(x) = average of the channel values
    leaf = np.zeros((chi, chi, chi))
    leaf[0] = np.outer(const, const)
    leaf[1] = 0.5 * (np.outer(mean, const) + np.outer(const, mean))
    inner = np.zeros((chi, chi, chi))
    inner[0, 0, 0] = 1.0
    inner[1, 1, 0] = inner[1, 0, 1] = 0.5
    return [
        (leaf if l == 0 else inner) + rng.normal(0.0, noise, size=(trees, n, chi, chi, chi))
        for l, n in enumerate(topology.level_sizes)
    ]


# -- forest-stacked contraction -------------------------------------------


def _node_outputs(T: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    # out[b,t,n,o] = sum_ij T[t,n,o,i,j] left[b,t,n,i] right[b,t,n,j]
    chi_o, chi_l, chi_r = T.shape[-3:]
    Tr = T.reshape(T.shape[:-3] + (chi_o * chi_l, chi_r)) @ right[..., None]
    Tr = Tr.reshape(Tr.shape[:-2] + (chi_o, chi_l))
    return (Tr @ left[..., None])[..., 0]


def forest_forward(levels: list[np.ndarray], leaves: np.ndarray) -> list[np.ndarray]:
    """Bottom-up contraction of a forest.

    ``leaves`` has shape ``(batch, trees, N, chi)``.  Returns the list of
    activations: entry 0 is ``leaves``, entry ``l + 1`` the outputs of level
    ``l`` with shape ``(batch, trees, n_l, chi)``.  The last entry holds the
    top-node outputs.
    """
    acts = [leaves]
    x = leaves
    for l, T in enumerate(levels):
        if x.shape[-2] != 2 * T.shape[-4] or x.shape[-1] != T.shape[-2]:
            raise ShapeError(
                f"level {l} expects {2 * T.shape[-4]} inputs of dim {T.shape[-2]}, "
                f"got {x.shape[-2]} of dim {x.shape[-1]}"
            )
        x = _node_outputs(T, x[..., 0::2, :], x[..., 1::2, :])
        acts.append(x)
    return acts


def forest_backward(
    levels: list[np.ndarray], acts: list[np.ndarray], upstream: np.ndarray
) -> list[np.ndarray]:
    """Gradients of ``sum_b <upstream[b], top_output[b]>`` per level.

    ``upstream`` has shape ``(batch, trees, chi)``.  Gradients are summed
    over the batch and shaped like ``levels``.
    """
    grads = [None] * len(levels)
    g = upstream[..., None, :]
    for l in range(len(levels) - 1, -1, -1):
        T = levels[l]
        x = acts[l]
        left, right = x[..., 0::2, :], x[..., 1::2, :]
        chi_o, chi_l, chi_r = T.shape[-3:]
        gl = (g[..., :, None] * left[..., None, :]).reshape(g.shape[:-1] + (chi_o * chi_l,))
        # sum over the batch of (g x left) outer right
        a = np.moveaxis(gl, 0, -1)  # (t, n, o*i, b)
        b = np.moveaxis(right, 0, -2)  # (t, n, b, j)
        grads[l] = (a @ b).reshape(T.shape)
        if l == 0:
            break
        Tm = T.reshape(T.shape[:-3] + (chi_o * chi_l, chi_r))
        d_right = (gl[..., None, :] @ Tm)[..., 0, :]
        Tr = (Tm @ right[..., None]).reshape(right.shape[:-1] + (chi_o, chi_l))
        d_left = (g[..., None, :] @ Tr)[..., 0, :]
        g = np.empty(x.shape)
        g[..., 0::2, :] = d_left
        g[..., 1::2, :] = d_right
    return grads


def forest_canonicalize(levels: list[np.ndarray]) -> list[np.ndarray]:
    """Isometrize every non-top node by a bottom-up SVD sweep.

    Each node ``A[o,(ij)] = U S V`` is replaced by ``V`` and ``U S`` is
    absorbed into the matching child leg of its parent.  The top node keeps
    the accumulated gauge and stays non-isometric.
    """
    levels = [np.array(T, dtype=np.float64, copy=True) for T in levels]
    for l in range(len(levels) - 1):
        T = levels[l]
        t, n, chi = T.shape[:3]
        mat = T.reshape(t, n, chi, -1)
        zero = ~np.any(mat != 0.0, axis=(-2, -1))
        if np.any(zero):
            tree, node = np.argwhere(zero)[0]
            raise DegenerateGaugeError(
                f"node {node} of level {l} in tree {tree} is exactly zero; "
                "its gauge is undefined"
            )
        u, s, vt = batched_svd(mat)
        R = u * s[..., None, :]  # (t, n, chi, chi), R[i, l]
        # nodes that already are isometries keep their gauge (degenerate
        # singular values would otherwise rotate them arbitrarily)
        gram = mat @ np.swapaxes(mat, -1, -2)
        done = np.linalg.norm(gram - np.eye(chi), axis=(-2, -1)) < _ISOMETRY_KEEP_TOL
        vt[done] = mat[done]
        R[done] = np.eye(chi)
        levels[l] = vt.reshape(T.shape)
        P = levels[l + 1]
        P = np.einsum("tpoij,tpil->tpolj", P, R[:, 0::2])
        P = np.einsum("tpoij,tpjl->tpoil", P, R[:, 1::2])
        levels[l + 1] = P
    return levels


def isometry_residuals(levels: list[np.ndarray]) -> list[np.ndarray]:
    """``||V V^T - I||_F`` for every non-top node, one array per level."""
    out = []
    for T in levels[:-1]:
        chi = T.shape[-3]
        m = T.reshape(T.shape[:-3] + (chi, -1))
        gram = m @ np.swapaxes(m, -1, -2)
        out.append(np.linalg.norm(gram - np.eye(chi), axis=(-2, -1)))
    return out


# -- single-tree model -----------------------------------------------------


class TTNClassifier:
    """One tree of ``chi x chi x chi`` node tensors, top node included."""

    def __init__(self, topology: TreeTopology, tensors: list[np.ndarray], is_canonical: bool = False):
        chi = topology.chi
        tensors = [np.asarray(T, dtype=np.float64) for T in tensors]
        if len(tensors) != topology.depth:
            raise ShapeError(f"expected {topology.depth} levels, got {len(tensors)}")
        for l, (T, n) in enumerate(zip(tensors, topology.level_sizes)):
            if T.shape != (n, chi, chi, chi):
                raise ShapeError(
                    f"level {l} tensors must have shape {(n, chi, chi, chi)}, got {T.shape}"
                )
        self.topology = topology
        self.chi = chi
        self.tensors = tensors
        self.is_canonical = is_canonical
        self._cache = None

    @classmethod
    def random(cls, topology: TreeTopology, seed: int = 0) -> "TTNClassifier":
        levels = random_levels(topology, 1, np.random.default_rng(seed))
        return cls(topology, [T[0] for T in levels])

    @property
    def node_tensors(self) -> list[np.ndarray]:
        return [T[j] for T in self.tensors for j in range(T.shape[0])]

    def stacked(self) -> list[np.ndarray]:
        return [T[None] for T in self.tensors]


def _as_leaf_batch(ttn: TTNClassifier, leaves) -> tuple[np.ndarray, bool]:
    x = np.asarray(leaves, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (ttn.topology.num_leaves, ttn.chi):
        raise ShapeError(
            f"expected leaves of shape (N={ttn.topology.num_leaves}, chi={ttn.chi}), "
            f"got {np.shape(leaves)}"
        )
    return x, single


def ttn_forward(ttn: TTNClassifier, leaves) -> np.ndarray:
    """Top-node output for ``(N, chi)`` leaves, or a ``(batch, N, chi)`` stack.

    The intermediate activations are cached on ``ttn`` for ``ttn_grad``.
    """
    x, single = _as_leaf_batch(ttn, leaves)
    acts = forest_forward(ttn.stacked(), x[:, None])
    ttn._cache = (x.copy(), [T.copy() for T in ttn.tensors], acts)
    out = acts[-1][:, 0, 0, :]
    return out[0] if single else out


def ttn_grad(ttn: TTNClassifier, leaves, upstream) -> list[np.ndarray]:
    """Per-level gradients of ``<upstream, ttn_forward(ttn, leaves)>``.

    Requires a preceding ``ttn_forward`` on the same leaves and tensors.
    """
    x, single = _as_leaf_batch(ttn, leaves)
    if ttn._cache is None:
        raise StaleCacheError("ttn_grad called before ttn_forward")
    cx, ctensors, acts = ttn._cache
    if cx.shape != x.shape or not np.array_equal(cx, x) or any(
        not np.array_equal(a, b) for a, b in zip(ctensors, ttn.tensors)
    ):
        raise StaleCacheError("cached forward pass does not match the current leaves or tensors")
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up[None]
    grads = forest_backward(ttn.stacked(), acts, up[:, None, :])
    return [g[0] for g in grads]


def canonicalize(ttn: TTNClassifier) -> TTNClassifier:
    levels = forest_canonicalize(ttn.stacked())
    return TTNClassifier(ttn.topology, [T[0] for T in levels], is_canonical=True)
