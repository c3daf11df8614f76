"""DEC clustering head (Student-t soft assignment, sharpened targets, KL) and metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffkernels as dk
from .errors import DegenerateCluster, InsufficientCells, NonFinite, ShapeMismatch


@dataclass
class ClusterState:
    centroids: dk.Var  # K x d_z
    alpha: float = 1.0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(Z, C):
    zz = np.einsum("ij,ij->i", Z, Z)[:, None]
    cc = np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(zz + cc - 2.0 * Z @ C.T, 0.0)


def soft_assign(Z, cs: ClusterState) -> dk.Var:
    """Student-t kernel similarities normalised per row."""
    Z = dk.as_var(Z)
    C = cs.centroids
    if Z.shape[1] != C.shape[1]:
        raise ShapeMismatch(f"embedding width {Z.shape[1]} != centroid width {C.shape[1]}")
    a = cs.alpha
    D = _sq_dists(Z.value, C.value)
    logk = -0.5 * (a + 1.0) * np.log1p(D / a)
    logk -= logk.max(axis=1, keepdims=True)
    k = np.exp(logk)
    q = k / k.sum(axis=1, keepdims=True)

    def backward(g):
        # dL/dD_il = s_il q_il (g_il - sum_j g_ij q_ij),  s = d log k / dD
        s = -0.5 * (a + 1.0) / (a + D)
        G = s * q * (g - (g * q).sum(axis=1, keepdims=True))
        if Z.requires_grad:
            dk._acc(Z, 2.0 * (G.sum(axis=1, keepdims=True) * Z.value - G @ C.value))
        if C.requires_grad:
            dk._acc(C, -2.0 * (G.T @ Z.value - G.sum(axis=0)[:, None] * C.value))

    return dk.new_node(q, (Z, C), backward)


def target_distribution(Q) -> np.ndarray:
    Q = dk.as_var(Q).value
    f = Q.sum(axis=0)
    if np.any(f <= 0):
        raise DegenerateCluster(f"cluster {int(np.flatnonzero(f <= 0)[0])} has zero soft frequency")
    w = Q * Q / f
    return w / w.sum(axis=1, keepdims=True)


def dec_loss(P, Q) -> dk.Var:
    """``KL(P || Q)`` summed over cells and clusters; ``P`` is a constant target."""
    P = np.asarray(dk.as_var(P).value)
    Q = dk.as_var(Q)
    if P.shape != Q.shape:
        raise ShapeMismatch(f"P {P.shape} vs Q {Q.shape}")
    q = Q.value
    pos = P > 0
    if np.any(pos & (q <= 0)):
        raise NonFinite("q is zero where p is positive")
    value = np.array([[np.sum(P[pos] * (np.log(P[pos]) - np.log(q[pos])))]])

    def backward(g):
        gq = np.zeros_like(q)
        gq[pos] = -P[pos] / q[pos]
        dk._acc(Q, g.item() * gq)

    return dk.new_node(value, (Q,), backward)


def predict_labels(Q) -> np.ndarray:
    return np.argmax(dk.as_var(Q).value, axis=1)


def _lloyd(Z: np.ndarray, first: int, K: int, max_iter: int):
    n = Z.shape[0]
    chosen = [first]
    mind = _sq_dists(Z, Z[chosen])[:, 0]
    for _ in range(1, K):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, _sq_dists(Z, Z[[nxt]])[:, 0])
    C = Z[chosen].copy()
    labels = np.full(n, -1)
    for _ in range(max_iter):
        D = _sq_dists(Z, C)
        new = np.argmin(D, axis=1)
        for k in range(K):
            if not np.any(new == k):
                own = D[np.arange(n), new]
                far = int(np.argmax(own))
                new[far] = k
        if np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            C[k] = Z[labels == k].mean(axis=0)
    inertia = float(np.sum((Z - C[labels]) ** 2))
    return C, labels, inertia


def kmeans(Z: np.ndarray, K: int, seed: int, max_iter: int = 100, n_init: int = 10):
    """Lloyd's k-means with farthest-first seeding and seeded restarts.

    Each start draws a random first centre from the seeded generator; each
    further centre is the point farthest from the centres chosen so far.  A
    cluster that loses all members is re-seeded with the point farthest from
    its own centre.  The start with the lowest inertia wins, ties going to
    the earliest.  Returns ``(centroids, labels)``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if n < K:
        raise InsufficientCells(f"{n} cells for {K} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(Z, int(rng.integers(n)), K, max_iter)
        if best is None or run[2] < best[2]:
            best = run
    return best[0], best[1]


def init_centroids(Z, K: int, seed: int, alpha: float = 1.0) -> ClusterState:
    C, _ = kmeans(dk.as_var(Z).value, K, seed)
    c = dk.Var(C, requires_grad=True)
    c.grad = np.zeros_like(C)
    return ClusterState(centroids=c, alpha=alpha)


# -- external metrics -------------------------------------------------------------


def contingency(pred, truth) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch("prediction and truth lengths differ")
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1 if p.size else 0, t.max() + 1 if t.size else 0), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def metric_acc(pred, truth) -> float:
    """Accuracy under the best one-to-one relabelling (Hungarian assignment)."""
    table = contingency(pred, truth)
    size = max(table.shape)
    square = np.zeros((size, size), dtype=np.int64)
    square[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(square, maximize=True)
    return int(square[rows, cols].sum()) / len(pred)


def metric_ari(pred, truth) -> float:
    """Adjusted Rand index, evaluated in exact integer arithmetic until the final division."""
    table = contingency(pred, truth)
    n = int(table.sum())

    def comb2(v):
        v = np.asarray(v, dtype=object)
        return int(np.sum(v * (v - 1) // 2))

    index = comb2(table.ravel())
    a = comb2(table.sum(axis=1))
    b = comb2(table.sum(axis=0))
    pairs = n * (n - 1) // 2
    # ARI = (index - a b / pairs) / ((a + b)/2 - a b / pairs), scaled by 2 * pairs
    num = 2 * pairs * index - 2 * a * b
    den = pairs * (a + b) - 2 * a * b
    if den == 0:
        return 1.0
    return num / den
