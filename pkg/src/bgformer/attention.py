"""Full self-attention baseline and cell-to-anchor bipartite attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkernels as dk
from .errors import LabelOutOfRange, ShapeMismatch


@dataclass
class FullAttentionParams:
    W_Q: object
    W_K: object
    W_V: object

    @property
    def d_k(self) -> int:
        return dk.as_var(self.W_Q).shape[1]


@dataclass
class BipartiteHead:
    W_p: object  # d x d_k, cell queries
    W_k: object  # d_u x d_k, anchor keys
    W_v: object  # d_u x d_h, anchor values


@dataclass
class BipartiteAttentionParams:
    heads: list
    W_c: object  # d x (l * d_h)
    scale_scores: bool = False

    def __post_init__(self):
        if not self.heads:
            raise ShapeMismatch("at least one attention head is required")
        d_k = {dk.as_var(h.W_p).shape[1] for h in self.heads}
        d_h = {dk.as_var(h.W_v).shape[1] for h in self.heads}
        if len(d_k) != 1 or len(d_h) != 1:
            raise ShapeMismatch("all heads must share d_k and d_h")


def full_self_attention(X, p: FullAttentionParams):
    """Return ``(A, Z_hat)`` with ``A = softmax(Q K^T / sqrt(d_k))`` and ``Z_hat = A V``."""
    X = dk.as_var(X)
    if X.shape[0] < 1:
        raise ShapeMismatch("full attention needs at least one cell")
    Q = dk.matmul(X, p.W_Q)
    K = dk.matmul(X, p.W_K)
    V = dk.matmul(X, p.W_V)
    S = dk.scale(dk.matmul_t(Q, K), 1.0 / math.sqrt(p.d_k))
    A = dk.row_softmax(S)
    return A, dk.matmul(A, V)


def bipartite_head(X, U, head: BipartiteHead, scale_scores: bool = False):
    """Attention of every cell over the anchors for one head.

    Returns ``(B, Z_head)`` where ``B`` is ``(n, m)`` row-stochastic and
    ``Z_head = B (U W_v)``.
    """
    X, U = dk.as_var(X), dk.as_var(U)
    if U.shape[0] < 1:
        raise ShapeMismatch("bipartite attention needs at least one anchor")
    query = dk.matmul(X, head.W_p)
    key = dk.matmul(U, head.W_k)
    S = dk.matmul_t(query, key)
    if scale_scores:
        S = dk.scale(S, 1.0 / math.sqrt(query.shape[1]))
    B = dk.row_softmax(S)
    value = dk.matmul(U, head.W_v)
    return B, dk.matmul(B, value)


def multi_head_bipartite(X, U, p: BipartiteAttentionParams):
    """Run every head; concatenate head outputs column-wise in head order."""
    B_list, outs = [], []
    for head in p.heads:
        B, Zh = bipartite_head(X, U, head, p.scale_scores)
        B_list.append(B)
        outs.append(Zh)
    Z_out = outs[0] if len(outs) == 1 else dk.concat_cols(outs)
    return B_list, Z_out


def residual_embed(X, Z_out, W_c):
    return dk.add(Z_out, dk.matmul(X, W_c))


def bipartite_embed(X, U, p: BipartiteAttentionParams):
    """Multi-head bipartite attention followed by the residual projection."""
    B_list, Z_out = multi_head_bipartite(X, U, p)
    return B_list, residual_embed(X, Z_out, p.W_c)


def class_attention_summary(B, labels, K: int) -> np.ndarray:
    """Mean attention row per class, shape ``(K, m)``; empty classes are zero."""
    B = dk.as_var(B).value
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != B.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {B.shape[0]} cells")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    sums = np.zeros((K, B.shape[1]))
    np.add.at(sums, labels, B)
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    out = np.zeros_like(sums)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out
