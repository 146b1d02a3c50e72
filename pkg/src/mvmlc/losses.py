"""Training objectives: masked BCE classification losses and the
label-guided graph constraint.

The graph constraint treats label agreement as ground truth for how close
two samples should be, and pushes each view's embedding cosine similarity
toward it with a binary cross-entropy, skipping any pair where either view
is unavailable or no label category is known for both samples.

Label similarity T and pair validity U are functions of the (constant)
labels and masks only, so they are plain numpy arrays and no gradient flows
into them; all similarity learning happens through the embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateMask

# Probabilities and similarities are clamped here before any log; the floor
# sits comfortably inside float32 resolution.
PROB_CLAMP = 1e-7
# Embedding norms are floored at 1e-12 (squared: 1e-24) before division.
NORM_FLOOR_SQ = 1e-24


def label_similarity(labels: np.ndarray, label_mask: np.ndarray):
    """Pairwise label agreement T and pair validity U.

    T[i, j] is the number of shared known positive tags divided by the number
    of categories known in both rows. Pairs with no commonly-known category
    get U[i, j] = 0 and T[i, j] = 0 by convention (0/0 carries no signal).
    Both outputs are constants: plain float arrays, never Tensors.
    """
    y = np.asarray(labels, dtype=np.float64)
    g = np.asarray(label_mask, dtype=np.float64)
    known_pos = y * g
    shared_pos = known_pos @ known_pos.T
    shared_known = g @ g.T
    valid = shared_known > 0
    t = np.where(valid, shared_pos / np.maximum(shared_known, 1.0), 0.0)
    return t, valid.astype(np.float64)


def embedding_similarity(z: Tensor) -> Tensor:
    """Cosine similarity mapped to [0, 1]: (cos + 1) / 2 over the last axis.

    Accepts (n, d) or any leading batch axes, e.g. (m, n, d) for per-view
    similarity stacks, returning (..., n, n). Norms are floored so zero
    vectors stay finite.
    """
    sq_norm = (z * z).sum(axis=-1, keepdims=True)
    inv_norm = 1.0 / ad.sqrt(ad.clamp_min(sq_norm, NORM_FLOOR_SQ))
    unit = z * inv_norm
    cos = ad.matmul(unit, ad.transpose(unit, axes=_swap_axes(unit.ndim)))
    return (cos + 1.0) * 0.5


def _swap_axes(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def pair_counts(view_mask: np.ndarray, pair_valid: np.ndarray) -> np.ndarray:
    """Ordered pair count per view: pairs (i, j), i != j, with both views
    available and a valid label comparison."""
    w = np.asarray(view_mask, dtype=np.float64)
    n = w.shape[0]
    off_diag = 1.0 - np.eye(n)
    counts = []
    for v in range(w.shape[1]):
        pair_w = np.outer(w[:, v], w[:, v]) * pair_valid * off_diag
        counts.append(pair_w.sum())
    return np.asarray(counts)


def graph_constraint_loss(view_states: Tensor, label_sim: np.ndarray,
                          pair_valid: np.ndarray, view_mask: np.ndarray) -> Tensor:
    """Cross-entropy between label similarity and per-view embedding similarity.

    view_states: (n, m, d_e) encoder outputs. For each view, the BCE between
    T[i, j] and that view's similarity S[i, j] is averaged over its own valid
    ordered pairs (i != j, both views available, U[i, j] = 1), then averaged
    over views with the 1/(2m) convention. Views without a single valid pair
    contribute zero; if no view has one, the loss is zero with a warning.
    """
    n, m, _ = view_states.shape
    dt = view_states.data.dtype
    counts = pair_counts(view_mask, pair_valid)
    if not np.any(counts > 0):
        warnings.warn("graph constraint skipped: no valid sample pair in any view")
        return Tensor(np.zeros((), dtype=dt))

    w = np.asarray(view_mask, dtype=np.float64)
    off_diag = 1.0 - np.eye(n)
    # (m, n, n) pair weights folding in the per-view 1/N normalizer
    pair_w = w.T[:, :, None] * w.T[:, None, :] * pair_valid[None] * off_diag[None]
    scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    pair_w *= scale[:, None, None]

    sim = embedding_similarity(ad.transpose(view_states, (1, 0, 2)))  # (m, n, n)
    sim = ad.clamp(sim, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.broadcast_to(np.asarray(label_sim, dtype=dt), sim.shape)
    bce = Tensor(t) * ad.log(sim) + Tensor(1.0 - t) * ad.log(1.0 - sim)
    return (bce * Tensor(pair_w.astype(dt))).sum() * (-1.0 / (2.0 * m))


def masked_bce(probs: Tensor, labels: np.ndarray, label_mask: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over known (sample, label) entries only."""
    g = np.asarray(label_mask, dtype=probs.data.dtype)
    known = g.sum()
    if known == 0:
        raise DegenerateMask("masked BCE needs at least one known label")
    y = np.asarray(labels, dtype=probs.data.dtype)
    p = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = Tensor(y) * ad.log(p) + Tensor(1.0 - y) * ad.log(1.0 - p)
    return (terms * Tensor(g)).sum() * (-1.0 / float(known))


def total_loss(l_mc: Tensor, l_gc: Tensor, l_ac: Tensor, alpha: float, beta: float) -> Tensor:
    """Weighted objective: main BCE + alpha * graph constraint + beta * token BCE."""
    if alpha < 0 or beta < 0:
        raise ValueError("penalty coefficients must be non-negative")
    return l_mc + alpha * l_gc + beta * l_ac


@dataclass
class LossContext:
    """Label-derived constants for a training set, sliceable per batch.

    T and U depend only on labels and label masks, so they are computed once
    over the training rows and submatrices are cut out per step.
    """

    label_sim: np.ndarray
    pair_valid: np.ndarray
    alpha: float
    beta: float

    @classmethod
    def build(cls, labels, label_mask, alpha: float, beta: float) -> "LossContext":
        t, u = label_similarity(labels, label_mask)
        return cls(label_sim=t, pair_valid=u, alpha=alpha, beta=beta)

    def batch(self, indices):
        idx = np.asarray(indices)
        grid = np.ix_(idx, idx)
        return self.label_sim[grid], self.pair_valid[grid]
