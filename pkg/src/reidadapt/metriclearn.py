"""Distances and losses: Euclidean, triplet, batch-hard, DMLI local distance,
identity softmax and their sum.

Batch-hard mining happens on detached distance matrices; only the selected
(anchor, positive) and (anchor, negative) pairs are recomputed on the tape, so
the loss gradient is the gradient of the mined triplets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .alignednet import Embeddings
from .diffcore import Tensor

DEFAULT_MARGIN = 0.3


class BatchError(ValueError):
    pass


# plain numeric versions --------------------------------------------------
def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise dc.ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def euclidean_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    _check_same(u, v, "euclidean_distance")
    return float(np.sqrt(np.sum((u - v) ** 2)))


def triplet_loss(f_a, f_p, f_n, m: float = DEFAULT_MARGIN) -> float:
    return max(0.0, m + euclidean_distance(f_a, f_p) - euclidean_distance(f_a, f_n))


def pairwise_euclidean(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    y = x if y is None else y
    if x.shape[1:] != y.shape[1:]:
        raise dc.ShapeError(f"pairwise_euclidean: {x.shape} vs {y.shape}")
    xx = (x * x).sum(1)[:, None]
    yy = (y * y).sum(1)[None, :]
    d2 = np.maximum(xx + yy - 2.0 * x @ y.T, 0.0)
    return np.sqrt(d2)


def squash(d):
    """(e^d - 1) / (e^d + 1), written as tanh(d/2) for stability."""
    return np.tanh(np.asarray(d) / 2.0)


def stripe_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """H x H matrix of squashed Euclidean distances between stripe rows."""
    _check_same(a, b, "stripe_distance_matrix")
    diff = a[:, None, :] - b[None, :, :]
    return squash(np.sqrt((diff * diff).sum(-1)))


def shortest_path(cost: np.ndarray, return_path: bool = False):
    """Minimal right/down path sum from the top-left to the bottom-right cell.

    ``cost`` may carry leading batch axes; the last two must be square.
    With ``return_path`` also returns a 0/1 mask of the chosen cells (ties
    prefer the step coming from above).
    """
    cost = np.asarray(cost, dtype=float)
    h, w = cost.shape[-2:]
    if h != w:
        raise dc.ShapeError(f"shortest_path: matrix must be square, got {cost.shape[-2:]}")
    acc = np.empty_like(cost)
    acc[..., 0, 0] = cost[..., 0, 0]
    for j in range(1, w):
        acc[..., 0, j] = acc[..., 0, j - 1] + cost[..., 0, j]
    for i in range(1, h):
        acc[..., i, 0] = acc[..., i - 1, 0] + cost[..., i, 0]
        for j in range(1, w):
            acc[..., i, j] = np.minimum(acc[..., i - 1, j], acc[..., i, j - 1]) + cost[..., i, j]
    total = acc[..., h - 1, w - 1]
    if not return_path:
        return total
    batch = cost.shape[:-2]
    flat = acc.reshape(-1, h, w)
    mask = np.zeros_like(flat)
    rows = np.arange(flat.shape[0])
    i = np.full(flat.shape[0], h - 1)
    j = np.full(flat.shape[0], w - 1)
    mask[rows, i, j] = 1.0
    for _ in range(h + w - 2):
        up = np.where(i > 0, flat[rows, np.maximum(i - 1, 0), j], np.inf)
        left = np.where(j > 0, flat[rows, i, np.maximum(j - 1, 0)], np.inf)
        go_up = up <= left
        i = np.where(go_up, i - 1, i)
        j = np.where(go_up, j, j - 1)
        mask[rows, i, j] = 1.0
    return total, mask.reshape(batch + (h, w))


def dmli_distance(stripes_a, stripes_b) -> float:
    a, b = np.asarray(stripes_a, dtype=float), np.asarray(stripes_b, dtype=float)
    _check_same(a, b, "dmli_distance")
    return float(shortest_path(stripe_distance_matrix(a, b)))


def pairwise_dmli(sa: np.ndarray, sb: np.ndarray | None = None) -> np.ndarray:
    """(Na, Nb) matrix of DMLI distances between two stacks of (H, C) stripes."""
    sb = sa if sb is None else sb
    if sa.shape[1:] != sb.shape[1:]:
        raise dc.ShapeError(f"pairwise_dmli: {sa.shape} vs {sb.shape}")
    na, h, c = sa.shape
    nb = sb.shape[0]
    d = pairwise_euclidean(sa.reshape(-1, c), sb.reshape(-1, c))
    d = squash(d).reshape(na, h, nb, h).transpose(0, 2, 1, 3)
    return shortest_path(d)


# differentiable versions -------------------------------------------------
def euclidean_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance between two (P, C) tensors."""
    if a.shape != b.shape:
        raise dc.ShapeError(f"euclidean_rows: shape mismatch {a.shape} vs {b.shape}")
    return dc.sqrt(dc.tsum(dc.square(a - b), axis=-1))


def path_cost(cost: Tensor) -> Tensor:
    """Shortest monotone path sum of (..., H, H) cost tensors.

    The gradient w.r.t. ``cost`` is the 0/1 indicator of the selected path.
    """
    total, mask = shortest_path(cost.data, return_path=True)
    return dc.make_op("path_cost", np.asarray(total), (cost,),
                      lambda g: (np.asarray(g)[..., None, None] * mask,))


def dmli_rows(sa: Tensor, sb: Tensor) -> Tensor:
    """DMLI distance between paired (P, H, C) stripe tensors, shape (P,)."""
    if sa.shape != sb.shape:
        raise dc.ShapeError(f"dmli_rows: shape mismatch {sa.shape} vs {sb.shape}")
    p, h, c = sa.shape
    diff = dc.reshape(sa, (p, h, 1, c)) - dc.reshape(sb, (p, 1, h, c))
    d = dc.sqrt(dc.tsum(dc.square(diff), axis=3))
    return path_cost(dc.tanh(d * 0.5))


# batch hard ---------------------------------------------------------------
@dataclass
class TripletBatch:
    embeddings: Embeddings
    person_ids: np.ndarray
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        validate_labels(self.person_ids)
        if len(self.person_ids) != len(self.embeddings):
            raise BatchError(f"{len(self.person_ids)} labels for {len(self.embeddings)} embeddings")


def validate_labels(labels: np.ndarray) -> None:
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise BatchError("batch needs at least two identities (no negative for any anchor)")
    lonely = ids[counts < 2]
    if len(lonely):
        raise BatchError(f"identities without a positive partner: {lonely.tolist()}")


def batch_hard_select(dist: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: farthest same-identity index and nearest other-identity index.

    Ties resolve to the lowest index.
    """
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    for a in range(n):
        if not pos_mask[a].any():
            raise BatchError(f"anchor {a} (identity {labels[a]}) has no positive")
        if same[a].all():
            raise BatchError(f"anchor {a} (identity {labels[a]}) has no negative")
    hardest_pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hardest_neg = np.where(same, np.inf, dist).argmin(axis=1)
    return hardest_pos, hardest_neg


def batch_hard_from_distances(dist: np.ndarray, labels, m: float = DEFAULT_MARGIN):
    """Per-anchor hinge losses and selections from a precomputed distance matrix."""
    pos, neg = batch_hard_select(dist, labels)
    rows = np.arange(len(pos))
    losses = np.maximum(0.0, m + dist[rows, pos] - dist[rows, neg])
    return losses, np.stack([pos, neg], axis=1)


def batch_hard_loss(features: Tensor, labels, m: float = DEFAULT_MARGIN,
                    distance: str = "global") -> tuple[Tensor, np.ndarray]:
    """Batch-hard triplet loss averaged over anchors.

    ``features`` is (N, C) for ``distance="global"`` or (N, H, C) stripes for
    ``distance="dmli"``.  Returns the loss tensor and an (N, 2) array of
    (hardest positive, hardest negative) indices.
    """
    labels = np.asarray(labels)
    if distance == "global":
        dist = pairwise_euclidean(features.data)
        pair = euclidean_rows
    elif distance == "dmli":
        dist = pairwise_dmli(features.data)
        pair = dmli_rows
    else:
        raise ValueError(f"unknown distance {distance!r}")
    pos, neg = batch_hard_select(dist, labels)
    anchors = np.arange(len(labels))
    idx_a = np.concatenate([anchors, anchors])
    idx_b = np.concatenate([pos, neg])
    d = pair(features[idx_a], features[idx_b])
    n = len(labels)
    hinge = dc.relu(m + d[:n] - d[n:])
    return dc.mean(hinge), np.stack([pos, neg], axis=1)


@dataclass
class LossBreakdown:
    id_loss: float
    global_triplet: float
    local_triplet: float
    total: float
    tensor: Tensor | None = None


def combined_loss(batch: TripletBatch, use_id: bool = True, use_local: bool = True) -> LossBreakdown:
    """Identity softmax + global batch-hard + local (DMLI) batch-hard."""
    emb, labels, m = batch.embeddings, batch.person_ids, batch.margin
    terms = []
    if use_id:
        if emb.logits is None:
            raise BatchError("combined_loss needs identity logits")
        l_id = dc.softmax_cross_entropy(emb.logits, labels)
        terms.append(l_id)
    l_g, _ = batch_hard_loss(emb.global_feat, labels, m, "global")
    terms.append(l_g)
    if use_local:
        l_l, _ = batch_hard_loss(emb.stripes, labels, m, "dmli")
        terms.append(l_l)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossBreakdown(
        id_loss=l_id.item() if use_id else 0.0,
        global_triplet=l_g.item(),
        local_triplet=l_l.item() if use_local else 0.0,
        total=total.item(), tensor=total)


def recompose(id_loss: float, global_triplet: float, local_triplet: float) -> float:
    return id_loss + global_triplet + local_triplet
