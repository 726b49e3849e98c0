import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from reidadapt import diffcore as dc
from reidadapt import metriclearn as ml
from reidadapt.alignednet import Embeddings
from reidadapt.gradcheck import check_grad


# oracles ------------------------------------------------------------------
def loop_euclidean(u, v):
    total = 0.0
    for a, b in zip(u, v):
        total += (a - b) * (a - b)
    return total ** 0.5


def exhaustive_batch_hard(dist, labels):
    """Scan every (anchor, positive, negative) triple; first index wins ties."""
    n = len(labels)
    pos, neg = [], []
    for a in range(n):
        best_p, best_n = None, None
        for p in range(n):
            for q in range(n):
                if p == a or labels[p] != labels[a] or labels[q] == labels[a]:
                    continue
                if best_p is None or dist[a][p] > dist[a][best_p]:
                    best_p = p
                if best_n is None or dist[a][q] < dist[a][best_n]:
                    best_n = q
        pos.append(best_p)
        neg.append(best_n)
    return np.array(pos), np.array(neg)


def monotone_paths(h):
    """Every right/down cell sequence from (0, 0) to (h-1, h-1)."""
    for downs in itertools.combinations(range(2 * h - 2), h - 1):
        i = j = 0
        cells = [(0, 0)]
        for step in range(2 * h - 2):
            if step in downs:
                i += 1
            else:
                j += 1
            cells.append((i, j))
        yield cells


def brute_shortest_path(cost):
    return min(sum(cost[i][j] for i, j in path) for path in monotone_paths(len(cost)))


def random_labels(rng, ids=4, inst=4):
    k = int(rng.integers(2, ids + 1))
    labels = np.repeat(np.arange(k), int(rng.integers(2, inst + 1)))
    return rng.permutation(labels)


# euclidean / triplet ----------------------------------------------------------
def test_euclidean_examples(rng):
    assert ml.euclidean_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert ml.euclidean_distance([0.0, 0.0], [3.0, 4.0]) == 5.0
    u, v = rng.normal(size=64), rng.normal(size=64)
    assert ml.euclidean_distance(u, v) == pytest.approx(loop_euclidean(u, v), abs=1e-12)


def test_euclidean_length_mismatch():
    with pytest.raises(dc.ShapeError):
        ml.euclidean_distance([1.0, 2.0], [1.0])


def test_triplet_fig2_value():
    # D(a,p) = 0.361 and D(a,n) = 0.490 realised on a line
    loss = ml.triplet_loss([0.0], [0.361], [0.490], m=0.3)
    assert loss == pytest.approx(0.171, abs=1e-12)


def test_triplet_degenerate_cases(rng):
    a, p = rng.normal(size=5), rng.normal(size=5)
    assert ml.triplet_loss(a, p, p, 0.3) == pytest.approx(0.3)
    assert ml.triplet_loss([0.0], [0.1], [1.0], 0.3) == 0.0


def test_pairwise_euclidean_matches_loops(rng):
    x, y = rng.normal(size=(5, 7)), rng.normal(size=(4, 7))
    ref = np.array([[loop_euclidean(a, b) for b in y] for a in x])
    np.testing.assert_allclose(ml.pairwise_euclidean(x, y), ref, atol=1e-10)


# batch hard -------------------------------------------------------------------
def fig2_matrix():
    """Anchor 0 with positives 1-3 and negatives 4-7 laid out as in the figure."""
    labels = np.array([0, 0, 0, 0, 1, 1, 2, 2])
    d = np.full((8, 8), 0.7)
    np.fill_diagonal(d, 0.0)
    row = [0.0, 0.2, 0.361, 0.15, 0.62, 0.55, 0.490, 0.81]
    d[0, :] = d[:, 0] = row
    return d, labels


def test_fig2_selection_and_loss():
    d, labels = fig2_matrix()
    losses, sel = ml.batch_hard_from_distances(d, labels, m=0.3)
    assert tuple(sel[0]) == (2, 6)          # p2 and n3 in the figure's numbering
    assert losses[0] == pytest.approx(0.171, abs=1e-12)


def test_batch_hard_matches_exhaustive_oracle(rng):
    for _ in range(100):
        labels = random_labels(rng)
        x = rng.normal(size=(len(labels), 3))
        d = ml.pairwise_euclidean(x)
        pos, neg = ml.batch_hard_select(d, labels)
        ref_p, ref_n = exhaustive_batch_hard(d, labels)
        np.testing.assert_array_equal(pos, ref_p)
        np.testing.assert_array_equal(neg, ref_n)


def test_batch_hard_ties_go_to_lowest_index():
    labels = np.array([0, 0, 0, 1, 1])
    d = np.ones((5, 5)) - np.eye(5)
    pos, neg = ml.batch_hard_select(d, labels)
    assert pos[0] == 1 and neg[0] == 3 and pos[2] == 0


def test_identical_embeddings_give_margin():
    feats = dc.parameter(np.ones((6, 4)))
    loss, _ = ml.batch_hard_loss(feats, [0, 0, 1, 1, 2, 2], m=0.3)
    assert loss.item() == pytest.approx(0.3)
    losses, _ = ml.batch_hard_from_distances(np.zeros((6, 6)), [0, 0, 1, 1, 2, 2], 0.3)
    np.testing.assert_allclose(losses, 0.3)


def test_batch_validation_errors():
    with pytest.raises(ml.BatchError, match="anchor 2"):
        ml.batch_hard_select(np.zeros((3, 3)), [0, 0, 1])
    with pytest.raises(ml.BatchError, match="anchor 0"):
        ml.batch_hard_select(np.zeros((2, 2)), [0, 0])
    with pytest.raises(ml.BatchError):
        ml.validate_labels(np.array([0, 0, 1]))


@given(st.integers(0, 2 ** 32 - 1))
def test_hinge_below_margin_iff_separated(seed):
    rng = np.random.default_rng(seed)
    labels = random_labels(rng)
    d = ml.pairwise_euclidean(rng.normal(size=(len(labels), 2)))
    losses, sel = ml.batch_hard_from_distances(d, labels, 0.3)
    rows = np.arange(len(labels))
    separated = d[rows, sel[:, 0]] < d[rows, sel[:, 1]]
    np.testing.assert_array_equal(losses < 0.3, separated)


def test_batch_hard_loss_tensor_equals_numeric(rng):
    labels = np.array([0, 0, 1, 1, 2, 2, 2])
    x = rng.normal(size=(7, 5))
    loss, sel = ml.batch_hard_loss(dc.Tensor(x), labels, 0.3)
    ref, ref_sel = ml.batch_hard_from_distances(ml.pairwise_euclidean(x), labels, 0.3)
    assert loss.item() == pytest.approx(ref.mean(), abs=1e-12)
    np.testing.assert_array_equal(sel, ref_sel)


# DMLI -------------------------------------------------------------------------
def test_shortest_path_hand_example():
    assert ml.shortest_path(np.array([[1.0, 5.0], [2.0, 1.0]])) == 4.0


def test_shortest_path_matches_enumeration(rng):
    for _ in range(200):
        h = int(rng.integers(1, 7))
        cost = rng.uniform(0, 1, (h, h))
        assert ml.shortest_path(cost) == brute_shortest_path(cost)


def test_shortest_path_mask_is_monotone_path(rng):
    cost = rng.uniform(0, 1, (6, 6))
    total, mask = ml.shortest_path(cost, return_path=True)
    cells = [tuple(c) for c in np.argwhere(mask)]
    assert cells in [p for p in monotone_paths(6)]
    assert (cost * mask).sum() == pytest.approx(total)


def test_shortest_path_batched(rng):
    cost = rng.uniform(0, 1, (3, 2, 4, 4))
    out = ml.shortest_path(cost)
    for idx in np.ndindex(3, 2):
        assert out[idx] == ml.shortest_path(cost[idx])


def test_squash_is_the_stated_ratio():
    d = np.linspace(0, 5, 11)
    np.testing.assert_allclose(ml.squash(d), (np.exp(d) - 1) / (np.exp(d) + 1), atol=1e-15)


def unit_rows(rng, h, c):
    s = rng.normal(size=(h, c))
    return s / np.linalg.norm(s, axis=1, keepdims=True)


def test_dmli_identical_and_symmetric(rng):
    a, b = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16)
    flat = np.tile(a[:1], (8, 1))
    assert ml.dmli_distance(flat, flat) == 0.0
    assert ml.dmli_distance(a, b) == pytest.approx(ml.dmli_distance(b, a), abs=1e-12)
    # a right/down path must leave the zero diagonal, so distinct rows cost
    # at most the staircase through the first off-diagonal
    d = ml.stripe_distance_matrix(a, a)
    assert np.all(np.diag(d) == 0.0)
    assert 0.0 < ml.dmli_distance(a, a) <= np.trace(d, offset=1) + 1e-12


def shifted(a):
    """Row k of the result is row k-1 of ``a``; the top row is repeated."""
    return np.vstack([a[:1], a[:-1]])


def test_dmli_shifted_rows_follow_off_diagonal(rng):
    for _ in range(50):
        a = unit_rows(rng, 4, 8)
        b = shifted(a)
        cost = ml.stripe_distance_matrix(a, b)
        aligned, mask = ml.shortest_path(cost, return_path=True)
        assert aligned == pytest.approx(brute_shortest_path(cost), abs=1e-12)
        # never worse than comparing row i with row i
        assert aligned <= np.trace(cost) + 1e-12
        # the zero cells of the shifted alignment are all on the chosen path
        assert all(mask[i, i + 1] == 1 for i in range(3))


def test_dmli_cyclic_shift_not_above_diagonal(rng):
    for _ in range(50):
        a = unit_rows(rng, 6, 8)
        c = np.roll(a, 1, axis=0)
        assert ml.dmli_distance(a, c) <= np.trace(ml.stripe_distance_matrix(a, c)) + 1e-12


def test_pairwise_dmli_matches_single_pairs(rng):
    sa = np.stack([unit_rows(rng, 4, 6) for _ in range(3)])
    sb = np.stack([unit_rows(rng, 4, 6) for _ in range(2)])
    mat = ml.pairwise_dmli(sa, sb)
    for i, j in np.ndindex(3, 2):
        assert mat[i, j] == pytest.approx(ml.dmli_distance(sa[i], sb[j]), abs=1e-12)


def test_dmli_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        ml.dmli_distance(np.ones((4, 3)), np.ones((5, 3)))


# gradients ------------------------------------------------------------------
def test_path_cost_gradient_is_path_indicator(rng):
    cost = rng.uniform(0, 1, (2, 5, 5))
    t = dc.parameter(cost)
    dc.backward(dc.tsum(ml.path_cost(t)))
    _, mask = ml.shortest_path(cost, return_path=True)
    np.testing.assert_array_equal(t.grad, mask)
    assert check_grad(lambda c: dc.tsum(ml.path_cost(c) * dc.Tensor([1.0, 2.0])), [cost]).passed


def test_dmli_rows_gradient(rng):
    sa, sb = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    assert check_grad(lambda a, b: dc.tsum(ml.dmli_rows(a, b)), [sa, sb]).passed


def test_triplet_hinge_gradient(rng):
    for _ in range(10):
        a, p, n = rng.uniform(-2, 2, (3, 4))
        if abs(0.3 + np.linalg.norm(a - p) - np.linalg.norm(a - n)) < 1e-3:
            continue

        def f(a_, p_, n_):
            d_ap = ml.euclidean_rows(a_[None], p_[None])
            d_an = ml.euclidean_rows(a_[None], n_[None])
            return dc.tsum(dc.relu(d_ap - d_an + 0.3))

        assert check_grad(f, [a, p, n]).passed


@pytest.mark.parametrize("distance", ["global", "dmli"])
def test_batch_hard_gradient(distance, rng):
    labels = np.array([0, 0, 1, 1, 2, 2])
    shape = (6, 5) if distance == "global" else (6, 3, 4)
    x = rng.uniform(-2, 2, shape)
    res = check_grad(lambda t: ml.batch_hard_loss(t, labels, 0.3, distance)[0], [x])
    assert res.passed, res


# combined loss ----------------------------------------------------------------
def make_batch(rng, n_ids=3, k=2, c=6, h=4, classes=5):
    labels = np.repeat(np.arange(n_ids), k)
    g = dc.parameter(rng.normal(size=(len(labels), c)))
    s = rng.normal(size=(len(labels), h, c))
    s = dc.parameter(s / np.linalg.norm(s, axis=2, keepdims=True))
    logits = dc.parameter(rng.normal(size=(len(labels), classes)))
    return ml.TripletBatch(Embeddings(g, s, logits), labels, 0.3)


def test_combined_loss_recomposes(rng):
    batch = make_batch(rng)
    out = ml.combined_loss(batch)
    emb, y = batch.embeddings, batch.person_ids
    l_id = dc.softmax_cross_entropy(emb.logits, y).item()
    d_g = ml.pairwise_euclidean(emb.global_feat.data)
    d_l = ml.pairwise_dmli(emb.stripes.data)
    l_g = ml.batch_hard_from_distances(d_g, y, 0.3)[0].mean()
    l_l = ml.batch_hard_from_distances(d_l, y, 0.3)[0].mean()
    assert out.id_loss == pytest.approx(l_id, abs=1e-12)
    assert out.global_triplet == pytest.approx(l_g, abs=1e-12)
    assert out.local_triplet == pytest.approx(l_l, abs=1e-12)
    assert out.total == pytest.approx(l_id + l_g + l_l, abs=1e-12)


def test_recompose_examples():
    assert ml.recompose(0.0, 0.0, 0.0) == 0.0
    assert ml.recompose(0.69, 0.30, 0.25) == pytest.approx(1.24)


def test_combined_loss_grads_reach_all_branches(rng):
    batch = make_batch(rng)
    out = ml.combined_loss(batch)
    dc.backward(out.tensor)
    emb = batch.embeddings
    for t in (emb.global_feat, emb.stripes, emb.logits):
        assert t.grad is not None and np.abs(t.grad).sum() > 0


def test_combined_loss_needs_logits(rng):
    batch = make_batch(rng)
    batch.embeddings.logits = None
    with pytest.raises(ml.BatchError, match="logits"):
        ml.combined_loss(batch)


def test_triplet_batch_validates():
    emb = Embeddings(dc.Tensor(np.zeros((3, 2))), dc.Tensor(np.zeros((3, 2, 2))))
    with pytest.raises(ml.BatchError):
        ml.TripletBatch(emb, [0, 0, 1])


@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-3, 3)))
def test_batch_hard_loss_bounds(x):
    loss, _ = ml.batch_hard_loss(dc.Tensor(x), [0, 0, 1, 1, 2, 2], 0.3)
    d = ml.pairwise_euclidean(x)
    assert 0.0 <= loss.item() <= 0.3 + d.max() + 1e-9
