import numpy as np
import pytest

from reidadapt import alignednet as an
from reidadapt import diffcore as dc
from reidadapt import metriclearn as ml


def images(rng, n=4):
    return rng.uniform(0, 1, (n, 64, 32, 3))


def test_shape_contract(rng):
    net = an.AlignedNet(an.NetConfig(num_classes=5), seed=0)
    emb = net(images(rng))
    assert emb.global_feat.shape == (4, 64)
    assert emb.stripes.shape == (4, 8, 64)
    assert emb.logits.shape == (4, 5)
    assert np.all(np.isfinite(emb.stripes.data))
    assert net.config.stripe_count == 8 and net.config.embed_dim == 64
    np.testing.assert_allclose(np.linalg.norm(emb.stripes.data, axis=2), 1.0, atol=1e-6)


def test_single_image_and_shape_error(rng):
    net = an.AlignedNet()
    assert net(images(rng, 1)[0]).global_feat.shape == (1, 64)
    with pytest.raises(dc.ShapeError):
        net(rng.uniform(size=(2, 32, 64, 3)))


def test_constant_zero_image_gives_equal_stripes():
    net = an.AlignedNet(seed=3)
    s = net(np.zeros((1, 64, 32, 3))).stripes.data[0]
    # zero padding makes the border rows differ; the interior is translation invariant
    np.testing.assert_allclose(s[1:-1], np.broadcast_to(s[1], s[1:-1].shape), atol=1e-12)


def test_row_index_map_pooling():
    fmap = np.broadcast_to(np.arange(8.0)[None, None, :, None], (1, 3, 8, 4)).copy()
    g, s = an.pool_branches(dc.Tensor(fmap), normalize=False)
    np.testing.assert_allclose(g.data, np.full((1, 3), 3.5))
    np.testing.assert_allclose(s.data[0], np.repeat(np.arange(8.0)[:, None], 3, axis=1))


def test_global_branch_permutation_invariant_and_stripe_locality(rng):
    fmap = rng.normal(size=(2, 5, 8, 4))
    g, s = an.pool_branches(dc.Tensor(fmap))
    flat = fmap.reshape(2, 5, 32)[:, :, rng.permutation(32)].reshape(2, 5, 8, 4)
    g2, _ = an.pool_branches(dc.Tensor(flat))
    np.testing.assert_allclose(g.data, g2.data, atol=1e-12)
    bumped = fmap.copy()
    bumped[:, :, 3] += 5.0
    _, s2 = an.pool_branches(dc.Tensor(bumped))
    changed = np.any(np.abs(s2.data - s.data) > 1e-12, axis=(0, 2))
    assert changed.tolist() == [i == 3 for i in range(8)]


def test_all_loss_terms_reach_backbone(rng):
    net = an.AlignedNet(an.NetConfig(num_classes=3), seed=1)
    x = images(rng, 6)
    labels = np.array([0, 0, 1, 1, 2, 2])
    terms = {
        "id": lambda e: dc.softmax_cross_entropy(e.logits, labels),
        "global": lambda e: ml.batch_hard_loss(e.global_feat, labels, 0.3, "global")[0],
        "local": lambda e: ml.batch_hard_loss(e.stripes, labels, 0.3, "dmli")[0],
    }
    for name, term in terms.items():
        for p in net.parameters():
            p.grad = None
        dc.backward(term(net(x)))
        assert np.abs(net.params["conv0.w"].grad).sum() > 0, name


def test_checkpoint_round_trip(tmp_path, rng):
    net = an.AlignedNet(an.NetConfig(num_classes=4), seed=2)
    path = tmp_path / "m.ck"
    an.save_checkpoint(net, path, epoch=3, seed=2)
    back = an.load_checkpoint(path)
    x = images(rng, 10)
    a, b = net(x), back(x)
    assert np.max(np.abs(a.global_feat.data - b.global_feat.data)) == 0.0
    assert np.max(np.abs(a.stripes.data - b.stripes.data)) == 0.0
    assert np.max(np.abs(a.logits.data - b.logits.data)) == 0.0
    assert back.metadata == {"epoch": 3, "seed": 2}
    assert back.state_hash() == net.state_hash()


def test_checkpoint_corruption(tmp_path):
    net = an.AlignedNet(seed=0)
    path = tmp_path / "m.ck"
    an.save_checkpoint(net, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(an.CheckpointError):
        an.load_checkpoint(path)
    path.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(an.CheckpointError, match="version"):
        an.load_checkpoint(path)
    path.write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(an.CheckpointError):
        an.load_checkpoint(path)


def test_different_seeds_differ():
    assert an.AlignedNet(seed=0).state_hash() != an.AlignedNet(seed=1).state_hash()
    assert an.AlignedNet(seed=5).state_hash() == an.AlignedNet(seed=5).state_hash()


def test_reset_classifier_changes_head_only():
    net = an.AlignedNet(an.NetConfig(num_classes=4), seed=0)
    conv = net.params["conv0.w"].data.copy()
    net.reset_classifier(7, seed=1)
    assert net.params["classifier.w"].shape == (64, 7)
    assert np.array_equal(net.params["conv0.w"].data, conv)
    assert len(net.parameters(with_head=False)) == len(net.parameters()) - 2
