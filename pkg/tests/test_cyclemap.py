import numpy as np
import pytest

from reidadapt import cyclemap as cm
from reidadapt import diffcore as dc
from reidadapt import synthgen as sg
from reidadapt.gradcheck import check_grad


def tiny_pair(seed=0):
    return (cm.Generator((4, 4), n_res=1, seed=seed), cm.Generator((4, 4), n_res=1, seed=seed + 1))


def loop_l1_mean(a, b):
    total, count = 0.0, 0
    for x, y in zip(a.ravel(), b.ravel()):
        total += abs(x - y)
        count += 1
    return total / count


# losses -------------------------------------------------------------------------
def test_cycle_loss_identity_is_zero(rng):
    ident = lambda x: x
    xs, xt = rng.uniform(size=(2, 3, 64, 32)), rng.uniform(size=(2, 3, 64, 32))
    assert cm.cycle_loss(ident, ident, dc.Tensor(xs), dc.Tensor(xt)).item() == 0.0


def test_cycle_loss_constant_offset(rng):
    xs = dc.Tensor(rng.uniform(size=(1, 3, 64, 32)))
    term = cm.l1_mean(xs + 0.1, xs).item()
    assert term == pytest.approx(0.1, abs=1e-12)
    total = cm.cycle_loss(lambda x: x, lambda x: x + 0.1, xs, xs).item()
    assert total == pytest.approx(0.2, abs=1e-12)


def test_cycle_loss_matches_loop_oracle(rng):
    G, F = tiny_pair()
    xs, xt = rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8))
    with dc.no_grad():
        fwd = F(G(dc.Tensor(xs))).data
        bwd = G(F(dc.Tensor(xt))).data
        got = cm.cycle_loss(G, F, dc.Tensor(xs), dc.Tensor(xt)).item()
    assert got == pytest.approx(loop_l1_mean(fwd, xs) + loop_l1_mean(bwd, xt), abs=1e-10)


def test_cycle_loss_errors(rng):
    with pytest.raises(dc.ShapeError):
        cm.l1_mean(dc.Tensor(np.zeros((1, 3, 4, 4))), dc.Tensor(np.zeros((1, 3, 4, 2))))
    with pytest.raises(ValueError):
        cm.cycle_loss(lambda x: x, lambda x: x, dc.Tensor(np.zeros((0, 3, 4, 4))),
                      dc.Tensor(np.zeros((1, 3, 4, 4))))


def test_gan_loss_examples():
    ones, zeros, half = (dc.Tensor(np.full((2, 1, 4, 4), v)) for v in (1.0, 0.0, 0.5))
    d, _ = cm.gan_losses(ones, zeros)
    assert d.item() == 0.0
    d, g = cm.gan_losses(half, half)
    assert d.item() == pytest.approx(0.25) and g.item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        cm.gan_losses(half, half, "wasserstein")


def test_bce_objective_perfect_discriminator_is_small():
    real, fake = dc.Tensor(np.full(4, 20.0)), dc.Tensor(np.full(4, -20.0))
    d, g = cm.gan_losses(real, fake, "bce")
    assert d.item() < 1e-8 and g.item() == pytest.approx(20.0, abs=1e-6)


def test_breakdown_recomposes():
    b = cm.cycle_objective(0.3, 0.4, 0.05, 10.0)
    assert b.total == b.gan_s_to_t + b.gan_t_to_s + b.lam * b.cycle


# gradients ---------------------------------------------------------------------
@pytest.mark.parametrize("objective", ["lsgan", "bce"])
def test_gan_loss_gradients(objective, rng):
    for _ in range(10):
        r, f = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 3, 3))
        assert check_grad(lambda a, b: cm.gan_losses(a, b, objective)[0], [r, f]).passed
        assert check_grad(lambda a, b: cm.gan_losses(a, b, objective)[1], [r, f]).passed


def test_cycle_and_adversarial_gradients_through_networks(rng):
    G, F = tiny_pair(3)
    D = cm.Discriminator((4, 4), seed=5)
    xs, xt = rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8))
    assert check_grad(lambda a, b: cm.cycle_loss(G, F, a, b), [xs, xt]).passed
    assert check_grad(lambda a: cm.gan_losses(D(a), D(G(a)))[1], [xs]).passed


def test_generator_parameter_gradients(rng):
    G, F = tiny_pair(4)
    xs = dc.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    xt = dc.Tensor(rng.uniform(size=(1, 3, 8, 8)))
    for name in ("down1.w", "out.w", "color.w"):
        base = G.params[name].data.copy()

        def fn(w, name=name):
            G.params[name] = w
            return cm.cycle_loss(G, F, xs, xt)

        assert check_grad(fn, [base]).passed, name
        G.params[name] = dc.parameter(base, name)


# networks ----------------------------------------------------------------------
def test_generator_shapes_and_range(rng):
    G = cm.Generator(seed=0)
    D = cm.Discriminator(seed=0)
    x = dc.Tensor(rng.uniform(size=(2, 3, 64, 32)))
    y = G(x).data
    assert y.shape == x.shape and y.min() >= 0.0 and y.max() <= 1.0
    assert D(x).shape == (2, 1, 16, 8)


def test_generator_starts_near_identity(rng):
    x = rng.uniform(size=(2, 3, 64, 32))
    with dc.no_grad():
        y = cm.Generator(seed=1)(dc.Tensor(x)).data
    # tanh of the centred input, plus a small residual
    np.testing.assert_allclose(y, (np.tanh(2 * x - 1) + 1) / 2, atol=0.15)
    assert np.corrcoef(y.ravel(), x.ravel())[0, 1] > 0.95


def test_g_step_against_frozen_d_lowers_g_loss(rng):
    G = cm.Generator((4, 8), n_res=1, seed=2)
    D = cm.Discriminator((4, 8), seed=3)
    x = dc.Tensor(rng.uniform(size=(4, 3, 16, 16)))
    opt = dc.Adam(G.parameters(), 1e-3)
    _, g0 = cm.gan_losses(D(x), D(G(x)))
    dc.backward(g0)
    opt.step()
    with dc.no_grad():
        _, g1 = cm.gan_losses(D(x), D(G(x)))
    assert g1.item() < g0.item()


# training ----------------------------------------------------------------------
def tiny_domains():
    src = sg.generate_domain(sg.default_source_spec(num_identities=4), seed=0)
    tgt = sg.generate_domain(sg.default_target_spec(num_identities=4), seed=1)
    return src, tgt


def test_training_is_reproducible_and_label_free():
    src, tgt = tiny_domains()
    cfg = cm.CycleConfig(steps=3, batch_size=2, log_every=0)
    a = cm.train_cyclegan(sg.stack_pixels(src), sg.stack_pixels(tgt), cfg, seed=4)
    b = cm.train_cyclegan(sg.stack_pixels(src), sg.stack_pixels(tgt), cfg, seed=4)
    assert a.trace == b.trace and len(a.trace) == 3
    assert sg.LABEL_AUDIT == {}


def test_lambda_zero_drops_cycle_term():
    src, tgt = tiny_domains()
    cfg = cm.CycleConfig(steps=2, batch_size=2, lam=0.0, log_every=0)
    model = cm.train_cyclegan(sg.stack_pixels(src), sg.stack_pixels(tgt), cfg, seed=0)
    for row in model.trace:
        assert row["cycle"] > 0
        assert row["total"] == row["gan_s_to_t"] + row["gan_t_to_s"]


def test_lr_factor_schedule():
    assert [cm.lr_factor(s, 10, 0.5) for s in (0, 4, 5, 7, 9)] == pytest.approx([1, 1, 1, 0.6, 0.2])
    assert all(cm.lr_factor(s, 10, 1.0) == 1.0 for s in range(10))
    f = [cm.lr_factor(s, 100, 0.3) for s in range(100)]
    assert all(b <= a for a, b in zip(f, f[1:])) and 0.0 < f[-1] < 0.02


def test_empty_domain_rejected():
    with pytest.raises(ValueError):
        cm.train_cyclegan(np.zeros((0, 64, 32, 3)), np.zeros((2, 64, 32, 3)), cm.CycleConfig(), 0)


def test_divergence_is_reported(monkeypatch):
    src, tgt = tiny_domains()
    model = cm.build_cyclegan(cm.CycleConfig(), 0)
    model.D_t.params["c3.b"].data[:] = np.nan
    with pytest.raises(cm.TrainingDiverged, match="step 0"):
        cm.train_cyclegan(sg.stack_pixels(src), sg.stack_pixels(tgt),
                          cm.CycleConfig(steps=1, batch_size=2, log_every=0), 0, model=model)


def test_short_training_moves_histograms_toward_target():
    src, tgt = tiny_domains()
    cfg = cm.CycleConfig(steps=60, batch_size=4, log_every=0)
    model = cm.train_cyclegan(sg.stack_pixels(src), sg.stack_pixels(tgt), cfg, seed=0)
    da = cm.translate_dataset(model.G, src)
    assert sg.histogram_distance(da, tgt) < sg.histogram_distance(src, tgt)


# translation -------------------------------------------------------------------
def test_identity_translation_and_records():
    src, _ = tiny_domains()
    da = cm.translate_dataset(lambda x: x, src)
    assert len(da) == len(src)
    for a, b in zip(src, da):
        assert np.array_equal(a.pixels, b.pixels)
        assert (a.person_id, a.camera_id, a.sample_id) == (b.person_id, b.camera_id, b.sample_id)
        assert b.domain == "adapted" and not b.hidden


def test_cyclegan_checkpoint_round_trip(tmp_path, rng):
    cfg = cm.CycleConfig(gen_channels=(4, 8), disc_channels=(4, 4), n_res=1)
    model = cm.build_cyclegan(cfg, 7)
    cm.save_cyclegan(model, tmp_path / "g.ck", cfg, steps=0)
    back = cm.load_cyclegan(tmp_path / "g.ck")
    x = dc.Tensor(rng.uniform(size=(1, 3, 64, 32)))
    with dc.no_grad():
        assert np.array_equal(model.G(x).data, back.G(x).data)
        assert np.array_equal(model.D_s(x).data, back.D_s(x).data)
