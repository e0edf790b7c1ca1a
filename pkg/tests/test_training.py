import math

import numpy as np
import pytest

from aeseg import tensor as T
from aeseg.errors import ConfigError, DimensionError, NumericalError
from aeseg.models import DenseLatent, ModelConfig, ModelKind, SpatialLatent, build_model, decode, \
    discriminate, encode, latent_code
from aeseg.tensor import Tensor, finite_diff_check
from aeseg.training import (
    Adam, LossReport, LossWeights, TrainConfig, Trainer, adam_step, adv_loss, disc_loss, kl_loss,
    rec_loss, train,
)

TOY = ModelConfig(input_size=8, stages=2, base_width=2)


class TestRecLoss:
    def test_identical_is_zero(self):
        x = Tensor(np.random.default_rng(0).random((2, 1, 4, 4), dtype=np.float32))
        assert rec_loss(x, x).item() == 0.0

    def test_hand_sum(self):
        assert rec_loss(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2)))).item() == 4.0

    def test_mean_over_batch(self):
        x = np.zeros((2, 1, 2, 2))
        y = np.zeros((2, 1, 2, 2))
        y[0] = 1.0
        assert rec_loss(Tensor(x), Tensor(y)).item() == 2.0

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            assert rec_loss(Tensor(rng.normal(size=(3, 1, 4, 4))), Tensor(rng.normal(size=(3, 1, 4, 4)))).item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rec_loss(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


class TestKL:
    @pytest.mark.parametrize("mu,lv,expected", [
        (0.0, 0.0, 0.0),
        (1.0, 0.0, 0.5),
        (0.0, math.log(4.0), 0.5 * (4.0 - 1.0 - math.log(4.0))),
    ])
    def test_worked_values(self, mu, lv, expected):
        val = kl_loss(Tensor(np.array([[mu]])), Tensor(np.array([[lv]]))).item()
        assert val == pytest.approx(expected, abs=1e-6)

    def test_matches_closed_form(self):
        rng = np.random.default_rng(0)
        mu, lv = rng.normal(size=(4, 6)), rng.uniform(-3, 3, (4, 6))
        expected = 0.5 * (mu ** 2 + np.exp(lv) - 1 - lv).sum() / 4
        assert kl_loss(Tensor(mu), Tensor(lv)).item() == pytest.approx(expected, rel=1e-10)

    def test_grad_reaches_only_inputs(self):
        mu = Tensor(np.array([[0.5, -1.0]]), requires_grad=True)
        lv = Tensor(np.array([[0.2, -0.3]]), requires_grad=True)
        kl_loss(mu, lv).backward()
        np.testing.assert_allclose(mu.grad, mu.data)
        np.testing.assert_allclose(lv.grad, 0.5 * (np.exp(lv.data) - 1))


class TestAdversarialLosses:
    def test_adv_fooled(self):
        assert adv_loss(Tensor(np.ones(4))).item() == pytest.approx(0.0, abs=1e-6)

    def test_adv_half(self):
        assert adv_loss(Tensor(np.full(3, 0.5))).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_adv_inverse_e(self):
        assert adv_loss(Tensor(np.full(2, math.exp(-1)))).item() == pytest.approx(1.0, abs=1e-6)

    def test_disc_perfect(self):
        assert disc_loss(Tensor(np.ones(3)), Tensor(np.zeros(3))).item() == pytest.approx(0.0, abs=1e-5)

    def test_disc_half(self):
        assert disc_loss(Tensor(np.full(3, 0.5)), Tensor(np.full(3, 0.5))).item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_disc_swap_symmetry(self):
        rng = np.random.default_rng(0)
        r, f = rng.uniform(0.05, 0.95, 6), rng.uniform(0.05, 0.95, 6)
        a = disc_loss(Tensor(r), Tensor(f)).item()
        b = disc_loss(Tensor(1 - f), Tensor(1 - r)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_clamped_logs_finite(self):
        assert math.isfinite(disc_loss(Tensor(np.zeros(2)), Tensor(np.ones(2))).item())
        assert math.isfinite(adv_loss(Tensor(np.zeros(2))).item())


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        w = Tensor(np.array([0.3, -1.2], np.float32), requires_grad=True)
        before = w.data.tobytes()
        opt = Adam({"w": w}, 0.01)
        for _ in range(3):
            opt.step({"w": np.zeros(2, np.float32)})
        assert w.data.tobytes() == before

    @pytest.mark.parametrize("g", [1e-3, 1.0, 250.0])
    def test_first_step_magnitude_is_lr(self, g):
        w = Tensor(np.array([1.0]), requires_grad=True)
        adam_step({"w": w}, {"w": np.array([g])}, None, 0.01)
        assert 1.0 - w.data[0] == pytest.approx(0.01, rel=1e-4)

    def test_converges_on_quadratic(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = None
        for _ in range(500):
            state = adam_step({"w": w}, {"w": 2 * w.data}, state, 0.01)
        assert abs(w.data[0]) < 0.05


def _toy_loss(params, x, eps):
    """Full composite generator loss with fixed reparameterisation noise."""
    enc = encode(params, x)
    std = T.exp(T.mul(enc.logvar, 0.5))
    z = T.add(enc.mu, T.mul(std, eps))
    x_hat = decode(params, z)
    loss = T.add(rec_loss(x, x_hat), kl_loss(enc.mu, enc.logvar))
    return T.add(loss, adv_loss(discriminate(params, x_hat)))


def test_composite_loss_gradient_matches_finite_differences():
    params = build_model(ModelKind.AnoVAEGAN, SpatialLatent(2, 2, 2), TOY, seed=3)
    assert params.num_parameters() <= 5000
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 1, 8, 8)).astype(np.float32))
    eps = rng.standard_normal((2, 2, 2, 2)).astype(np.float32)
    worst = 0.0
    for name, t in params.tensors.items():
        if name.startswith("dis"):
            continue
        err = finite_diff_check(lambda _t: _toy_loss(params, x, eps), t, 1e-5)
        worst = max(worst, err)
    assert worst < 1e-2


def test_dense_vae_loss_gradient():
    params = build_model(ModelKind.dVAE, DenseLatent(3), TOY, seed=1)
    x = Tensor(np.random.default_rng(1).random((2, 1, 8, 8)).astype(np.float32))
    eps = np.random.default_rng(2).standard_normal((2, 3)).astype(np.float32)

    def f(_t):
        enc = encode(params, x)
        z = T.add(enc.mu, T.mul(T.exp(T.mul(enc.logvar, 0.5)), eps))
        return T.add(rec_loss(x, decode(params, z)), kl_loss(enc.mu, enc.logvar))

    for name in ("enc.mu.w", "enc.logvar.w", "dec.entry.w", "dec.out.w"):
        assert finite_diff_check(f, params.tensors[name], 1e-5) < 1e-2, name


def _batch(n=8, size=8, seed=0):
    return np.random.default_rng(seed).random((n, 1, size, size)).astype(np.float32)


@pytest.mark.parametrize("kind", [ModelKind.sVAE, ModelKind.AnoVAEGAN, ModelKind.dVAE])
def test_kl_only_step_leaves_decoder_bitwise_unchanged(kind):
    latent = DenseLatent(3) if kind.dense_bottleneck else SpatialLatent(2, 2, 2)
    params = build_model(kind, latent, TOY, seed=0)
    dec_before = {k: v.data.tobytes() for k, v in params.decoder.items()}
    enc_before = {k: v.data.tobytes() for k, v in params.encoder.items()}
    cfg = TrainConfig(epochs=1, seed=0, weights=LossWeights(lambda1=0.0, lambda2=1.0, lambda3=0.0))
    Trainer(params, cfg).step(_batch())
    assert all(params.decoder[k].data.tobytes() == v for k, v in dec_before.items())
    assert any(params.encoder[k].data.tobytes() != v for k, v in enc_before.items())


def test_adversarial_term_skips_encoder():
    params = build_model(ModelKind.sAE_GAN, SpatialLatent(2, 2, 2), TOY, seed=0)
    enc_before = {k: v.data.tobytes() for k, v in params.encoder.items()}
    cfg = TrainConfig(seed=0, weights=LossWeights(lambda1=0.0, lambda3=1.0))
    Trainer(params, cfg).step(_batch())
    assert all(params.encoder[k].data.tobytes() == v for k, v in enc_before.items())


def test_weights_zeroed_for_inactive_terms():
    w = LossWeights(2.0, 3.0, 4.0)
    assert w.for_kind(ModelKind.sAE) == LossWeights(2.0, 0.0, 0.0)
    assert w.for_kind(ModelKind.sVAE) == LossWeights(2.0, 3.0, 0.0)
    assert w.for_kind(ModelKind.AnoVAEGAN) == LossWeights(2.0, 3.0, 4.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_rec=0.0).validate()
    with pytest.raises(ConfigError):
        train(ModelKind.sAE, np.zeros((0, 1, 8, 8), np.float32), TrainConfig(epochs=1))


def test_non_finite_loss_aborts_with_step():
    params = build_model(ModelKind.sAE, SpatialLatent(2, 2, 2), TOY, seed=0)
    params.tensors["dec.out.w"].data[:] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        Trainer(params, TrainConfig(seed=0)).step(_batch())


def test_training_is_deterministic():
    data = _batch(24, seed=4)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=5)
    a, ra = train(ModelKind.AnoVAEGAN, data, cfg, SpatialLatent(2, 2, 2), TOY)
    b, rb = train(ModelKind.AnoVAEGAN, data, cfg, SpatialLatent(2, 2, 2), TOY)
    assert all(a.tensors[k].data.tobytes() == b.tensors[k].data.tobytes() for k in a.tensors)
    assert ra.steps == rb.steps


def _blobs(n, size=16, seed=0):
    """Smooth random images: each a sum of two Gaussian bumps."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = np.zeros((n, 1, size, size), np.float32)
    for i in range(n):
        for _ in range(2):
            cy, cx = rng.uniform(3, size - 3, 2)
            out[i, 0] += 0.5 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 8.0)
    return np.clip(out, 0, 1)


def test_sae_learning_progress():
    data = _blobs(100)
    cfg = TrainConfig(epochs=20, batch_size=8, seed=0)
    params, report = train(ModelKind.sAE, data, cfg, SpatialLatent(4, 4, 4),
                           ModelConfig(input_size=16, stages=2, base_width=4))
    means = report.epoch_means("l_rec")
    assert len(means) == 20
    assert means[-1] < means[0]


def test_dvae_prior_nondegenerate_and_anovaegan_finite():
    data = _blobs(32, seed=1)
    cfg = TrainConfig(epochs=3, seed=0)
    _, rep = train(ModelKind.dVAE, data, cfg, DenseLatent(4), ModelConfig(input_size=16, stages=2, base_width=4))
    prior = rep.epoch_means("l_prior")
    assert math.isfinite(prior[-1]) and prior[-1] > 0
    _, rep = train(ModelKind.AnoVAEGAN, data, cfg, SpatialLatent(4, 4, 2),
                   ModelConfig(input_size=16, stages=2, base_width=4))
    dis = [row["l_dis"] for row in rep.steps]
    assert all(math.isfinite(v) for v in dis)


def test_discriminator_separates_real_from_blurred():
    # generator frozen: only the discriminator objective is optimised
    params = build_model(ModelKind.sAE_GAN, SpatialLatent(4, 4, 1), ModelConfig(16, 2, 4), seed=0)
    real = _blobs(16, seed=2)
    fake = np.full_like(real, real.mean())
    opt = Adam(params.discriminator, lr=1e-3)
    losses = []
    for _ in range(40):
        params.zero_grad()
        loss = disc_loss(discriminate(params, Tensor(real)), discriminate(params, Tensor(fake)))
        loss.backward()
        opt.step({k: v.grad for k, v in params.discriminator.items()})
        losses.append(loss.item())
    with T.no_grad():
        assert discriminate(params, Tensor(real)).data.mean() > discriminate(params, Tensor(fake)).data.mean()
    assert losses[-1] < losses[0]


def test_loss_csv_round_trip(tmp_path):
    rep = LossReport()
    rep.add(0, 0, l_rec=1.5, l_prior=None, l_adv=None, l_dis=None)
    rep.add(1, 0, l_rec=1.25, l_prior=None, l_adv=None, l_dis=None)
    rep.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,l_rec,l_prior,l_adv,l_dis"
    assert lines[1] == "0,0,1.5,,,"
    assert LossReport.read_csv(tmp_path / "loss.csv").epoch_means("l_rec") == [1.375]
