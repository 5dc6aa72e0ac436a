import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from pdrd import vae
from pdrd.hsi_io import HsiCube
from pdrd.nn import make_rng
from pdrd.vae import (
    LOGVAR_MIN,
    LatentField,
    TrainConfig,
    TrainReport,
    VaeModel,
    check_gradients,
    decode,
    encode,
    kl_to_standard_normal,
    latent_field,
    load_model,
    loss,
    loss_and_grads,
    reparameterize,
    save_model,
    train,
)

TINY = dict(encoder_width=16, encoder_depth=2, decoder_width=8, decoder_depth=2)


def kl_quadrature(mu, logvar):
    """KL(N(mu, e^logvar) || N(0, 1)) summed over dimensions by numerical integration."""
    total = 0.0
    for m, lv in zip(mu, logvar):
        s = np.exp(0.5 * lv)
        q = stats.norm(m, s)
        integrand = lambda z: q.pdf(z) * (q.logpdf(z) - stats.norm.logpdf(z))
        val, _ = integrate.quad(integrand, m - 12 * s, m + 12 * s, epsabs=1e-12, epsrel=1e-12, limit=200)
        total += val
    return total


class TestArchitecture:
    def test_default_topology(self):
        model = VaeModel.initialized(30, TrainConfig(), make_rng(0))
        widths = [(l.in_dim, l.out_dim, l.activation) for l in model.layers]
        assert widths[:3] == [(30, 400, "relu"), (400, 400, "relu"), (400, 400, "relu")]
        assert widths[3] == widths[4] == (400, 20, "identity")
        assert widths[5] == (20, 20, "relu") and len(model.decoder_hidden) == 6
        assert widths[-1] == (20, 30, "identity")

    def test_rejects_small_beta(self):
        with pytest.raises(ValueError):
            TrainConfig(beta=0.5).validate()


class TestForward:
    def test_zero_heads(self, rng):
        model = VaeModel.initialized(6, TrainConfig(k=3, **TINY), make_rng(0))
        model.mu_head.weights[:] = 0.0
        model.logvar_head.weights[:] = 0.0
        mu, logvar = encode(model, rng.random((5, 6)))
        assert not mu.any() and not logvar.any()

    def test_identical_pixels(self, rng):
        model = VaeModel.initialized(6, TrainConfig(k=3, **TINY), make_rng(0))
        mu, logvar = encode(model, np.tile(rng.random(6), (4, 1)))
        assert np.all(mu == mu[0]) and np.all(logvar == logvar[0])

    def test_non_finite_activation_named(self):
        model = VaeModel.initialized(4, TrainConfig(k=2, **TINY), make_rng(0))
        model.layers[1].weights[:] = 1e200
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError, match="encoder1"):
            encode(model, np.ones((1, 4)) * 1e200)

    def test_logvar_clamped(self):
        model = VaeModel.initialized(4, TrainConfig(k=2, **TINY), make_rng(0))
        model.logvar_head.biases[:] = [-1e3, 1e3]
        _, logvar = encode(model, np.zeros((1, 4)))
        np.testing.assert_array_equal(logvar, [[-20.0, 20.0]])

    def test_reparameterize_low_variance_limit(self, rng):
        mu = rng.normal(size=(50, 4))
        z = reparameterize(mu, np.full_like(mu, -1e6), make_rng(3))
        eps = make_rng(3).standard_normal(mu.shape)
        assert np.all(np.abs(z - mu) <= 5e-5 * np.abs(eps))

    def test_reparameterize_deterministic_and_distributed(self):
        mu = np.full((20000, 1), 2.0)
        lv = np.full((20000, 1), np.log(0.25))
        z1 = reparameterize(mu, lv, make_rng(5))
        np.testing.assert_array_equal(z1, reparameterize(mu, lv, make_rng(5)))
        assert abs(z1.mean() - 2.0) < 0.02 and abs(z1.std() - 0.5) < 0.01

    def test_zero_decoder(self, rng):
        model = VaeModel.initialized(5, TrainConfig(k=3, **TINY), make_rng(0))
        model.params.flat[:] = 0.0
        np.testing.assert_array_equal(decode(model, rng.normal(size=(4, 3))), 0.0)

    def test_identical_latents(self, rng):
        model = VaeModel.initialized(5, TrainConfig(k=3, **TINY), make_rng(0))
        out = decode(model, np.tile(rng.normal(size=3), (3, 1)))
        assert np.all(out == out[0])


class TestKl:
    def test_closed_form_values(self):
        assert kl_to_standard_normal(np.zeros((1, 4)), np.zeros((1, 4)))[0] == 0.0
        assert kl_to_standard_normal(np.array([[1.0]]), np.array([[0.0]]))[0] == 0.5

    def test_matches_quadrature(self, rng):
        for _ in range(10):
            mu = rng.normal(0, 2, size=3)
            logvar = rng.uniform(-3, 3, size=3)
            assert abs(kl_to_standard_normal(mu, logvar)[0] - kl_quadrature(mu, logvar)) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=6),
        st.lists(st.floats(-15, 15), min_size=6, max_size=6),
    )
    def test_nonnegative(self, mu, logvar):
        mu = np.array(mu)
        lv = np.array(logvar[: mu.size])
        kl = kl_to_standard_normal(mu, lv)[0]
        assert kl >= 0.0
        if kl == 0.0:
            np.testing.assert_allclose(mu, 0.0, atol=1e-7)


class TestLoss:
    def test_perfect_reconstruction(self, rng):
        model = VaeModel.initialized(4, TrainConfig(k=2, **TINY), make_rng(0))
        x = rng.random((3, 4))
        assert loss(model, x, x, np.zeros((3, 2)), np.zeros((3, 2))) == (0.0, 0.0, 0.0)

    def test_beta_one_is_vanilla_elbo(self, rng):
        model = VaeModel.initialized(4, TrainConfig(k=2, beta=1.0, **TINY), make_rng(0))
        x, xhat = rng.random((3, 4)), rng.random((3, 4))
        mu, lv = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        total, recon, kl = loss(model, x, xhat, mu, lv)
        # unit-variance Gaussian log-likelihood up to its constant, plus the KL, averaged per pixel
        loglik = stats.norm.logpdf(x, xhat, 1.0).sum(axis=1) + 0.5 * 4 * np.log(2 * np.pi)
        kl_ref = np.array([kl_quadrature(m, l) for m, l in zip(mu, lv)])
        np.testing.assert_allclose(-total, np.mean(loglik - kl_ref), rtol=1e-9)

    def test_beta_weights_kl(self, rng):
        m1 = VaeModel.initialized(4, TrainConfig(k=2, beta=1.0, **TINY), make_rng(0))
        args = (rng.random((3, 4)), rng.random((3, 4)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
        t1, r1, k1 = loss(m1, *args)
        t7, r7, k7 = loss(m1.with_beta(7.0), *args)
        assert (r1, k1) == (r7, k7)
        assert t7 == pytest.approx(r1 + 7.0 * k1, rel=1e-15)

    def test_loss_and_grads_agrees_with_loss(self, rng):
        model = VaeModel.initialized(6, TrainConfig(k=3, beta=4.0, **TINY), make_rng(1))
        x = rng.random((5, 6))
        eps = rng.standard_normal((5, 3))
        mu, lv = encode(model, x)
        xhat = decode(model, mu + np.exp(0.5 * lv) * eps)
        ref = loss(model, x, xhat, mu, lv)
        np.testing.assert_allclose(loss_and_grads(model, x, eps), ref, rtol=1e-12)


class TestGradients:
    @pytest.mark.parametrize("beta", [1.0, 10.0])
    def test_full_model(self, beta):
        rng = make_rng(7)
        model = VaeModel.initialized(8, TrainConfig(k=2, beta=beta), rng)
        x = rng.random((4, 8))
        eps = rng.standard_normal((4, 2))
        assert check_gradients(model, x, eps, probes=60) <= 1e-4

    def test_every_layer_small_model(self):
        rng = make_rng(2)
        model = VaeModel.initialized(5, TrainConfig(k=3, beta=3.0, **TINY), rng)
        x = rng.random((6, 5))
        eps = rng.standard_normal((6, 3))
        assert check_gradients(model, x, eps, probes=400) <= 1e-4

    def test_logvar_clamp_region(self):
        rng = make_rng(4)
        model = VaeModel.initialized(5, TrainConfig(k=2, beta=2.0, **TINY), rng)
        model.logvar_head.biases[:] = [-25.0, 0.0]
        x = rng.random((3, 5))
        eps = rng.standard_normal((3, 2))
        loss_and_grads(model, x, eps)
        blk = model.params.blocks["logvar_head.biases"]
        assert model.params.grad[blk][0] == 0.0
        assert check_gradients(model, x, eps, probes=100) <= 1e-4

    def test_check_notices_wrong_kl_weight(self, monkeypatch):
        rng = make_rng(7)
        model = VaeModel.initialized(8, TrainConfig(k=2, beta=10.0, **TINY), rng)
        x = rng.random((4, 8))
        eps = rng.standard_normal((4, 2))
        real = vae.forward_loss

        def beta_one(m, *a, **kw):
            out = real(m, *a, **kw)
            return (out[1] + out[2],) + out[1:]

        monkeypatch.setattr(vae, "forward_loss", beta_one)
        assert check_gradients(model, x, eps, probes=100) > 1e-2


class TestTraining:
    def _samples(self, rng):
        base = rng.random((2, 6))
        return np.repeat(base, 40, axis=0) + 0.05 * rng.standard_normal((80, 6))

    def test_same_seed_bit_identical(self, rng):
        samples = self._samples(rng)
        cfg = TrainConfig(k=2, epochs=3, batch_size=16, seed=4, **TINY)
        m1, r1 = train(samples, cfg)
        m2, r2 = train(samples, cfg)
        assert m1.params.flat.tobytes() == m2.params.flat.tobytes()
        assert r1.total == r2.total

    def test_different_seed_differs(self, rng):
        samples = self._samples(rng)
        m1, _ = train(samples, TrainConfig(k=2, epochs=1, seed=1, **TINY))
        m2, _ = train(samples, TrainConfig(k=2, epochs=1, seed=2, **TINY))
        assert not np.array_equal(m1.params.flat, m2.params.flat)

    def test_loss_decreases(self, rng):
        samples = self._samples(rng)
        _, report = train(samples, TrainConfig(k=2, beta=1.0, epochs=30, learning_rate=3e-3, **TINY))
        assert report.epochs == 30
        assert report.total[-1] < 0.5 * report.total[0]

    def test_early_stopping(self, rng):
        samples = self._samples(rng)
        _, report = train(samples, TrainConfig(k=2, epochs=200, patience=1, learning_rate=0.5, **TINY))
        assert report.stopped_early and report.epochs < 200

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            train(rng.random((3, 4)), TrainConfig(k=2, batch_size=16, **TINY))

    def test_report_csv(self, tmp_path):
        rep = TrainReport([3.0, 2.0], [2.0, 1.5], [0.1, 0.05], [0.2, 0.2])
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "epoch,total,recon,kl,seconds"
        assert lines[2].startswith("2,2.0,1.5,0.05")


class TestLatentField:
    def test_single_pixel(self):
        model = VaeModel.initialized(3, TrainConfig(k=2, **TINY), make_rng(0))
        lf = latent_field(model, HsiCube(np.ones((3, 1, 1))))
        assert lf.mu.shape == (1, 1, 2) and np.all(lf.sigma > 0)

    def test_layout_and_chunking(self, rng):
        model = VaeModel.initialized(3, TrainConfig(k=2, **TINY), make_rng(0))
        cube = HsiCube(rng.random((3, 5, 7)))
        lf = latent_field(model, cube, chunk=4)
        mu, lv = encode(model, cube.data[:, 3, 6][None, :])
        np.testing.assert_allclose(lf.mu[3, 6], mu[0], rtol=1e-14)
        np.testing.assert_allclose(lf.sigma[3, 6], np.exp(0.5 * lv[0]), rtol=1e-14)
        np.testing.assert_array_equal(latent_field(model, cube).mu, lf.mu)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            LatentField(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))

    def test_band_mismatch(self):
        model = VaeModel.initialized(3, TrainConfig(k=2, **TINY), make_rng(0))
        with pytest.raises(ValueError):
            latent_field(model, HsiCube(np.ones((4, 2, 2))))


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        model, _ = train(rng.random((40, 5)), TrainConfig(k=2, epochs=2, **TINY))
        save_model(model, tmp_path / "m.pdrd")
        back = load_model(tmp_path / "m.pdrd", config=model.config)
        assert back.params.flat.tobytes() == model.params.flat.tobytes()
        assert back.adam.step == model.adam.step
        x = rng.random((3, 5))
        np.testing.assert_array_equal(encode(back, x)[0], encode(model, x)[0])
