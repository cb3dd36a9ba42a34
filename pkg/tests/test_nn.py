"""Neural module tests: decoder forward values, finite-difference gradient
checks, the closed-form Gaussian divergence vs a Monte Carlo oracle, and
architecture parity between the two models."""

import numpy as np
import pytest

from circuitae import autodiff as ad
from circuitae import nn

from conftest import finite_difference_check


def mlp_cfg(in_dim=3, out_dim=4, hidden=(5,)):
    return nn.DecoderConfig(
        kind="mlp", in_dim=in_dim, out_dim=out_dim, hidden=list(hidden)
    )


class TestMLPDecoder:

    def test_zero_weights_give_half(self, rng):
        dec = nn.MLPDecoder(mlp_cfg(), rng)
        for p in dec.params():
            p.value[...] = 0.0
        out = dec(ad.constant(np.ones((2, 3))))
        assert np.allclose(out.value, 0.5)

    def test_single_linear_layer_value(self, rng):
        cfg = nn.DecoderConfig(kind="mlp", in_dim=1, out_dim=1, hidden=[])
        dec = nn.MLPDecoder(cfg, rng)
        dec.layers[0].weight.value[...] = 2.0
        dec.layers[0].bias.value[...] = -1.0
        out = dec(ad.constant(np.array([[3.0]])))
        assert np.allclose(out.value, 1.0 / (1.0 + np.exp(-5.0)))

    def test_output_in_unit_interval(self, rng):
        dec = nn.MLPDecoder(mlp_cfg(), rng)
        out = dec(ad.constant(rng.normal(size=(16, 3)) * 10)).value
        assert np.all(out > 0) and np.all(out < 1)

    def test_rejects_non_finite_embedding(self, rng):
        dec = nn.MLPDecoder(mlp_cfg(), rng)
        with pytest.raises(ad.AutodiffError):
            dec(ad.constant(np.full((1, 3), np.nan)))

    def test_gradients_match_finite_differences(self, rng):
        dec = nn.MLPDecoder(mlp_cfg(in_dim=2, out_dim=3, hidden=(4,)), rng)
        z = ad.constant(rng.normal(size=(3, 2)))
        target = rng.uniform(size=(3, 3))

        def loss():
            d = ad.sub(dec(z), target)
            return ad.reduce_sum(ad.reduce_sum(ad.square(d), axis=1))

        assert finite_difference_check(loss, dec.params()) < 1e-4


class TestDeconvDecoder:

    def cfg(self):
        return nn.DecoderConfig(
            kind="deconv", in_dim=2, out_dim=16, hidden=[],
            channels=[3, 2], height=4, width=4,
        )

    def test_shapes_and_range(self, rng):
        dec = nn.DeconvDecoder(self.cfg(), rng)
        out = dec(ad.constant(rng.normal(size=(5, 2)))).value
        assert out.shape == (5, 16)
        assert np.all(out > 0) and np.all(out < 1)

    def test_rejects_mismatched_geometry(self, rng):
        bad = nn.DecoderConfig(kind="deconv", in_dim=2, out_dim=15,
                               height=4, width=4)
        with pytest.raises(ad.AutodiffError):
            nn.DeconvDecoder(bad, rng)

    def test_gradients_match_finite_differences(self, rng):
        dec = nn.DeconvDecoder(self.cfg(), rng)
        z = ad.constant(rng.normal(size=(2, 2)))
        target = rng.uniform(size=(2, 16))

        def loss():
            d = ad.sub(dec(z), target)
            return ad.reduce_sum(ad.reduce_sum(ad.square(d), axis=1))

        assert finite_difference_check(loss, dec.params()) < 1e-4


class TestBuildDecoder:

    def test_dispatch(self, rng):
        assert isinstance(nn.build_decoder(mlp_cfg(), rng), nn.MLPDecoder)
        with pytest.raises(ad.AutodiffError):
            nn.build_decoder(
                nn.DecoderConfig(kind="nope", in_dim=1, out_dim=1), rng
            )

    def test_decode_accepts_plain_arrays(self, rng):
        dec = nn.build_decoder(mlp_cfg(), rng)
        out = nn.decode(dec, np.zeros(3))
        assert out.value.shape == (1, 4)

    def test_config_round_trip(self):
        cfg = mlp_cfg()
        assert nn.DecoderConfig.from_dict(cfg.to_dict()) == cfg


class TestVAE:

    def test_encoder_outputs_have_embedding_shape(self, rng):
        vae = nn.VAEModel(mlp_cfg(in_dim=3, out_dim=6), rng)
        mu, log_sigma = vae.encode_params(rng.normal(size=(4, 6)))
        assert mu.value.shape == (4, 3)
        assert log_sigma.value.shape == (4, 3)

    def test_forward_reparameterization(self, rng):
        vae = nn.VAEModel(mlp_cfg(in_dim=2, out_dim=5), rng)
        x = rng.uniform(size=(3, 5))
        x_hat, mu, log_sigma, z = vae.forward(x, np.random.default_rng(0))
        eps = np.random.default_rng(0).standard_normal((3, 2))
        want = mu.value + np.exp(log_sigma.value) * eps
        assert np.allclose(z.value, want)
        assert x_hat.value.shape == (3, 5)

    def test_mean_encoding_is_deterministic(self, rng):
        vae = nn.VAEModel(mlp_cfg(in_dim=2, out_dim=5), rng)
        x = rng.uniform(size=(3, 5))
        assert np.array_equal(vae.encode_mean(x), vae.encode_mean(x))

    def test_decoder_parameter_parity_with_standalone(self, rng):
        cfg = mlp_cfg(in_dim=3, out_dim=8, hidden=(16, 16))
        vae = nn.VAEModel(cfg, np.random.default_rng(1))
        dec = nn.build_decoder(cfg, np.random.default_rng(2))
        vs = [p.value.shape for p in vae.decoder.params()]
        ds = [p.value.shape for p in dec.params()]
        assert vs == ds

    def test_encoder_gradients_match_finite_differences(self, rng):
        vae = nn.VAEModel(
            mlp_cfg(in_dim=2, out_dim=3, hidden=(4,)), rng, encoder_hidden=[4]
        )
        x = rng.uniform(size=(2, 3))

        def loss():
            mu, log_sigma = vae.encode_params(x)
            k = nn.gaussian_kld(mu, log_sigma)
            return ad.reduce_sum(ad.reduce_sum(k, axis=1))

        assert finite_difference_check(loss, vae.encoder_params()) < 1e-4


class TestZeroImpute:

    def test_masks_missing_entries(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        m = np.array([[True, False], [False, True]])
        assert np.array_equal(
            nn.zero_impute(x, m), [[1.0, 0.0], [0.0, 4.0]]
        )


class TestGaussianKLD:

    def test_standard_normal_gives_zero(self):
        k = nn.gaussian_kld(ad.constant(np.zeros((1, 3))),
                            ad.constant(np.zeros((1, 3))))
        assert np.allclose(k.value, 0.0)

    def test_shifted_mean_gives_half_mu_squared(self):
        k = nn.gaussian_kld(ad.constant(np.array([[1.0]])),
                            ad.constant(np.array([[0.0]])))
        assert np.allclose(k.value, 0.5)

    def test_known_variance_case(self):
        # KLD(N(0, s^2) || N(0,1)) = 0.5 (s^2 - 1) - ln s
        ls = 0.5
        k = nn.gaussian_kld(ad.constant(np.array([[0.0]])),
                            ad.constant(np.array([[ls]])))
        want = 0.5 * (np.exp(2 * ls) - 1.0) - ls
        assert np.allclose(k.value, want)

    def test_closed_form_matches_monte_carlo(self, rng):
        # E_{q}[log q(z) - log p(z)] estimated with 1e6 draws
        mus = rng.normal(0.0, 1.0, size=8)
        lss = rng.uniform(-0.8, 0.8, size=8)
        draws = rng.standard_normal(1_000_000)
        for mu, ls in zip(mus, lss):
            sd = np.exp(ls)
            z = mu + sd * draws
            log_q = -0.5 * ((z - mu) / sd) ** 2 - ls
            log_p = -0.5 * z**2
            mc = float(np.mean(log_q - log_p))
            closed = float(
                nn.gaussian_kld(
                    ad.constant(np.array([[mu]])),
                    ad.constant(np.array([[ls]])),
                ).value[0, 0]
            )
            assert abs(mc - closed) < 1e-2

    def test_gradients_match_finite_differences(self, rng):
        mu = ad.parameter(rng.normal(size=(2, 3)))
        ls = ad.parameter(rng.uniform(-0.5, 0.5, size=(2, 3)))

        def loss():
            k = nn.gaussian_kld(mu, ls)
            return ad.reduce_sum(ad.reduce_sum(k, axis=1))

        assert finite_difference_check(loss, [mu, ls]) < 1e-5
