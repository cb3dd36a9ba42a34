"""Neural decoder for the circuit autoencoder, plus a minimal VAE.

The VAE reuses the exact decoder architecture so that encoder choices are
the only difference between the two models.  Outputs are squashed to the
normalized data range [0, 1] by a final sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LEAKY_ALPHA = 0.1


@dataclass
class DecoderConfig:
    kind: str  # "mlp" | "deconv"
    in_dim: int
    out_dim: int  # |X|; for deconv this must equal height * width
    hidden: list = field(default_factory=lambda: [64, 64, 64, 64])
    channels: list = field(default_factory=lambda: [32, 16])  # deconv schedule
    height: int = 0
    width: int = 0

    def to_dict(self):
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _kaiming_uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, rng, n_in, n_out):
        self.weight = ad.parameter(_kaiming_uniform(rng, n_in, (n_in, n_out)))
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: ad.Node) -> ad.Node:
        B = x.value.shape[0]
        n_out = self.bias.value.shape[0]
        return ad.add(
            ad.matmul(x, self.weight),
            ad.broadcast_to(ad.reshape(self.bias, (1, n_out)), (B, n_out)),
        )

    def params(self):
        return [self.weight, self.bias]


class ConvTranspose2d:
    def __init__(self, rng, c_in, c_out, kernel=2, stride=2):
        fan_in = c_in * kernel * kernel
        self.kernel = ad.parameter(
            _kaiming_uniform(rng, fan_in, (c_in, c_out, kernel, kernel))
        )
        self.stride = stride

    def __call__(self, x: ad.Node) -> ad.Node:
        return ad.conv_transpose2d(x, self.kernel, self.stride)

    def params(self):
        return [self.kernel]


def leaky_relu(x: ad.Node, alpha: float = LEAKY_ALPHA) -> ad.Node:
    pos = ad.maximum(x, 0.0)
    return ad.add(pos, ad.mul(ad.sub(x, pos), alpha))


def relu(x: ad.Node) -> ad.Node:
    return ad.maximum(x, 0.0)


class MLPDecoder:
    """Feed-forward decoder with leaky ReLU hiddens and sigmoid output."""

    def __init__(self, cfg: DecoderConfig, rng):
        dims = [cfg.in_dim] + list(cfg.hidden) + [cfg.out_dim]
        self.cfg = cfg
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, z: ad.Node) -> ad.Node:
        if not np.all(np.isfinite(z.value)):
            raise ad.AutodiffError("decoder received non-finite embedding")
        h = z
        for layer in self.layers[:-1]:
            h = leaky_relu(layer(h))
        return ad.sigmoid(self.layers[-1](h))

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class DeconvDecoder:
    """Dense projection to a 2x2 map, then stride-2 transposed convs."""

    def __init__(self, cfg: DecoderConfig, rng):
        if cfg.height != cfg.width or cfg.height * cfg.width != cfg.out_dim:
            raise ad.AutodiffError(
                "deconv decoder needs square images with out_dim == height*width"
            )
        n_ups = int(np.log2(cfg.height)) - 1  # 2x2 base map, doubled n_ups times
        if 2 ** (n_ups + 1) != cfg.height or n_ups < 1:
            raise ad.AutodiffError("deconv decoder needs power-of-two height >= 4")
        chans = list(cfg.channels)
        while len(chans) < n_ups:
            chans.append(max(chans[-1] // 2, 4))
        self.cfg = cfg
        self.base_channels = chans[0]
        self.proj = Linear(rng, cfg.in_dim, chans[0] * 4)
        self.deconvs = [
            ConvTranspose2d(rng, chans[i], 1 if i == n_ups - 1 else chans[i + 1])
            for i in range(n_ups)
        ]

    def __call__(self, z: ad.Node) -> ad.Node:
        if not np.all(np.isfinite(z.value)):
            raise ad.AutodiffError("decoder received non-finite embedding")
        B = z.value.shape[0]
        h = ad.reshape(self.proj(z), (B, self.base_channels, 2, 2))
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < len(self.deconvs) - 1:
                h = relu(h)
        return ad.reshape(ad.sigmoid(h), (B, self.cfg.out_dim))

    def params(self):
        ps = self.proj.params()
        for d in self.deconvs:
            ps += d.params()
        return ps


def build_decoder(cfg: DecoderConfig, rng):
    if cfg.kind == "mlp":
        return MLPDecoder(cfg, rng)
    if cfg.kind == "deconv":
        return DeconvDecoder(cfg, rng)
    raise ad.AutodiffError(f"unknown decoder kind {cfg.kind!r}")


def decode(decoder, z) -> ad.Node:
    """Map embeddings (node or array, (B, |Z|)) to reconstructions in [0,1]."""
    z = ad.constant(np.atleast_2d(z) if not isinstance(z, ad.Node) else z)
    if z.value.ndim == 1:
        z = ad.reshape(z, (1, z.value.shape[0]))
    return decoder(z)


class VAEModel:
    """Gaussian-posterior VAE sharing the decoder architecture above.

    The encoder is an MLP producing (mu, log sigma); missing inputs must be
    zero-imputed by the caller before encoding.
    """

    def __init__(self, decoder_cfg: DecoderConfig, rng, encoder_hidden=None):
        self.decoder_cfg = decoder_cfg
        self.z_dim = decoder_cfg.in_dim
        self.x_dim = decoder_cfg.out_dim
        hidden = list(encoder_hidden or [64, 64, 64, 64])
        dims = [self.x_dim] + hidden
        self.enc_layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.enc_head = Linear(rng, dims[-1], 2 * self.z_dim)
        self.decoder = build_decoder(decoder_cfg, rng)

    def encode_params(self, x) -> tuple:
        """Posterior (mu, log sigma) nodes, each (B, z_dim)."""
        h = ad.constant(np.atleast_2d(x) if not isinstance(x, ad.Node) else x)
        for layer in self.enc_layers:
            h = leaky_relu(layer(h))
        out = self.enc_head(h)
        B = out.value.shape[0]
        both = ad.reshape(out, (B, 2, self.z_dim))
        mu = ad.reshape(_take_axis1(both, 0), (B, self.z_dim))
        log_sigma = ad.reshape(_take_axis1(both, 1), (B, self.z_dim))
        return mu, log_sigma

    def forward(self, x, rng) -> tuple:
        """Reparameterized pass: returns (x_hat, mu, log_sigma, z)."""
        mu, log_sigma = self.encode_params(x)
        eps = rng.standard_normal(mu.value.shape)
        z = ad.add(mu, ad.mul(ad.exp(log_sigma), eps))
        return self.decoder(z), mu, log_sigma, z

    def encode_mean(self, x) -> np.ndarray:
        """Deterministic embedding: the posterior mean."""
        return self.encode_params(x)[0].value

    def decode(self, z) -> ad.Node:
        return decode(self.decoder, z)

    def encoder_params(self):
        ps = [p for layer in self.enc_layers for p in layer.params()]
        return ps + self.enc_head.params()

    def params(self):
        return self.encoder_params() + self.decoder.params()


def _take_axis1(a: ad.Node, idx: int) -> ad.Node:
    out = ad.Node(a.value[:, idx], parents=(a,))

    def _bw(g):
        ga = np.zeros_like(a.value)
        ga[:, idx] = g
        a.accumulate_grad(ga)

    out._backward = _bw if out.requires_grad else None
    return out


def zero_impute(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Constant-zero imputation for neural encoders on missing inputs."""
    return np.where(mask, values, 0.0)


def gaussian_kld(mu: ad.Node, log_sigma: ad.Node) -> ad.Node:
    """Closed-form KLD(N(mu, sigma^2) || N(0, 1)) per element."""
    sigma2 = ad.exp(ad.mul(log_sigma, 2.0))
    return ad.sub(
        ad.mul(ad.add(ad.square(mu), ad.add(sigma2, -1.0)), 0.5), log_sigma
    )
