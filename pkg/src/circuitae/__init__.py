"""Probabilistic-circuit autoencoder toolkit.

A smooth, decomposable circuit jointly models data and embedding
variables; encoding is exact conditional sampling made differentiable
with a straight-through Gumbel-argmax estimator, decoding is a neural
network, and the two train end-to-end on a reconstruction + prior +
likelihood objective.
"""

from .autodiff import Node, backward, constant, parameter
from .builders import (
    ConvPCConfig,
    TabularBuilderConfig,
    build_convpc,
    build_tabular,
)
from .circuit import (
    BernoulliUnit,
    BinomialUnit,
    Circuit,
    GaussianUnit,
    ProductUnit,
    SumUnit,
)
from .inference import (
    Evidence,
    encode,
    log_embedding_marginal,
    log_marginal,
    mpe_encode,
    sample_joint,
    simple_sample,
)
from .nn import DecoderConfig, VAEModel, build_decoder
from .training import (
    LossWeights,
    TrainConfig,
    distill,
    loss_kld,
    loss_nll,
    loss_rec,
    train_apc,
    train_vae,
)

__version__ = "0.1.0"

__all__ = [
    "Node", "backward", "constant", "parameter",
    "Circuit", "BernoulliUnit", "BinomialUnit", "GaussianUnit",
    "SumUnit", "ProductUnit",
    "Evidence", "encode", "log_marginal", "log_embedding_marginal",
    "mpe_encode", "sample_joint", "simple_sample",
    "TabularBuilderConfig", "ConvPCConfig", "build_tabular", "build_convpc",
    "DecoderConfig", "VAEModel", "build_decoder",
    "LossWeights", "TrainConfig", "loss_rec", "loss_kld", "loss_nll",
    "train_apc", "train_vae", "distill",
]
