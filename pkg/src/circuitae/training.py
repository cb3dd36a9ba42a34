"""Objectives and training loops.

The autoencoder objective is a weighted sum of three terms: masked MSE
reconstruction, closed-form Gaussian KLD of the sampled embedding path
against a standard-normal prior, and the joint negative log-likelihood of
data and sampled embeddings.  The same optimizer/schedule drives the
circuit autoencoder, the VAE baseline, and the data-free distillation
loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .circuit import BinomialUnit, Circuit
from .inference import Evidence, encode, log_marginal, sample_joint
from .nn import VAEModel, gaussian_kld, zero_impute


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    rec: float = 1.0
    kld: float = 1.0
    nll: float = 1.0

    def __post_init__(self):
        if min(self.rec, self.kld, self.nll) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch_size: int = 512
    lr_circuit: float = 0.1
    lr_neural: float = 0.005
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_cadence: int = 500
    warmup_frac: float = 0.02
    decay_milestones: tuple = (0.66, 0.90)
    detach_embeddings: bool = False  # ablation: cut encoder->decoder gradient

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "lr_circuit": self.lr_circuit,
            "lr_neural": self.lr_neural,
            "seed": self.seed,
            "loss_weights": [
                self.loss_weights.rec,
                self.loss_weights.kld,
                self.loss_weights.nll,
            ],
            "eval_cadence": self.eval_cadence,
            "warmup_frac": self.warmup_frac,
            "decay_milestones": list(self.decay_milestones),
            "detach_embeddings": self.detach_embeddings,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        lw = d.pop("loss_weights", [1.0, 1.0, 1.0])
        d["loss_weights"] = LossWeights(*lw)
        d["decay_milestones"] = tuple(d.get("decay_milestones", (0.66, 0.90)))
        return cls(**d)


def schedule_factor(step, total, warmup_frac=0.02, milestones=(0.66, 0.90)):
    """x100 exponential warmup, then x0.1 drops at the given milestones."""
    warm = max(int(round(warmup_frac * total)), 1)
    if step < warm:
        return math.exp(math.log(100.0) * (step / warm - 1.0))
    factor = 1.0
    for m in milestones:
        if step >= m * total:
            factor *= 0.1
    return factor


class AdamW:
    """AdamW over parameter groups with a shared schedule factor."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        # groups: [{"params": [...], "lr": float, "weight_decay": float}]
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.state = {}
        for g in groups:
            for p in g["params"]:
                self.state[id(p)] = (
                    np.zeros_like(p.value),
                    np.zeros_like(p.value),
                )

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self, factor: float = 1.0):
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for g in self.groups:
            lr = g["lr"] * factor
            if lr == 0.0:
                continue
            wd = g.get("weight_decay", 0.0)
            for p in g["params"]:
                if p.grad is None:
                    continue
                m, v = self.state[id(p)]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                upd = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
                p.value -= lr * (upd + wd * p.value)


# -- loss terms ---------------------------------------------------------


def loss_rec(x_hat: ad.Node, x, mask=None) -> ad.Node:
    """MSE over batch and observed dims; mask True marks observed."""
    x = np.asarray(x, dtype=ad.DTYPE)
    if x.shape != x_hat.value.shape:
        raise ad.AutodiffError(
            f"reconstruction shape {x_hat.value.shape} != target {x.shape}"
        )
    sq = ad.square(ad.sub(x_hat, x))
    if mask is None:
        return ad.reduce_mean(ad.reduce_mean(sq, axis=1), axis=0)
    mask = np.asarray(mask, dtype=ad.DTYPE)
    denom = float(np.sum(mask))
    if denom == 0:
        return ad.constant(0.0)
    return ad.mul(ad.reduce_sum(ad.reduce_sum(ad.mul(sq, mask), axis=1), axis=0),
                  1.0 / denom)


def loss_kld(trace) -> ad.Node:
    """Mean over batch of summed per-embedding closed-form Gaussian KLDs."""
    klds = [leaf.kld for leaf in trace.path.values()]
    per_sample = ad.reduce_sum(ad.stack(klds, axis=1), axis=1)
    return ad.reduce_mean(per_sample, axis=0)


def loss_nll(circuit: Circuit, x, z, mask=None) -> ad.Node:
    """Joint negative log-likelihood -mean log p(x, z)."""
    x = np.atleast_2d(np.asarray(x, dtype=ad.DTYPE))
    if mask is None:
        ev = Evidence.complete(x, z_values=z)
    else:
        ev = Evidence(x, mask, z_values=z)
    return ad.neg(ad.reduce_mean(log_marginal(circuit, ev), axis=0))


def data_scale(circuit: Circuit) -> float:
    """Normalization divisor mapping leaf-domain data into [0, 1]."""
    for u in circuit.units:
        if isinstance(u, BinomialUnit):
            return float(u.n)
    return 1.0


# -- training loops -----------------------------------------------------


def _check_finite(step, **components):
    for name, node in components.items():
        v = node.value if isinstance(node, ad.Node) else node
        if not np.all(np.isfinite(v)):
            raise TrainingError(
                f"non-finite {name} at step {step}: {v!r}"
            )


def train_apc(
    cfg: TrainConfig,
    circuit: Circuit,
    decoder,
    x_train: np.ndarray,
    callback=None,
):
    """End-to-end training of circuit encoder and neural decoder.

    x_train is in circuit leaf domain ({0,1} or integer counts).  Returns
    the per-step metrics history.
    """
    rng = np.random.default_rng(cfg.seed)
    scale = data_scale(circuit)
    lw = cfg.loss_weights
    opt = AdamW(
        [
            {"params": circuit.parameter_views(), "lr": cfg.lr_circuit,
             "weight_decay": 0.0},
            {"params": decoder.params(), "lr": cfg.lr_neural,
             "weight_decay": 0.01},
        ]
    )
    history = []
    n = x_train.shape[0]
    for step in range(cfg.iterations):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        xb = x_train[idx]
        ev = Evidence.complete(xb)
        z, trace = encode(circuit, ev, rng)
        z_dec = ad.detach(z) if cfg.detach_embeddings else z
        x_hat = decoder(z_dec)
        l_rec = loss_rec(x_hat, xb / scale)
        l_kld = loss_kld(trace)
        l_nll = loss_nll(circuit, xb, z)
        total = ad.add(
            ad.add(ad.mul(l_rec, lw.rec), ad.mul(l_kld, lw.kld)),
            ad.mul(l_nll, lw.nll),
        )
        _check_finite(step, rec=l_rec, kld=l_kld, nll=l_nll, total=total)
        opt.zero_grad()
        ad.backward(total)
        factor = schedule_factor(
            step, cfg.iterations, cfg.warmup_frac, cfg.decay_milestones
        )
        opt.step(factor)
        circuit.clamp_input_params()
        history.append(
            {
                "step": step,
                "lr_factor": factor,
                "rec": float(l_rec.value),
                "kld": float(l_kld.value),
                "nll": float(l_nll.value),
                "total": float(total.value),
            }
        )
        if callback is not None and (step + 1) % cfg.eval_cadence == 0:
            callback(step, history)
    return history


def vae_loss(vae: VAEModel, xb_norm: np.ndarray, rng,
             weights: LossWeights = None) -> tuple:
    """Weighted reconstruction MSE plus mean summed Gaussian KLD."""
    weights = weights or LossWeights()
    x_hat, mu, log_sigma, _ = vae.forward(xb_norm, rng)
    l_rec = loss_rec(x_hat, xb_norm)
    l_kld = ad.reduce_mean(
        ad.reduce_sum(gaussian_kld(mu, log_sigma), axis=1), axis=0
    )
    total = ad.add(ad.mul(l_rec, weights.rec), ad.mul(l_kld, weights.kld))
    return total, l_rec, l_kld


def train_vae(cfg: TrainConfig, vae: VAEModel, x_train_norm: np.ndarray,
              callback=None):
    """Reparameterized ELBO-style training with the shared schedule.

    x_train_norm must already be normalized to [0, 1].
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(
        [{"params": vae.params(), "lr": cfg.lr_neural, "weight_decay": 0.01}]
    )
    history = []
    n = x_train_norm.shape[0]
    for step in range(cfg.iterations):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        total, l_rec, l_kld = vae_loss(
            vae, x_train_norm[idx], rng, cfg.loss_weights
        )
        _check_finite(step, rec=l_rec, kld=l_kld, total=total)
        opt.zero_grad()
        ad.backward(total)
        opt.step(
            schedule_factor(
                step, cfg.iterations, cfg.warmup_frac, cfg.decay_milestones
            )
        )
        history.append(
            {
                "step": step,
                "rec": float(l_rec.value),
                "kld": float(l_kld.value),
                "total": float(total.value),
            }
        )
        if callback is not None and (step + 1) % cfg.eval_cadence == 0:
            callback(step, history)
    return history


def distill(
    teacher: VAEModel,
    circuit: Circuit,
    decoder,
    cfg: TrainConfig,
    callback=None,
):
    """Data-free distillation of a VAE into the circuit autoencoder.

    Each step draws embeddings from the circuit prior, decodes them with
    the frozen teacher into synthetic data, and trains the student on the
    usual three-term objective with the synthetic batch as ground truth.
    Synthetic data is quantized to the leaf support before circuit
    evaluation.  Non-finite teacher batches are skipped and counted.
    """
    rng = np.random.default_rng(cfg.seed)
    scale = data_scale(circuit)
    lw = cfg.loss_weights
    opt = AdamW(
        [
            {"params": circuit.parameter_views(), "lr": cfg.lr_circuit,
             "weight_decay": 0.0},
            {"params": decoder.params(), "lr": cfg.lr_neural,
             "weight_decay": 0.01},
        ]
    )
    history = []
    skipped = 0
    for step in range(cfg.iterations):
        _, z_prior = sample_joint(circuit, rng, cfg.batch_size)
        x_vae = teacher.decode(z_prior).value  # frozen teacher, in [0,1]
        if not np.all(np.isfinite(x_vae)):
            skipped += 1
            continue
        z_vae = teacher.encode_mean(x_vae)
        x_leaf = np.round(x_vae * scale)
        z_apc, trace = encode(circuit, Evidence.complete(x_leaf), rng)
        x_apc = decoder(z_apc)
        l_rec = loss_rec(x_apc, x_vae)
        l_kld = loss_kld(trace)
        l_nll = loss_nll(circuit, x_leaf, z_vae)
        total = ad.add(
            ad.add(ad.mul(l_rec, lw.rec), ad.mul(l_kld, lw.kld)),
            ad.mul(l_nll, lw.nll),
        )
        _check_finite(step, rec=l_rec, kld=l_kld, nll=l_nll, total=total)
        opt.zero_grad()
        ad.backward(total)
        opt.step(
            schedule_factor(
                step, cfg.iterations, cfg.warmup_frac, cfg.decay_milestones
            )
        )
        circuit.clamp_input_params()
        history.append(
            {
                "step": step,
                "rec": float(l_rec.value),
                "kld": float(l_kld.value),
                "nll": float(l_nll.value),
                "total": float(total.value),
                "skipped": skipped,
            }
        )
        if callback is not None and (step + 1) % cfg.eval_cadence == 0:
            callback(step, history)
    return history


def reconstruct(circuit, decoder, ev: Evidence, rng) -> np.ndarray:
    """Encode evidence (missing vars marginalized) and decode to [0, 1]."""
    z, _ = encode(circuit, ev, rng)
    return decoder(ad.detach(z)).value


def vae_reconstruct(vae: VAEModel, ev: Evidence, scale: float) -> np.ndarray:
    """Zero-impute missing inputs, mean-encode, decode to [0, 1]."""
    x = zero_impute(ev.values, ev.mask) / scale
    return vae.decode(vae.encode_mean(x)).value
