"""Gradient-estimator benchmark for categorical sampling at a sum unit.

A learnable categorical (softmax weights) is fit to a fixed random ground
truth by minimizing the MSE between one-hot samples drawn through a
differentiable estimator and one-hot samples from the truth, paired by
batch index.  Reported metric: KLD(learned || truth) over iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .inference import GUMBEL_EPS, simple_sample
from .training import AdamW

ESTIMATORS = ("simple", "gumbel-softmax")


@dataclass
class BenchConfig:
    num_categories: int = 64
    lr: float = 0.01
    iterations: int = 1000
    batch_size: int = 64
    seeds: int = 10
    estimator: str = "simple"
    tau: float = 1.0  # gumbel-softmax temperature
    record_every: int = 10

    def validate(self):
        if self.num_categories < 2:
            raise ValueError("need at least two categories")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")


def categorical_kld(p: np.ndarray, q: np.ndarray) -> float:
    """KLD(p || q) for dense categorical distributions."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _softmax_rows(raw: ad.Node, B: int) -> ad.Node:
    """Normalized probabilities of shape (B, D) from raw weights (D,)."""
    D = raw.value.shape[0]
    log_p = ad.sub(raw, ad.logsumexp(raw))
    return ad.exp(ad.broadcast_to(ad.reshape(log_p, (1, D)), (B, D)))


def gumbel_softmax_sample(theta: ad.Node, rng, tau: float) -> ad.Node:
    """Hard straight-through Gumbel-Softmax draw from probabilities theta."""
    u = rng.uniform(GUMBEL_EPS, 1.0 - GUMBEL_EPS, size=theta.value.shape)
    g = -np.log(-np.log(u))
    logits = ad.mul(ad.add(ad.log(theta), g), 1.0 / tau)
    B = theta.value.shape[0]
    lse = ad.logsumexp(logits, axis=1)
    soft = ad.exp(
        ad.sub(
            logits,
            ad.broadcast_to(ad.reshape(lse, (B, 1)), theta.value.shape),
        )
    )
    hard = np.zeros_like(soft.value)
    hard[np.arange(hard.shape[0]), np.argmax(soft.value, axis=1)] = 1.0
    return ad.add(ad.constant(hard - soft.value), soft)


def run_seed(cfg: BenchConfig, seed: int) -> dict:
    """One benchmark fit; returns the recorded KLD trajectory and final."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    D = cfg.num_categories
    p_true = rng.dirichlet(np.ones(D))
    raw = ad.parameter(0.01 * rng.standard_normal(D))
    opt = AdamW([{"params": [raw], "lr": cfg.lr, "weight_decay": 0.0}])
    steps, klds = [], []

    def record(step):
        p = np.exp(raw.value - np.max(raw.value))
        p /= p.sum()
        steps.append(step)
        klds.append(categorical_kld(p, p_true))

    for step in range(cfg.iterations):
        if step % cfg.record_every == 0:
            record(step)
        targets = np.zeros((cfg.batch_size, D))
        draws = rng.choice(D, size=cfg.batch_size, p=p_true)
        targets[np.arange(cfg.batch_size), draws] = 1.0
        theta = _softmax_rows(raw, cfg.batch_size)
        if cfg.estimator == "simple":
            s = simple_sample(theta, rng)
        else:
            s = gumbel_softmax_sample(theta, rng, cfg.tau)
        diff = ad.sub(s, targets)
        loss = ad.reduce_mean(ad.reduce_sum(ad.square(diff), axis=1), axis=0)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    record(cfg.iterations)
    # final KLD is of the truth against the learned, per the fit direction
    p = np.exp(raw.value - np.max(raw.value))
    p /= p.sum()
    return {
        "seed": seed,
        "steps": steps,
        "klds": klds,
        "final_kld": categorical_kld(p, p_true),
        "learned": p,
        "truth": p_true,
    }


def run_bench(cfg: BenchConfig) -> dict:
    """Benchmark over seeds; per-seed trajectories plus summary stats."""
    runs = [run_seed(cfg, seed) for seed in range(cfg.seeds)]
    finals = np.array([r["final_kld"] for r in runs])
    return {
        "estimator": cfg.estimator,
        "num_categories": cfg.num_categories,
        "runs": runs,
        "final_mean": float(finals.mean()),
        "final_std": float(finals.std()),
    }


def bench_table(results: list) -> str:
    """Structured-text table of per-(estimator, seed) final KLDs."""
    lines = ["estimator\tcategories\tseed\tfinal_kld"]
    for res in results:
        for r in res["runs"]:
            lines.append(
                f"{res['estimator']}\t{res['num_categories']}\t"
                f"{r['seed']}\t{r['final_kld']:.6f}"
            )
        lines.append(
            f"{res['estimator']}\t{res['num_categories']}\tmean"
            f"\t{res['final_mean']:.6f} +- {res['final_std']:.6f}"
        )
    return "\n".join(lines) + "\n"
