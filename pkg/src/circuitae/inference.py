"""Exact log-domain inference and sampling for circuits.

All inference runs in log space; sum units combine children with
logsumexp over softmax-normalized weights.  The conditional sampling pass
reweights each sum unit by its cached child log-likelihoods and draws a
child through a straight-through Gumbel-argmax estimator, keeping the
whole encode differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .circuit import (
    BernoulliUnit,
    BinomialUnit,
    Circuit,
    GaussianUnit,
    ProductUnit,
    SumUnit,
)

LOG_2PI = float(np.log(2.0 * np.pi))
GUMBEL_EPS = 1e-12

# count of conditional-sampling fallbacks to uniform weights (impossible
# evidence under every child); reset with reset_diagnostics()
DIAGNOSTICS = {"degenerate_conditionals": 0}


def reset_diagnostics():
    DIAGNOSTICS["degenerate_conditionals"] = 0


class EvidenceError(ValueError):
    pass


@dataclass
class Evidence:
    """Per-data-variable observed values and mask for a batch.

    values: (B, n_data) float array; entries at unobserved positions are
    ignored.  mask: (B, n_data) bool, True where observed.  z_values holds
    observed embedding values (array or differentiable node) or None when
    the embeddings are latent.
    """

    values: np.ndarray
    mask: np.ndarray
    z_values: object = None  # np.ndarray | ad.Node | None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=ad.DTYPE)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise EvidenceError(
                f"values {self.values.shape} and mask {self.mask.shape} must be "
                "equal 2-d shapes"
            )

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @classmethod
    def complete(cls, x, z_values=None) -> "Evidence":
        x = np.atleast_2d(np.asarray(x, dtype=ad.DTYPE))
        return cls(x, np.ones_like(x, dtype=bool), z_values)

    @classmethod
    def all_missing(cls, batch_size: int, n_data: int, z_values=None) -> "Evidence":
        return cls(
            np.zeros((batch_size, n_data)),
            np.zeros((batch_size, n_data), dtype=bool),
            z_values,
        )

    def with_embeddings(self, z_values) -> "Evidence":
        return Evidence(self.values, self.mask, z_values)


class ForwardCache:
    """Per-sum-unit child log-likelihood matrices from one forward pass."""

    def __init__(self):
        self.gammas = {}  # uid -> Node of shape (B, D)

    def store(self, uid: int, gamma: ad.Node):
        self.gammas[uid] = gamma

    def __getitem__(self, uid: int) -> ad.Node:
        return self.gammas[uid]


@dataclass
class PathLeaf:
    """Gaussian leaf statistics mixed along the sampling-induced tree."""

    z: ad.Node
    mean: ad.Node
    log_std: ad.Node
    kld: ad.Node


@dataclass
class SampleTrace:
    """Record of one (batched) conditional sampling pass."""

    one_hots: dict = field(default_factory=dict)  # sum uid -> Node (B, D)
    path: dict = field(default_factory=dict)  # embedding var -> PathLeaf
    log_marginal: ad.Node = None


def _validate_observed(unit, x: np.ndarray, m: np.ndarray):
    obs = x[m]
    if obs.size == 0:
        return
    if isinstance(unit, BernoulliUnit):
        if not np.all((obs == 0.0) | (obs == 1.0)):
            raise EvidenceError(
                f"bernoulli variable {unit.var} observed outside {{0,1}}"
            )
    elif isinstance(unit, BinomialUnit):
        if not np.all((obs >= 0) & (obs <= unit.n) & (obs == np.round(obs))):
            raise EvidenceError(
                f"binomial variable {unit.var} observed outside [0, {unit.n}]"
            )
    else:
        if not np.all(np.isfinite(obs)):
            raise EvidenceError(f"variable {unit.var} observed non-finite")


def _log_sigmoid(t: ad.Node) -> ad.Node:
    return ad.neg(ad.softplus(ad.neg(t)))


def _leaf_log_marginal(unit, ev: Evidence, B: int) -> ad.Node:
    """Log-likelihood contribution of a discrete input unit, missing -> 0."""
    v = unit.var
    m = ev.mask[:, v]
    if not np.any(m):
        return ad.constant(np.zeros(B))
    x = np.where(m, ev.values[:, v], 0.0)
    _validate_observed(unit, ev.values[:, v], m)
    mf = m.astype(ad.DTYPE)
    logit = ad.broadcast_to(ad.reshape(unit.logit, (1,)), (B,))
    if isinstance(unit, BernoulliUnit):
        lp = ad.sub(ad.mul(logit, x), ad.softplus(logit))
    else:  # Binomial
        n = unit.n
        log_binom = (
            gammaln(n + 1) - gammaln(x + 1) - gammaln(n - x + 1)
        )  # constant coefficient
        lp = ad.add(
            ad.constant(log_binom),
            ad.add(
                ad.mul(_log_sigmoid(logit), x),
                ad.mul(_log_sigmoid(ad.neg(logit)), n - x),
            ),
        )
    return ad.mul(lp, mf)


def _gaussian_log_density(unit: GaussianUnit, z_col: ad.Node, B: int) -> ad.Node:
    mean = ad.broadcast_to(ad.reshape(unit.mean, (1,)), (B,))
    log_std = ad.broadcast_to(ad.reshape(unit.log_std, (1,)), (B,))
    inv_std = ad.exp(ad.neg(log_std))
    u = ad.mul(ad.sub(z_col, mean), inv_std)
    return ad.neg(
        ad.add(ad.add(log_std, ad.mul(ad.square(u), 0.5)), 0.5 * LOG_2PI)
    )


def _z_column(ev: Evidence, circuit: Circuit, var: int, B: int) -> ad.Node:
    col = var - circuit.n_data
    z = ev.z_values
    if isinstance(z, ad.Node):
        if z.value.shape != (B, circuit.n_embed):
            raise EvidenceError(
                f"embedding evidence shape {z.value.shape} != ({B}, {circuit.n_embed})"
            )
        zc = ad.reshape(z, (B, circuit.n_embed))
        # slice one column via stack-free custom op
        return _take_column(zc, col)
    z = np.asarray(z, dtype=ad.DTYPE)
    if z.shape != (B, circuit.n_embed):
        raise EvidenceError(
            f"embedding evidence shape {z.shape} != ({B}, {circuit.n_embed})"
        )
    if not np.all(np.isfinite(z)):
        raise EvidenceError("embedding evidence contains non-finite values")
    return ad.constant(z[:, col])


def _take_column(a: ad.Node, col: int) -> ad.Node:
    out = ad.Node(a.value[:, col], parents=(a,))

    def _bw(g):
        ga = np.zeros_like(a.value)
        ga[:, col] = g
        a.accumulate_grad(ga)

    out._backward = _bw if out.requires_grad else None
    return out


def _mask_rows(a: ad.Node, keep: np.ndarray, fill: float) -> ad.Node:
    """Replace rows where keep is False by a constant; grads pass kept rows."""
    keepcol = keep[:, None].astype(ad.DTYPE)
    out = ad.Node(np.where(keep[:, None], a.value, fill), parents=(a,))

    def _bw(g):
        a.accumulate_grad(g * keepcol)

    out._backward = _bw if out.requires_grad else None
    return out


def log_marginal(
    circuit: Circuit, ev: Evidence, cache: ForwardCache = None
) -> ad.Node:
    """Log-likelihood of the evidence with missing variables marginalized.

    Returns a (B,) node, differentiable w.r.t. circuit parameters and any
    embedding evidence supplied as a node.
    """
    B = ev.batch_size
    if ev.values.shape[1] != circuit.n_data:
        raise EvidenceError(
            f"evidence covers {ev.values.shape[1]} data variables, "
            f"circuit has {circuit.n_data}"
        )
    vals = {}
    for u in circuit.units:
        if isinstance(u, GaussianUnit):
            if ev.z_values is None:
                vals[u.uid] = ad.constant(np.zeros(B))
            else:
                zcol = _z_column(ev, circuit, u.var, B)
                vals[u.uid] = _gaussian_log_density(u, zcol, B)
        elif isinstance(u, (BernoulliUnit, BinomialUnit)):
            vals[u.uid] = _leaf_log_marginal(u, ev, B)
        elif isinstance(u, ProductUnit):
            if len(u.children) == 1:
                vals[u.uid] = vals[u.children[0].uid]
            else:
                vals[u.uid] = ad.reduce_sum(
                    ad.stack([vals[c.uid] for c in u.children], axis=1), axis=1
                )
        else:  # SumUnit
            gamma = (
                vals[u.children[0].uid]
                if len(u.children) == 1
                else ad.stack([vals[c.uid] for c in u.children], axis=1)
            )
            if len(u.children) == 1:
                gamma = ad.reshape(gamma, (B, 1))
            if cache is not None:
                cache.store(u.uid, gamma)
            lw = ad.broadcast_to(
                ad.reshape(u.log_weights(), (1, len(u.children))),
                (B, len(u.children)),
            )
            vals[u.uid] = ad.logsumexp(ad.add(gamma, lw), axis=1)
    return vals[circuit.root.uid]


def condition_weights(theta, gamma) -> np.ndarray:
    """Bayes-reweight mixture probabilities by child likelihoods.

    Operates on probability-space inputs; computed internally in log
    space.  A row with zero mass everywhere falls back to uniform and
    bumps the degenerate-conditionals diagnostic counter.
    """
    theta = np.asarray(theta, dtype=ad.DTYPE)
    gamma = np.asarray(gamma, dtype=ad.DTYPE)
    if np.any(gamma < 0) or np.any(theta < 0):
        raise EvidenceError("condition_weights needs non-negative inputs")
    with np.errstate(divide="ignore"):
        s = np.log(np.where(theta > 0, theta, 1.0)) + np.log(
            np.where(gamma > 0, gamma, 1.0)
        )
    s = np.where((theta > 0) & (gamma > 0), s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    degenerate = ~np.isfinite(m[..., 0])
    if np.any(degenerate):
        DIAGNOSTICS["degenerate_conditionals"] += int(np.sum(degenerate))
        s = np.where(degenerate[..., None], 0.0, s)
        m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def simple_sample(theta: ad.Node, rng: np.random.Generator) -> ad.Node:
    """Straight-through one-hot sample from normalized probabilities.

    Forward value is an exact one-hot at argmax(log theta + Gumbel noise);
    the backward path is the identity into theta.  Works on (D,) or (B, D).
    """
    theta = ad.constant(theta)
    p = theta.value
    if p.shape[-1] < 1:
        raise EvidenceError("simple_sample needs at least one category")
    if np.any(np.sum(p, axis=-1) <= 0):
        raise EvidenceError("simple_sample received zero probability everywhere")
    u = rng.uniform(GUMBEL_EPS, 1.0 - GUMBEL_EPS, size=p.shape)
    g = -np.log(-np.log(u))
    with np.errstate(divide="ignore"):
        logits = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
    idx = np.argmax(logits + g, axis=-1)
    s = np.zeros_like(p)
    np.put_along_axis(s, np.expand_dims(idx, -1), 1.0, axis=-1)
    return ad.add(ad.constant(s - p), theta)


def _conditioned_probs(unit: SumUnit, gamma: ad.Node, B: int) -> ad.Node:
    """Posterior child probabilities exp(log theta + gamma - norm), (B, D)."""
    D = len(unit.children)
    lw = ad.broadcast_to(ad.reshape(unit.log_weights(), (1, D)), (B, D))
    s = ad.add(gamma, lw)
    row_max = np.max(s.value, axis=1)
    keep = np.isfinite(row_max)
    if not np.all(keep):
        DIAGNOSTICS["degenerate_conditionals"] += int(np.sum(~keep))
        s = _mask_rows(s, keep, 0.0)  # uniform fallback
    norm = ad.broadcast_to(ad.reshape(ad.logsumexp(s, axis=1), (B, 1)), (B, D))
    return ad.exp(ad.sub(s, norm))


def encode(circuit: Circuit, ev: Evidence, rng: np.random.Generator):
    """Sample embeddings from the data-conditional distribution.

    Runs the marginal forward pass (embeddings latent), then a root-to-leaf
    sampling pass with reweighted sum units.  Gaussian embedding leaves are
    drawn by reparameterization, so the returned (B, n_embed) node carries
    gradients into leaf and sum-weight parameters.  Data leaves are never
    sampled here.
    """
    if ev.z_values is not None:
        raise EvidenceError("encode expects latent embeddings")
    B = ev.batch_size
    cache = ForwardCache()
    ll = log_marginal(circuit, ev, cache)
    trace = SampleTrace(log_marginal=ll)
    z_vars = set(circuit.embedding_vars)
    memo = {}

    def down(unit):
        if unit.uid in memo:
            return memo[unit.uid]
        scope = circuit.scope_of(unit)
        if not (scope & z_vars):
            memo[unit.uid] = {}
            return {}
        if isinstance(unit, GaussianUnit):
            mean = ad.broadcast_to(ad.reshape(unit.mean, (1,)), (B,))
            log_std = ad.broadcast_to(ad.reshape(unit.log_std, (1,)), (B,))
            std = ad.exp(log_std)
            eps = rng.standard_normal(B)
            z = ad.add(mean, ad.mul(std, eps))
            kld = ad.sub(
                ad.mul(
                    ad.add(ad.add(ad.square(mean), ad.square(std)), -1.0), 0.5
                ),
                log_std,
            )
            res = {unit.var: PathLeaf(z, mean, log_std, kld)}
        elif isinstance(unit, ProductUnit):
            res = {}
            for c in unit.children:
                res.update(down(c))
        else:  # SumUnit
            s = simple_sample(_conditioned_probs(unit, cache[unit.uid], B), rng)
            trace.one_hots[unit.uid] = s
            parts = [down(c) for c in unit.children]
            res = {}
            for var in scope & z_vars:
                mixed = {}
                for name in ("z", "mean", "log_std", "kld"):
                    stacked = ad.stack(
                        [getattr(p[var], name) for p in parts], axis=1
                    )
                    mixed[name] = ad.reduce_sum(ad.mul(s, stacked), axis=1)
                res[var] = PathLeaf(**mixed)
        memo[unit.uid] = res
        return res

    path = down(circuit.root)
    trace.path = path
    z = ad.stack([path[v].z for v in circuit.embedding_vars], axis=1)
    return z, trace


def sample_joint(circuit: Circuit, rng: np.random.Generator, n: int):
    """Unconditional ancestral samples; returns (x, z) numpy arrays."""
    x = np.zeros((n, circuit.n_data), dtype=ad.DTYPE)
    z = np.zeros((n, circuit.n_embed), dtype=ad.DTYPE)

    def down(unit, rows):
        if rows.size == 0:
            return
        if isinstance(unit, BernoulliUnit):
            p = 1.0 / (1.0 + np.exp(-unit.logit.value))
            x[rows, unit.var] = (rng.random(rows.size) < p).astype(ad.DTYPE)
        elif isinstance(unit, BinomialUnit):
            p = 1.0 / (1.0 + np.exp(-unit.logit.value))
            x[rows, unit.var] = rng.binomial(unit.n, float(p), size=rows.size)
        elif isinstance(unit, GaussianUnit):
            z[rows, unit.var - circuit.n_data] = rng.normal(
                float(unit.mean.value), float(np.exp(unit.log_std.value)), rows.size
            )
        elif isinstance(unit, ProductUnit):
            for c in unit.children:
                down(c, rows)
        else:
            w = unit.weights()
            choice = rng.choice(len(w), size=rows.size, p=w)
            for d, c in enumerate(unit.children):
                down(c, rows[choice == d])

    down(circuit.root, np.arange(n))
    return x, z


def _leaf_max_log(unit, ev: Evidence, B: int) -> np.ndarray:
    """Max-product leaf value: observed density, or max over the support."""
    if isinstance(unit, GaussianUnit):
        # max density at the mean
        return np.full(B, -float(unit.log_std.value) - 0.5 * LOG_2PI)
    v = unit.var
    m = ev.mask[:, v]
    logit = float(unit.logit.value)
    if isinstance(unit, BernoulliUnit):
        lp1 = logit - np.logaddexp(0.0, logit)
        lp0 = -np.logaddexp(0.0, logit)
        obs = np.where(ev.values[:, v] == 1.0, lp1, lp0)
        return np.where(m, obs, np.maximum(lp0, lp1))
    n = unit.n
    ks = np.arange(n + 1)
    lp = (
        gammaln(n + 1)
        - gammaln(ks + 1)
        - gammaln(n - ks + 1)
        + ks * (logit - np.logaddexp(0.0, logit))
        + (n - ks) * (-np.logaddexp(0.0, logit))
    )
    obs = lp[np.clip(ev.values[:, v].astype(int), 0, n)]
    return np.where(m, obs, np.max(lp))


def _leaf_argmax(unit) -> float:
    """Support value maximizing the leaf likelihood (ties to the lowest)."""
    logit = float(unit.logit.value)
    if isinstance(unit, BernoulliUnit):
        return 1.0 if logit > 0 else 0.0
    n = unit.n
    ks = np.arange(n + 1)
    lp = (
        gammaln(n + 1)
        - gammaln(ks + 1)
        - gammaln(n - ks + 1)
        + ks * (logit - np.logaddexp(0.0, logit))
        + (n - ks) * (-np.logaddexp(0.0, logit))
    )
    return float(np.argmax(lp))


def _mpe_traverse(circuit: Circuit, ev: Evidence):
    """Max-product forward + argmax backward; fills (x_state, z_state)."""
    B = ev.batch_size
    vals, arg = {}, {}
    for u in circuit.units:
        if isinstance(u, (BernoulliUnit, BinomialUnit, GaussianUnit)):
            vals[u.uid] = _leaf_max_log(u, ev, B)
        elif isinstance(u, ProductUnit):
            vals[u.uid] = np.sum([vals[c.uid] for c in u.children], axis=0)
        else:
            with np.errstate(divide="ignore"):
                lw = np.log(u.weights())
            scores = np.stack([vals[c.uid] for c in u.children], axis=1) + lw
            arg[u.uid] = np.argmax(scores, axis=1)
            vals[u.uid] = np.max(scores, axis=1)
    x_state = np.where(ev.mask, ev.values, 0.0).astype(ad.DTYPE)
    z = np.zeros((B, circuit.n_embed), dtype=ad.DTYPE)

    def down(unit, rows):
        if rows.size == 0:
            return
        if isinstance(unit, GaussianUnit):
            z[rows, unit.var - circuit.n_data] = float(unit.mean.value)
        elif isinstance(unit, (BernoulliUnit, BinomialUnit)):
            miss = rows[~ev.mask[rows, unit.var]]
            if miss.size:
                x_state[miss, unit.var] = _leaf_argmax(unit)
        elif isinstance(unit, ProductUnit):
            for c in unit.children:
                down(c, rows)
        else:
            choice = arg[unit.uid][rows]
            for d, c in enumerate(unit.children):
                down(c, rows[choice == d])

    down(circuit.root, np.arange(B))
    return x_state, z


def mpe_encode(circuit: Circuit, ev: Evidence) -> np.ndarray:
    """Deterministic embedding via max-product traversal.

    Sum units take the max over weighted children; the backward traversal
    follows argmax branches and reads Gaussian leaf means.  Ties break to
    the lowest child index.
    """
    return _mpe_traverse(circuit, ev)[1]


def mpe_state(circuit: Circuit, ev: Evidence) -> np.ndarray:
    """Most probable completion of the data variables (max-product)."""
    return _mpe_traverse(circuit, ev)[0]


def log_embedding_marginal(circuit: Circuit, z) -> ad.Node:
    """log p(z) with every data variable marginalized out."""
    z = np.atleast_2d(np.asarray(z, dtype=ad.DTYPE))
    ev = Evidence.all_missing(z.shape[0], circuit.n_data, z_values=z)
    return log_marginal(circuit, ev)
