"""Shared test fixtures: oracles and random circuit generators.

The enumeration oracle evaluates circuits recursively in probability
space, independent of the log-domain inference code, so the two routes
can be compared.  The finite-difference checker provides the gradient
oracle for all differentiable ops.
"""

import numpy as np
import pytest

from circuitae import autodiff as ad
from circuitae.circuit import (
    BernoulliUnit,
    BinomialUnit,
    Circuit,
    GaussianUnit,
    ProductUnit,
    SumUnit,
)
from scipy.special import comb


# -- probability-space enumeration oracle --------------------------------


def leaf_prob(unit, value):
    """Probability (or density) of a single observed leaf value."""
    if isinstance(unit, BernoulliUnit):
        p = 1.0 / (1.0 + np.exp(-unit.logit.value))
        return float(p if value == 1 else 1.0 - p)
    if isinstance(unit, BinomialUnit):
        p = 1.0 / (1.0 + np.exp(-unit.logit.value))
        return float(
            comb(unit.n, value) * p**value * (1.0 - p) ** (unit.n - value)
        )
    if isinstance(unit, GaussianUnit):
        mu = float(unit.mean.value)
        sd = float(np.exp(unit.log_std.value))
        return float(
            np.exp(-0.5 * ((value - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        )
    raise TypeError(type(unit))


def unit_prob(unit, assignment):
    """Recursive circuit value for a (possibly partial) assignment.

    assignment maps var index to a value; unassigned leaves contribute 1
    (marginalized).
    """
    if isinstance(unit, (BernoulliUnit, BinomialUnit, GaussianUnit)):
        if unit.var not in assignment:
            return 1.0
        return leaf_prob(unit, assignment[unit.var])
    if isinstance(unit, ProductUnit):
        out = 1.0
        for c in unit.children:
            out *= unit_prob(c, assignment)
        return out
    if isinstance(unit, SumUnit):
        w = unit.weights()
        return float(
            sum(wi * unit_prob(c, assignment)
                for wi, c in zip(w, unit.children))
        )
    raise TypeError(type(unit))


def enumerate_marginal(circuit, assignment):
    """Sum of the root value over all completions of missing binary vars.

    Only data variables are enumerated; embedding variables must either be
    in the assignment (Gaussian density) or absent (marginalized exactly).
    """
    missing = [v for v in circuit.data_vars if v not in assignment]
    total = 0.0
    for bits in range(2 ** len(missing)):
        full = dict(assignment)
        for i, v in enumerate(missing):
            full[v] = (bits >> i) & 1
        total += unit_prob(circuit.root, full)
    return total


def unit_max_prob(unit, assignment):
    """Max-product circuit value (sum units take the max weighted child)."""
    if isinstance(unit, (BernoulliUnit, BinomialUnit, GaussianUnit)):
        return unit_prob(unit, assignment)
    if isinstance(unit, ProductUnit):
        out = 1.0
        for c in unit.children:
            out *= unit_max_prob(c, assignment)
        return out
    if isinstance(unit, SumUnit):
        w = unit.weights()
        return float(
            max(wi * unit_max_prob(c, assignment)
                for wi, c in zip(w, unit.children))
        )
    raise TypeError(type(unit))


def enumerate_mpe(circuit, assignment):
    """Exhaustive argmax of the max-product value over missing binary vars."""
    missing = [v for v in circuit.data_vars if v not in assignment]
    best, best_val = None, -1.0
    for bits in range(2 ** len(missing)):
        full = dict(assignment)
        for i, v in enumerate(missing):
            full[v] = (bits >> i) & 1
        val = unit_max_prob(circuit.root, full)
        if val > best_val:
            best_val, best = val, full
    return best, best_val


# -- random circuit generator -------------------------------------------


class _Factory:
    def __init__(self, rng):
        self.rng = rng
        self.units = []

    def add(self, cls, *args):
        u = cls(len(self.units), *args)
        self.units.append(u)
        return u


def random_circuit(rng, n_data, n_embed=0, max_channels=2):
    """Random smooth, decomposable circuit over binary data variables.

    Recursively splits the variable set; each region exposes a few mixture
    channels.  Gaussian leaves (random mean/log-std) serve embedding vars.
    """
    fac = _Factory(rng)
    n_vars = n_data + n_embed

    def leaf(var):
        if var < n_data:
            return fac.add(BernoulliUnit, var, rng.normal(0.0, 1.5))
        return fac.add(
            GaussianUnit, var, rng.normal(0.0, 1.0), rng.uniform(-0.7, 0.4)
        )

    def region(vars_):
        k = int(rng.integers(1, max_channels + 1))
        if len(vars_) == 1:
            return [leaf(vars_[0]) for _ in range(k)]
        cut = int(rng.integers(1, len(vars_)))
        left = region(vars_[:cut])
        right = region(vars_[cut:])
        prods = [
            fac.add(ProductUnit, [l, r]) for l in left for r in right
        ]
        if len(prods) == 1 and rng.random() < 0.3:
            return prods
        return [
            fac.add(SumUnit, prods, rng.normal(0.0, 1.0, len(prods)))
            for _ in range(k)
        ]

    order = list(rng.permutation(n_vars))
    top = region(order)
    if len(top) == 1:
        root = top[0]
    else:
        root = fac.add(SumUnit, top, rng.normal(0.0, 1.0, len(top)))
    c = Circuit(fac.units, root, n_data, n_embed)
    assert c.validate_structure().ok
    return c


# -- finite differences -------------------------------------------------


def finite_difference_check(build_loss, params, eps=1e-6):
    """Max relative error between autodiff and central-difference grads.

    build_loss() must be deterministic and return a scalar Node whose graph
    reads the given parameter Nodes.
    """
    loss = build_loss()
    for p in params:
        p.grad = None
    ad.backward(loss)
    worst = 0.0
    for p in params:
        grad = np.zeros_like(p.value) if p.grad is None else np.array(p.grad)
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(build_loss().value)
            flat[i] = orig - eps
            lo = float(build_loss().value)
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
