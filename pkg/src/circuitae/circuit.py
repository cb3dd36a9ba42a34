"""Probabilistic circuit representation over data and embedding variables.

A circuit is a topologically ordered DAG of input, sum, and product units.
Data variables occupy indices [0, n_data) and embedding variables
[n_data, n_data + n_embed).  Sum weights are stored as unconstrained reals
and normalized with a softmax at evaluation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DATA = "data"
EMBEDDING = "embedding"

LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0


class CircuitError(ValueError):
    pass


class Unit:
    __slots__ = ("uid",)

    def __init__(self, uid: int):
        self.uid = uid


class BernoulliUnit(Unit):
    """Input unit over a binary data variable, parameterized by a logit."""

    __slots__ = ("var", "logit")
    family = "bernoulli"

    def __init__(self, uid, var: int, logit: float = 0.0):
        super().__init__(uid)
        self.var = var
        self.logit = ad.parameter(logit)


class BinomialUnit(Unit):
    """Input unit over an integer count variable in [0, n]."""

    __slots__ = ("var", "n", "logit")
    family = "binomial"

    def __init__(self, uid, var: int, n: int, logit: float = 0.0):
        super().__init__(uid)
        self.var = var
        self.n = int(n)
        self.logit = ad.parameter(logit)


class GaussianUnit(Unit):
    """Input unit with mean/log-std parameters; used for embedding variables."""

    __slots__ = ("var", "mean", "log_std")
    family = "gaussian"

    def __init__(self, uid, var: int, mean: float = 0.0, log_std: float = 0.0):
        super().__init__(uid)
        self.var = var
        self.mean = ad.parameter(mean)
        self.log_std = ad.parameter(log_std)


INPUT_FAMILIES = (BernoulliUnit, BinomialUnit, GaussianUnit)


class SumUnit(Unit):
    __slots__ = ("children", "raw_weights")

    def __init__(self, uid, children, raw_weights=None):
        super().__init__(uid)
        self.children = list(children)
        if not self.children:
            raise CircuitError("sum unit needs at least one child")
        if raw_weights is None:
            raw_weights = np.zeros(len(self.children))
        raw_weights = np.asarray(raw_weights, dtype=ad.DTYPE)
        if raw_weights.shape != (len(self.children),):
            raise CircuitError("one raw weight per child required")
        self.raw_weights = ad.parameter(raw_weights)

    def log_weights(self) -> ad.Node:
        """Log of softmax-normalized mixture weights, shape (D,)."""
        return ad.sub(self.raw_weights, ad.logsumexp(self.raw_weights))

    def weights(self) -> np.ndarray:
        w = self.raw_weights.value
        e = np.exp(w - np.max(w))
        return e / np.sum(e)


class ProductUnit(Unit):
    __slots__ = ("children",)

    def __init__(self, uid, children):
        super().__init__(uid)
        self.children = list(children)
        if not self.children:
            raise CircuitError("product unit needs at least one child")


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, uid: int, message: str):
        self.violations.append((uid, message))


class Circuit:
    """Topologically ordered unit list with the root last."""

    def __init__(self, units, root, n_data: int, n_embed: int, metadata=None):
        self.units = list(units)
        self.root = root
        self.n_data = int(n_data)
        self.n_embed = int(n_embed)
        self.metadata = dict(metadata or {})
        self._scopes = None

    @property
    def n_vars(self) -> int:
        return self.n_data + self.n_embed

    def role(self, var: int) -> str:
        return DATA if var < self.n_data else EMBEDDING

    @property
    def data_vars(self):
        return range(self.n_data)

    @property
    def embedding_vars(self):
        return range(self.n_data, self.n_vars)

    def input_units(self):
        return [u for u in self.units if isinstance(u, INPUT_FAMILIES)]

    # -- scopes ---------------------------------------------------------

    def scope_of(self, unit: Unit) -> frozenset:
        if self._scopes is None:
            self._compute_scopes()
        return self._scopes[unit.uid]

    def _compute_scopes(self):
        scopes = {}
        for u in self.units:
            if isinstance(u, INPUT_FAMILIES):
                scopes[u.uid] = frozenset((u.var,))
            else:
                for c in u.children:
                    if c.uid not in scopes:
                        raise CircuitError(
                            f"unit {u.uid}: child {c.uid} appears after its parent "
                            "(cyclic or not topologically ordered)"
                        )
                scopes[u.uid] = frozenset().union(
                    *(scopes[c.uid] for c in u.children)
                )
        self._scopes = scopes

    # -- validation -----------------------------------------------------

    def validate_structure(self) -> ValidationReport:
        """Check smoothness, decomposability, and scope coverage."""
        report = ValidationReport()
        self._compute_scopes()  # raises on cyclic/mis-ordered graphs
        for u in self.units:
            if isinstance(u, SumUnit):
                base = self.scope_of(u.children[0])
                for c in u.children[1:]:
                    if self.scope_of(c) != base:
                        report.add(
                            u.uid,
                            f"sum unit not smooth: child {c.uid} scope differs",
                        )
            elif isinstance(u, ProductUnit):
                seen = set()
                for c in u.children:
                    sc = self.scope_of(c)
                    if seen & sc:
                        report.add(
                            u.uid,
                            f"product unit not decomposable: child {c.uid} "
                            f"overlaps variables {sorted(seen & sc)}",
                        )
                    seen |= sc
            elif isinstance(u, GaussianUnit):
                if self.role(u.var) != EMBEDDING:
                    report.add(u.uid, "gaussian input unit on a data variable")
            elif isinstance(u, (BernoulliUnit, BinomialUnit)):
                if self.role(u.var) != DATA:
                    report.add(
                        u.uid, f"{u.family} input unit on an embedding variable"
                    )
        if self.units[-1] is not self.root:
            report.add(self.root.uid, "root is not last in topological order")
        root_scope = self.scope_of(self.root)
        if root_scope != frozenset(range(self.n_vars)):
            report.add(
                self.root.uid,
                f"root scope covers {len(root_scope)} of {self.n_vars} variables",
            )
        return report

    # -- parameters -----------------------------------------------------

    def parameter_views(self):
        """Every trainable node exactly once, in unit order."""
        params, seen = [], set()
        for u in self.units:
            if isinstance(u, SumUnit):
                nodes = (u.raw_weights,)
            elif isinstance(u, GaussianUnit):
                nodes = (u.mean, u.log_std)
            elif isinstance(u, (BernoulliUnit, BinomialUnit)):
                nodes = (u.logit,)
            else:
                nodes = ()
            for n in nodes:
                if id(n) not in seen:
                    seen.add(id(n))
                    params.append(n)
        return params

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameter_views())

    def clamp_input_params(self):
        """Clamp Gaussian log-stds in place; call after every optimizer step."""
        for u in self.units:
            if isinstance(u, GaussianUnit):
                np.clip(u.log_std.value, LOG_STD_MIN, LOG_STD_MAX, out=u.log_std.value)
