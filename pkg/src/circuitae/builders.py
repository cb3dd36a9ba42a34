"""Construction of encoder circuits.

Two builders are provided: a random-region structure for tabular data
(balanced binary splits of a permuted variable list) and a convolutional
style layerwise structure for images (non-overlapping 2x2 product windows
alternating with per-scope sum layers).  Embedding variables get Gaussian
leaves inserted at the lowest layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import (
    BernoulliUnit,
    BinomialUnit,
    Circuit,
    CircuitError,
    GaussianUnit,
    ProductUnit,
    SumUnit,
)

RAW_WEIGHT_INIT = 0.01
LOGIT_INIT = 0.1
GAUSS_MEAN_STD = 0.5


@dataclass
class TabularBuilderConfig:
    num_data_vars: int
    embedding_dim: int
    depth: int = 4
    repetitions: int = 1
    channels: int = 32

    def validate(self):
        if self.embedding_dim < 1 or self.depth < 1 or self.channels < 1:
            raise CircuitError("embedding_dim, depth, and channels must be >= 1")
        if self.num_data_vars + self.embedding_dim < 2:
            raise CircuitError("need at least two variables in total")
        if self.repetitions != 1:
            raise CircuitError("only a single repetition is supported")

    def to_dict(self):
        return {
            "builder": "tabular",
            "num_data_vars": self.num_data_vars,
            "embedding_dim": self.embedding_dim,
            "depth": self.depth,
            "repetitions": self.repetitions,
            "channels": self.channels,
        }


@dataclass
class ConvPCConfig:
    height: int
    width: int
    embedding_dim: int
    channels: int = 256
    min_sum_channels: int = 32
    binomial_n: int = 255

    def validate(self):
        for d in (self.height, self.width):
            if d < 2 or d & (d - 1):
                raise CircuitError("height and width must be powers of two >= 2")
        if self.embedding_dim < 1:
            raise CircuitError("embedding_dim must be >= 1")
        if self.embedding_dim > self.height * self.width:
            raise CircuitError("more embedding variables than pixels")

    def to_dict(self):
        return {
            "builder": "convpc",
            "height": self.height,
            "width": self.width,
            "embedding_dim": self.embedding_dim,
            "channels": self.channels,
            "min_sum_channels": self.min_sum_channels,
            "binomial_n": self.binomial_n,
        }


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("builder")
    if kind == "tabular":
        return TabularBuilderConfig(**d)
    if kind == "convpc":
        return ConvPCConfig(**d)
    raise CircuitError(f"unknown builder kind {kind!r}")


class _UnitFactory:
    """Allocates uids and per-family initial parameters."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.units = []

    def _add(self, u):
        self.units.append(u)
        return u

    def bernoulli(self, var):
        return self._add(
            BernoulliUnit(
                len(self.units), var, self.rng.uniform(-LOGIT_INIT, LOGIT_INIT)
            )
        )

    def binomial(self, var, n):
        return self._add(
            BinomialUnit(
                len(self.units), var, n, self.rng.uniform(-LOGIT_INIT, LOGIT_INIT)
            )
        )

    def gaussian(self, var):
        return self._add(
            GaussianUnit(
                len(self.units),
                var,
                self.rng.normal(0.0, GAUSS_MEAN_STD),
                0.0,
            )
        )

    def product(self, children):
        if len(children) == 1:
            return children[0]
        return self._add(ProductUnit(len(self.units), children))

    def sum(self, children):
        raw = self.rng.uniform(-RAW_WEIGHT_INIT, RAW_WEIGHT_INIT, len(children))
        return self._add(SumUnit(len(self.units), children, raw))


def _leaf(fac: _UnitFactory, var: int, n_data: int, binomial_n=None):
    if var >= n_data:
        return fac.gaussian(var)
    if binomial_n is not None:
        return fac.binomial(var, binomial_n)
    return fac.bernoulli(var)


def build_tabular(cfg: TabularBuilderConfig, rng: np.random.Generator) -> Circuit:
    """Random-region circuit: permuted variables, balanced binary splits.

    Each leaf region carries ``channels`` input units per variable (product
    combined per channel); each internal region mixes the cross products of
    its two child regions with ``channels`` sum units, and the root with a
    single sum.
    """
    cfg.validate()
    fac = _UnitFactory(rng)
    n_data = cfg.num_data_vars
    order = list(rng.permutation(n_data + cfg.embedding_dim))

    def region(vars_, depth, at_root):
        if len(vars_) == 1 or depth == 0:
            per_var = [
                [
                    _leaf(fac, int(v), n_data)
                    for _ in range(cfg.channels)
                ]
                for v in vars_
            ]
            return [
                fac.product([per_var[i][c] for i in range(len(vars_))])
                for c in range(cfg.channels)
            ]
        half = (len(vars_) + 1) // 2
        left = region(vars_[:half], depth - 1, False)
        right = region(vars_[half:], depth - 1, False)
        products = [fac.product([l, r]) for l in left for r in right]
        n_sums = 1 if at_root else cfg.channels
        return [fac.sum(products) for _ in range(n_sums)]

    top = region(order, cfg.depth, True)
    root = top[0] if len(top) == 1 else fac.sum(top)
    circuit = Circuit(
        fac.units, root, n_data, cfg.embedding_dim, metadata=cfg.to_dict()
    )
    report = circuit.validate_structure()
    if not report.ok:
        raise CircuitError(f"builder produced invalid circuit: {report.violations}")
    return circuit


def tabular_param_count(cfg: TabularBuilderConfig) -> int:
    """Closed-form trainable-scalar count of the tabular builder output."""
    cfg.validate()
    n_data, c = cfg.num_data_vars, cfg.channels
    total = n_data * c + cfg.embedding_dim * c * 2  # logits + gaussian pairs

    def walk(size, depth, at_root):
        nonlocal total
        if size == 1 or depth == 0:
            return
        half = (size + 1) // 2
        walk(half, depth - 1, False)
        walk(size - half, depth - 1, False)
        n_sums = 1 if at_root else c
        total += n_sums * c * c  # sum weights over cross products

    walk(n_data + cfg.embedding_dim, cfg.depth, True)
    return total


def build_convpc(cfg: ConvPCConfig, rng: np.random.Generator) -> Circuit:
    """Layerwise image circuit with channel-aligned 2x2 product windows.

    Pixel leaves are Binomial; each embedding variable is coupled to a
    distinct random pixel by local products at the lowest layer.  Sum layer
    widths halve per level down to ``min_sum_channels``.
    """
    cfg.validate()
    fac = _UnitFactory(rng)
    H, W, C = cfg.height, cfg.width, cfg.channels
    n_data = H * W
    coupled = rng.choice(n_data, size=cfg.embedding_dim, replace=False)
    pixel_to_embed = {int(p): n_data + j for j, p in enumerate(coupled)}

    # grid[h][w] is the list of channel units for that scope cell
    grid = []
    for h in range(H):
        row = []
        for w in range(W):
            pix = h * W + w
            cell = [fac.binomial(pix, cfg.binomial_n) for _ in range(C)]
            if pix in pixel_to_embed:
                zvar = pixel_to_embed[pix]
                cell = [
                    fac.product([b, fac.gaussian(zvar)]) for b in cell
                ]
            row.append(cell)
        grid.append(row)

    n_product_layers = 0
    channels = C
    while len(grid) > 1 or len(grid[0]) > 1:
        gh, gw = len(grid), len(grid[0])
        sh = 2 if gh > 1 else 1
        sw = 2 if gw > 1 else 1
        nh, nw = gh // sh, gw // sw
        last_layer = nh == 1 and nw == 1
        next_channels = (
            channels
            if channels <= cfg.min_sum_channels
            else max(channels // 2, cfg.min_sum_channels)
        )
        new_grid = []
        for h in range(nh):
            row = []
            for w in range(nw):
                window = [
                    grid[sh * h + a][sw * w + b]
                    for a in range(sh)
                    for b in range(sw)
                ]
                products = [
                    fac.product([cell[c] for cell in window])
                    for c in range(channels)
                ]
                n_sums = 1 if last_layer else next_channels
                row.append([fac.sum(products) for _ in range(n_sums)])
            new_grid.append(row)
        grid = new_grid
        channels = 1 if last_layer else next_channels
        n_product_layers += 1

    root = grid[0][0][0]
    meta = dict(cfg.to_dict(), n_product_layers=n_product_layers)
    circuit = Circuit(fac.units, root, n_data, cfg.embedding_dim, metadata=meta)
    report = circuit.validate_structure()
    if not report.ok:
        raise CircuitError(f"builder produced invalid circuit: {report.violations}")
    return circuit


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def pad_to_pow2(images: np.ndarray):
    """Zero-pad right/bottom to the next power of two per spatial dim.

    Accepts (H, W) or (B, H, W); returns (padded, observed_mask) where the
    mask is False on padded pixels so they can be marginalized instead of
    fitted.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    B, H, W = images.shape
    Hp, Wp = max(2, next_pow2(H)), max(2, next_pow2(W))
    padded = np.zeros((B, Hp, Wp), dtype=images.dtype)
    padded[:, :H, :W] = images
    mask = np.zeros((Hp, Wp), dtype=bool)
    mask[:H, :W] = True
    if single:
        return padded[0], mask
    return padded, mask
