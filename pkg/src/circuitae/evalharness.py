"""Corruption-robustness evaluation for autoencoding models.

Provides MCAR/MAR corruption generators, reconstruction metrics (MSE and
windowed SSIM), a softmax-regression downstream probe, robustness sweeps
over corruption levels, and embedding-likelihood OOD scoring.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .inference import Evidence, encode, log_embedding_marginal, mpe_encode
from .nn import zero_impute
from .training import schedule_factor

MAR_PATTERNS = (
    "left-band",
    "right-band",
    "top-band",
    "bottom-band",
    "center-square",
    "border-frame",
    "horizontal-bands",
    "vertical-bands",
)

DEFAULT_LEVELS = tuple(round(0.05 * i, 2) for i in range(20))  # 0.00 .. 0.95


class EvalError(ValueError):
    pass


def _n_workers(n_items: int) -> int:
    cap = int(os.environ.get("APC_THREADS", "0") or 0)
    if cap <= 0:
        cap = min(os.cpu_count() or 1, 8)
    return max(1, min(cap, n_items))


def _pool_map(fn, items):
    items = list(items)
    workers = _n_workers(len(items))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- corruption ---------------------------------------------------------


@dataclass
class CorruptionSpec:
    kind: str  # "mcar" | "mar"
    p: float = 0.0  # mcar fraction
    pattern: str = "left-band"
    severity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mcar", "mar"):
            raise EvalError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "mcar" and not 0.0 <= self.p <= 1.0:
            raise EvalError("mcar fraction must be in [0, 1]")
        if self.kind == "mar":
            if self.pattern not in MAR_PATTERNS:
                raise EvalError(f"unknown MAR pattern {self.pattern!r}")
            if not 0.0 <= self.severity <= 1.0:
                raise EvalError("MAR severity must be in [0, 1]")


def _banded_order(n: int) -> np.ndarray:
    """Evens first, then odds, so prefixes form alternating bands."""
    return np.concatenate([np.arange(0, n, 2), np.arange(1, n, 2)])


def mar_mask(shape, pattern: str, severity: float) -> np.ndarray:
    """Deterministic missing-mask (True = missing) for a 2-D shape.

    The masked area fraction grows linearly with severity for every
    pattern.
    """
    H, W = shape
    miss = np.zeros((H, W), dtype=bool)
    if severity <= 0:
        return miss
    if pattern == "left-band":
        miss[:, : int(round(severity * W))] = True
    elif pattern == "right-band":
        k = int(round(severity * W))
        if k:
            miss[:, W - k:] = True
    elif pattern == "top-band":
        miss[: int(round(severity * H)), :] = True
    elif pattern == "bottom-band":
        k = int(round(severity * H))
        if k:
            miss[H - k:, :] = True
    elif pattern == "center-square":
        side = int(round(np.sqrt(severity * H * W)))
        side = min(side, H, W)
        r0, c0 = (H - side) // 2, (W - side) // 2
        miss[r0:r0 + side, c0:c0 + side] = True
    elif pattern == "border-frame":
        target = severity * H * W
        for t in range(0, (min(H, W) + 1) // 2 + 1):
            inner = max(H - 2 * t, 0) * max(W - 2 * t, 0)
            if H * W - inner >= target - 1e-9:
                break
        miss[:] = True
        if H - 2 * t > 0 and W - 2 * t > 0:
            miss[t:H - t, t:W - t] = False
    elif pattern == "horizontal-bands":
        rows = _banded_order(H)[: int(round(severity * H))]
        miss[rows, :] = True
    elif pattern == "vertical-bands":
        cols = _banded_order(W)[: int(round(severity * W))]
        miss[:, cols] = True
    else:
        raise EvalError(f"unknown MAR pattern {pattern!r}")
    return miss


def corrupt(x: np.ndarray, spec: CorruptionSpec, image_shape=None) -> Evidence:
    """Turn complete data (B, F) into Evidence with missing entries.

    MCAR masks each entry independently using the spec seed; MAR applies
    the same deterministic pattern mask to every row (image_shape required
    for 2-D patterns on flattened rows; defaults to (1, F)).
    """
    x = np.atleast_2d(np.asarray(x, dtype=ad.DTYPE))
    B, F = x.shape
    if spec.kind == "mcar":
        rng = np.random.default_rng(spec.seed)
        observed = rng.random((B, F)) >= spec.p
    else:
        shape = image_shape if image_shape is not None else (1, F)
        if shape[0] * shape[1] != F:
            raise EvalError(f"image shape {shape} does not match {F} features")
        miss = mar_mask(shape, spec.pattern, spec.severity).reshape(-1)
        observed = np.broadcast_to(~miss, (B, F)).copy()
    return Evidence(x, observed)


# -- metrics ------------------------------------------------------------


def mse(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Mean squared error against the full uncorrupted ground truth."""
    x_hat, x = np.asarray(x_hat, float), np.asarray(x, float)
    if x_hat.shape != x.shape:
        raise EvalError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    return float(np.mean((x_hat - x) ** 2))


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode 2-D correlation with the window kernel."""
    view = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(view, kernel, axes=((2, 3), (0, 1)))


def ssim(a: np.ndarray, b: np.ndarray, data_range=1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 2:
        raise EvalError("ssim expects two 2-D images of equal shape")
    win = _gaussian_window()
    if min(a.shape) < win.shape[0]:
        raise EvalError(
            f"image {a.shape} smaller than {win.shape[0]}x{win.shape[0]} window"
        )
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _windowed(a, win), _windowed(b, win)
    saa = _windowed(a * a, win) - mu_a**2
    sbb = _windowed(b * b, win) - mu_b**2
    sab = _windowed(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def auroc(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Rank-based AUROC of positives scoring above negatives."""
    pos = np.asarray(scores_pos, float)
    neg = np.asarray(scores_neg, float)
    merged = np.concatenate([pos, neg])
    order = np.argsort(merged, kind="mergesort")
    ranks = np.empty_like(order, dtype=float)
    ranks[order] = np.arange(1, merged.size + 1)
    # average ranks over ties
    sorted_vals = merged[order]
    i = 0
    while i < merged.size:
        j = i
        while j + 1 < merged.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    r_pos = np.sum(ranks[: pos.size])
    return float(
        (r_pos - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size)
    )


# -- downstream probe ---------------------------------------------------


@dataclass
class ProbeConfig:
    iterations: int = 5000
    batch_size: int = 512
    lr: float = 0.05
    seed: int = 0


def downstream_probe(
    train_emb, train_labels, test_emb, test_labels, cfg: ProbeConfig = None
) -> float:
    """Multinomial logistic regression on frozen embeddings; test accuracy.

    Plain SGD with the shared warmup/decay schedule; inputs are
    standardized with train statistics.
    """
    cfg = cfg or ProbeConfig()
    xtr = np.asarray(train_emb, float)
    ytr = np.asarray(train_labels)
    xte = np.asarray(test_emb, float)
    yte = np.asarray(test_labels)
    classes = np.unique(ytr)
    if classes.size < 2:
        raise EvalError("probe needs at least two classes")
    remap = {c: i for i, c in enumerate(classes)}
    ytr = np.array([remap[c] for c in ytr])
    yte = np.array([remap.get(c, -1) for c in yte])
    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0) + 1e-8
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd
    rng = np.random.default_rng(cfg.seed)
    K, Fdim = classes.size, xtr.shape[1]
    W = np.zeros((Fdim, K))
    b = np.zeros(K)
    n = xtr.shape[0]
    for step in range(cfg.iterations):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        xb, yb = xtr[idx], ytr[idx]
        logits = xb @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(yb)), yb] -= 1.0
        lr = cfg.lr * schedule_factor(step, cfg.iterations)
        W -= lr * (xb.T @ p) / len(yb)
        b -= lr * p.mean(axis=0)
    pred = np.argmax(xte @ W + b, axis=1)
    return float(np.mean(pred == yte))


# -- model adapters -----------------------------------------------------


class APCEvalModel:
    """Circuit encoder + neural decoder; missing inputs marginalized.

    mode "mpe" embeds deterministically via max-product traversal; mode
    "sample" draws from the conditioned circuit.
    """

    def __init__(self, circuit, decoder, scale: float = 1.0, mode="mpe"):
        if mode not in ("mpe", "sample"):
            raise EvalError(f"unknown encoding mode {mode!r}")
        self.circuit = circuit
        self.decoder = decoder
        self.scale = scale
        self.mode = mode

    def embed(self, ev: Evidence, rng) -> np.ndarray:
        if self.mode == "mpe":
            return mpe_encode(self.circuit, ev)
        z, _ = encode(self.circuit, ev, rng)
        return z.value

    def reconstruct(self, ev: Evidence, rng) -> np.ndarray:
        return self.decoder(ad.constant(self.embed(ev, rng))).value


class VAEEvalModel:
    """Neural encoder with constant-zero imputation of missing inputs."""

    def __init__(self, vae, scale: float = 1.0):
        self.vae = vae
        self.scale = scale

    def _inputs(self, ev: Evidence) -> np.ndarray:
        return zero_impute(ev.values, ev.mask) / self.scale

    def reconstruct(self, ev: Evidence, rng) -> np.ndarray:
        return self.vae.decode(self.vae.encode_mean(self._inputs(ev))).value

    def embed(self, ev: Evidence, rng) -> np.ndarray:
        return self.vae.encode_mean(self._inputs(ev))


# -- sweeps -------------------------------------------------------------


@dataclass
class SweepResult:
    levels: list
    seeds: list
    mse_mean: list = field(default_factory=list)  # per level
    mse_std: list = field(default_factory=list)
    ssim_mean: list = field(default_factory=list)
    ssim_std: list = field(default_factory=list)
    probe_levels: list = field(default_factory=list)
    probe_mean: list = field(default_factory=list)
    probe_std: list = field(default_factory=list)

    @property
    def mse_auc(self) -> float:
        """Area under the MSE-vs-level curve (trapezoid rule)."""
        return float(np.trapezoid(self.mse_mean, self.levels))

    @property
    def mse_average(self) -> float:
        return float(np.mean(self.mse_mean))

    def table(self) -> str:
        lines = ["level\tmse_mean\tmse_std" + ("\tssim_mean\tssim_std"
                                               if self.ssim_mean else "")]
        for i, lv in enumerate(self.levels):
            row = f"{lv:.2f}\t{self.mse_mean[i]:.6f}\t{self.mse_std[i]:.6f}"
            if self.ssim_mean:
                row += f"\t{self.ssim_mean[i]:.6f}\t{self.ssim_std[i]:.6f}"
            lines.append(row)
        if self.probe_levels:
            lines.append("probe_level\tacc_mean\tacc_std")
            for i, lv in enumerate(self.probe_levels):
                lines.append(
                    f"{lv:.2f}\t{self.probe_mean[i]:.4f}\t{self.probe_std[i]:.4f}"
                )
        lines.append(f"aggregate_mse_mean\t{self.mse_average:.6f}")
        lines.append(f"mse_auc\t{self.mse_auc:.6f}")
        return "\n".join(lines) + "\n"


def robustness_sweep(
    model,
    x_test: np.ndarray,
    levels=DEFAULT_LEVELS,
    seeds=(0, 1, 2, 3, 4),
    image_shape=None,
    with_ssim=False,
    probe_levels=(),
    probe_data=None,  # (x_train, labels_train, labels_test)
    kind="mcar",
    pattern="left-band",
) -> SweepResult:
    """MSE (and optional SSIM / probe accuracy) across corruption levels.

    Reconstructions are judged against the full uncorrupted ground truth
    normalized to [0, 1].  (level, seed) cells evaluate in parallel,
    capped by the APC_THREADS environment variable.
    """
    x_test = np.asarray(x_test, dtype=ad.DTYPE)
    target = x_test / model.scale
    result = SweepResult(levels=list(levels), seeds=list(seeds))

    def spec_for(level, seed):
        if kind == "mcar":
            return CorruptionSpec("mcar", p=level, seed=seed)
        return CorruptionSpec("mar", pattern=pattern, severity=level, seed=seed)

    def cell(args):
        level, seed = args
        ev = corrupt(x_test, spec_for(level, seed), image_shape=image_shape)
        rng = np.random.default_rng(seed)
        x_hat = model.reconstruct(ev, rng)
        out = {"mse": mse(x_hat, target)}
        if with_ssim:
            H, W = image_shape
            vals = [
                ssim(x_hat[i].reshape(H, W), target[i].reshape(H, W))
                for i in range(len(target))
            ]
            out["ssim"] = float(np.mean(vals))
        return out

    cells = [(lv, sd) for lv in levels for sd in seeds]
    flat = _pool_map(cell, cells)
    per_level = {lv: [] for lv in levels}
    for (lv, _), res in zip(cells, flat):
        per_level[lv].append(res)
    for lv in levels:
        ms = [r["mse"] for r in per_level[lv]]
        result.mse_mean.append(float(np.mean(ms)))
        result.mse_std.append(float(np.std(ms)))
        if with_ssim:
            ss = [r["ssim"] for r in per_level[lv]]
            result.ssim_mean.append(float(np.mean(ss)))
            result.ssim_std.append(float(np.std(ss)))

    if probe_levels:
        if probe_data is None:
            raise EvalError("probe_levels given without probe_data")
        x_train, y_train, y_test = probe_data

        def probe_cell(args):
            level, seed = args
            rng = np.random.default_rng(seed)
            emb_tr = model.embed(
                corrupt(x_train, spec_for(level, seed), image_shape), rng
            )
            emb_te = model.embed(
                corrupt(x_test, spec_for(level, seed + 1), image_shape), rng
            )
            return downstream_probe(
                emb_tr, y_train, emb_te, y_test, ProbeConfig(seed=seed)
            )

        pcells = [(lv, sd) for lv in probe_levels for sd in seeds]
        pflat = _pool_map(probe_cell, pcells)
        per_plevel = {lv: [] for lv in probe_levels}
        for (lv, _), acc in zip(pcells, pflat):
            per_plevel[lv].append(acc)
        result.probe_levels = list(probe_levels)
        for lv in probe_levels:
            result.probe_mean.append(float(np.mean(per_plevel[lv])))
            result.probe_std.append(float(np.std(per_plevel[lv])))
    return result


# -- out-of-distribution scoring ----------------------------------------


def embedding_scores(circuit, x: np.ndarray, rng) -> np.ndarray:
    """log p(z) of embeddings sampled from the conditioned circuit."""
    z, _ = encode(circuit, Evidence.complete(x), rng)
    return log_embedding_marginal(circuit, z.value).value


def ood_histogram(circuit, x_in: np.ndarray, x_ood: np.ndarray, rng,
                  bins: int = 30) -> dict:
    """Embedding-likelihood histograms with AUROC separation."""
    s_in = embedding_scores(circuit, x_in, rng)
    s_out = embedding_scores(circuit, x_ood, rng)
    lo = min(s_in.min(), s_out.min())
    hi = max(s_in.max(), s_out.max())
    edges = np.linspace(lo, hi, bins + 1)
    return {
        "scores_in": s_in,
        "scores_ood": s_out,
        "edges": edges,
        "hist_in": np.histogram(s_in, bins=edges)[0],
        "hist_ood": np.histogram(s_out, bins=edges)[0],
        "auroc": auroc(s_in, s_out),
    }
