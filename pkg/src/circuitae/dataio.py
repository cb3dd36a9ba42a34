"""Dataset ingestion, checkpoint persistence, and artifact writers.

Formats: DEBD-style comma-separated binary tabular files, big-endian IDX
image/label files, a versioned checkpoint container (JSON header plus
little-endian float64 parameter blocks with a CRC32), line-delimited JSON
metrics logs, PGM/PPM sample grids, and minimal SVG line plots.  All file
writes go through a temp-file-then-rename helper so partial writes never
clobber existing artifacts.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import autodiff as ad
from .builders import config_from_dict
from .circuit import (
    BernoulliUnit,
    BinomialUnit,
    Circuit,
    GaussianUnit,
    ProductUnit,
    SumUnit,
)
from .nn import DecoderConfig, VAEModel, build_decoder

CHECKPOINT_MAGIC = "circuit-autoencoder-checkpoint"
CHECKPOINT_VERSION = 1


class DataIOError(ValueError):
    pass


@dataclass
class DatasetHandle:
    kind: str  # "binary_tabular" | "gray_image"
    x_train: np.ndarray  # (N, F) flat features
    x_test: np.ndarray
    labels_train: np.ndarray | None = None
    labels_test: np.ndarray | None = None
    image_shape: tuple | None = None  # (H, W) for images

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


# -- atomic writes ------------------------------------------------------


def atomic_write(path, data):
    """Write bytes or text to a temp file and rename into place."""
    path = os.fspath(path)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- DEBD-style tabular files -------------------------------------------


def load_debd(path) -> np.ndarray:
    """Parse a comma-separated binary matrix, one sample per line."""
    rows = []
    width = None
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise DataIOError(
                    f"{path}:{lineno}: expected {width} columns, got {len(tokens)}"
                )
            row = []
            for col, tok in enumerate(tokens):
                if tok not in ("0", "1"):
                    raise DataIOError(
                        f"{path}:{lineno}: column {col + 1}: "
                        f"non-binary token {tok!r}"
                    )
                row.append(float(tok))
            rows.append(row)
    if not rows:
        raise DataIOError(f"{path}: empty dataset file")
    return np.asarray(rows, dtype=ad.DTYPE)


def load_labels(path) -> np.ndarray:
    """One integer label per line."""
    labels = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise DataIOError(
                    f"{path}:{lineno}: non-integer label {line!r}"
                ) from None
    if not labels:
        raise DataIOError(f"{path}: empty label file")
    return np.asarray(labels, dtype=np.int64)


# -- IDX files ----------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


def load_idx(path) -> np.ndarray:
    """Read a big-endian IDX array (MNIST-family container)."""
    with open(path, "rb") as f:
        header = f.read(4)
        if len(header) < 4 or header[0] != 0 or header[1] != 0:
            raise DataIOError(f"{path}: bad IDX magic {header!r}")
        code, ndim = header[2], header[3]
        if code not in _IDX_DTYPES:
            raise DataIOError(f"{path}: unknown IDX type code 0x{code:02x}")
        dims_raw = f.read(4 * ndim)
        if len(dims_raw) != 4 * ndim:
            raise DataIOError(f"{path}: truncated IDX dimension header")
        dims = struct.unpack(f">{ndim}I", dims_raw)
        dtype = np.dtype(_IDX_DTYPES[code])
        count = int(np.prod(dims, dtype=np.int64))
        payload = f.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise DataIOError(
                f"{path}: truncated IDX payload "
                f"({len(payload)} of {count * dtype.itemsize} bytes)"
            )
        return np.frombuffer(payload, dtype=dtype).reshape(dims)


def save_idx(path, array: np.ndarray):
    """Write a uint8 array in IDX layout (atomic)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    out = bytearray()
    out += struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    out += struct.pack(f">{array.ndim}I", *array.shape)
    out += array.tobytes()
    atomic_write(path, bytes(out))


def load_idx_dataset(images_path, labels_path=None):
    """Images plus optionally index-aligned labels."""
    images = load_idx(images_path)
    if images.ndim != 3:
        raise DataIOError(f"{images_path}: expected (N, H, W) image array")
    labels = None
    if labels_path is not None:
        labels = load_idx(labels_path).astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise DataIOError(
                f"{labels_path}: {labels.shape[0]} labels for "
                f"{images.shape[0]} images"
            )
    return images, labels


# -- bundled synthetic datasets -----------------------------------------


def _bundled(name: str):
    return resources.files("circuitae").joinpath("data").joinpath(name)


def load_bundled_images() -> DatasetHandle:
    """Two-cluster 8x8 binary image dataset shipped with the package."""
    with resources.as_file(_bundled("synth8x8")) as d:
        xtr, ytr = load_idx_dataset(d / "train-images.idx", d / "train-labels.idx")
        xte, yte = load_idx_dataset(d / "test-images.idx", d / "test-labels.idx")
    H, W = xtr.shape[1:]
    return DatasetHandle(
        "gray_image",
        xtr.reshape(len(xtr), -1).astype(ad.DTYPE),
        xte.reshape(len(xte), -1).astype(ad.DTYPE),
        ytr,
        yte,
        image_shape=(H, W),
    )


def load_bundled_ood_images() -> np.ndarray:
    """Disjoint-support image family for OOD evaluation, flattened."""
    with resources.as_file(_bundled("synth8x8")) as d:
        x = load_idx(d / "ood-images.idx")
    return x.reshape(len(x), -1).astype(ad.DTYPE)


def load_bundled_tabular() -> DatasetHandle:
    """16-variable binary mixture dataset in DEBD file layout."""
    with resources.as_file(_bundled("tab16")) as d:
        xtr = load_debd(d / "tab16.train.data")
        xte = load_debd(d / "tab16.test.data")
        ytr = load_labels(d / "tab16.train.labels")
        yte = load_labels(d / "tab16.test.labels")
    return DatasetHandle("binary_tabular", xtr, xte, ytr, yte)


# -- checkpoints --------------------------------------------------------


def _unit_record(u):
    if isinstance(u, BernoulliUnit):
        return {"t": "ber", "var": u.var}
    if isinstance(u, BinomialUnit):
        return {"t": "bin", "var": u.var, "n": u.n}
    if isinstance(u, GaussianUnit):
        return {"t": "gau", "var": u.var}
    if isinstance(u, SumUnit):
        return {"t": "sum", "ch": [c.uid for c in u.children]}
    if isinstance(u, ProductUnit):
        return {"t": "prd", "ch": [c.uid for c in u.children]}
    raise DataIOError(f"unknown unit type {type(u).__name__}")


def _unit_from_record(rec, units):
    t = rec["t"]
    uid = len(units)
    if t == "ber":
        return BernoulliUnit(uid, rec["var"])
    if t == "bin":
        return BinomialUnit(uid, rec["var"], rec["n"])
    if t == "gau":
        return GaussianUnit(uid, rec["var"])
    if t == "sum":
        return SumUnit(uid, [units[c] for c in rec["ch"]])
    if t == "prd":
        return ProductUnit(uid, [units[c] for c in rec["ch"]])
    raise DataIOError(f"unknown unit record type {t!r}")


def _flatten_params(params):
    return np.concatenate([p.value.reshape(-1) for p in params]) if params \
        else np.zeros(0)


def _scatter_params(params, flat):
    off = 0
    for p in params:
        n = p.value.size
        p.value[...] = flat[off:off + n].reshape(p.value.shape)
        off += n
    if off != flat.size:
        raise DataIOError(
            f"parameter block size {flat.size} does not match manifest {off}"
        )


def save_checkpoint(path, circuit: Circuit = None, decoder_cfg=None,
                    decoder=None, vae=None, extra=None):
    """JSON header + little-endian float64 blocks, CRC32 verified."""
    blocks = {}
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "extra": extra or {},
    }
    if circuit is not None:
        blocks["circuit"] = _flatten_params(circuit.parameter_views())
        header.update(
            n_data=circuit.n_data,
            n_embed=circuit.n_embed,
            builder=circuit.metadata,
            units=[_unit_record(u) for u in circuit.units],
            root=circuit.root.uid,
        )
    if decoder is not None:
        if decoder_cfg is None:
            raise DataIOError("decoder checkpointing requires its config")
        header["decoder"] = decoder_cfg.to_dict()
        blocks["decoder"] = _flatten_params(decoder.params())
    if vae is not None:
        header["vae_decoder"] = vae.decoder_cfg.to_dict()
        header["vae_encoder_hidden"] = [
            layer.weight.value.shape[1] for layer in vae.enc_layers
        ]
        blocks["vae"] = _flatten_params(vae.params())
    blob = b""
    manifest = []
    for name, flat in blocks.items():
        raw = flat.astype("<f8").tobytes()
        manifest.append(
            {"name": name, "count": int(flat.size), "crc32": zlib.crc32(raw)}
        )
        blob += raw
    header["blocks"] = manifest
    head = json.dumps(header, indent=1).encode()
    atomic_write(path, head + b"\n\x00" + blob)


def _read_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n\x00")
    if sep < 0:
        raise DataIOError(f"{path}: missing checkpoint header separator")
    try:
        header = json.loads(raw[:sep].decode())
    except json.JSONDecodeError as e:
        raise DataIOError(f"{path}: corrupt checkpoint header: {e}") from None
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise DataIOError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataIOError(
            f"{path}: unsupported checkpoint version {header.get('version')}"
        )
    blob = raw[sep + 2:]
    blocks = {}
    off = 0
    for rec in header["blocks"]:
        nbytes = rec["count"] * 8
        chunk = blob[off:off + nbytes]
        if len(chunk) != nbytes:
            raise DataIOError(f"{path}: truncated block {rec['name']!r}")
        if zlib.crc32(chunk) != rec["crc32"]:
            raise DataIOError(f"{path}: checksum mismatch in {rec['name']!r}")
        blocks[rec["name"]] = np.frombuffer(chunk, dtype="<f8").astype(ad.DTYPE)
        off += nbytes
    return header, blocks


def load_checkpoint(path, expect_builder=None):
    """Rebuild models from a checkpoint; parameters load bitwise.

    Returns a dict with keys among {"circuit", "decoder", "decoder_cfg",
    "vae", "extra"}.
    """
    header, blocks = _read_checkpoint(path)
    out = {"extra": header.get("extra", {})}
    if "units" in header:
        if expect_builder is not None and header["builder"] != expect_builder:
            raise DataIOError(
                f"{path}: checkpoint builder config {header['builder']} does "
                f"not match expected {expect_builder}"
            )
        units = []
        for rec in header["units"]:
            units.append(_unit_from_record(rec, units))
        circuit = Circuit(
            units,
            units[header["root"]],
            header["n_data"],
            header["n_embed"],
            metadata=header["builder"],
        )
        _scatter_params(circuit.parameter_views(), blocks["circuit"])
        out["circuit"] = circuit
    elif expect_builder is not None:
        raise DataIOError(f"{path}: checkpoint contains no circuit")
    rng = np.random.default_rng(0)  # shapes only; values overwritten below
    if "decoder" in header:
        cfg = DecoderConfig.from_dict(header["decoder"])
        decoder = build_decoder(cfg, rng)
        _scatter_params(decoder.params(), blocks["decoder"])
        out["decoder"] = decoder
        out["decoder_cfg"] = cfg
    if "vae_decoder" in header:
        vae = VAEModel(
            DecoderConfig.from_dict(header["vae_decoder"]),
            rng,
            encoder_hidden=header["vae_encoder_hidden"],
        )
        _scatter_params(vae.params(), blocks["vae"])
        out["vae"] = vae
    return out


# -- metrics logs and plots ---------------------------------------------


def write_metrics(path, history: list):
    atomic_write(
        path, "".join(json.dumps(row, sort_keys=True) + "\n" for row in history)
    )


def read_metrics(path) -> list:
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM of a single grayscale image in [0, 255]."""
    img = np.clip(np.asarray(image), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise DataIOError("PGM writer expects a 2-D image")
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    atomic_write(path, head + img.tobytes())


def write_ppm(path, image: np.ndarray):
    """8-bit binary PPM of an (H, W, 3) image in [0, 255]."""
    img = np.clip(np.asarray(image), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataIOError("PPM writer expects an (H, W, 3) image")
    head = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    atomic_write(path, head + img.tobytes())


def sample_grid(images: np.ndarray, rows: int, cols: int, pad: int = 1):
    """Tile (N, H, W) images into one grid image with white separators."""
    images = np.asarray(images)
    N, H, W = images.shape
    grid = np.full(
        (rows * H + (rows - 1) * pad, cols * W + (cols - 1) * pad), 255.0
    )
    for i in range(min(N, rows * cols)):
        r, c = divmod(i, cols)
        y, x = r * (H + pad), c * (W + pad)
        grid[y:y + H, x:x + W] = images[i]
    return grid


def write_svg_lineplot(path, series: dict, title="", xlabel="", ylabel="",
                       width=640, height=400):
    """Minimal multi-series SVG line plot; series maps name -> (xs, ys)."""
    margin = 50
    pts = [(np.asarray(xs, float), np.asarray(ys, float))
           for xs, ys in series.values()]
    if not pts:
        raise DataIOError("no series to plot")
    xmin = min(p[0].min() for p in pts)
    xmax = max(p[0].max() for p in pts)
    ymin = min(p[1].min() for p in pts)
    ymax = max(p[1].max() for p in pts)
    xspan = (xmax - xmin) or 1.0
    yspan = (ymax - ymin) or 1.0

    def sx(x):
        return margin + (x - xmin) / xspan * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - ymin) / yspan * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2})">{ylabel}</text>',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="#888"/>',
    ]
    for k, (label, (xs, ys)) in enumerate(series.items()):
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        path_d = " ".join(
            f"{'M' if i == 0 else 'L'}{sx(x):.1f},{sy(y):.1f}"
            for i, (x, y) in enumerate(zip(xs, ys))
        )
        color = colors[k % len(colors)]
        parts.append(
            f'<path d="{path_d}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 16 * k + 12}" '
            f'font-size="11" fill="{color}">{label}</text>'
        )
    parts.append(
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10">'
        f"{xmin:.3g}</text>"
    )
    parts.append(
        f'<text x="{width - margin}" y="{height - margin + 16}" '
        f'text-anchor="end" font-size="10">{xmax:.3g}</text>'
    )
    parts.append(
        f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end" '
        f'font-size="10">{ymin:.3g}</text>'
    )
    parts.append(
        f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end" '
        f'font-size="10">{ymax:.3g}</text>'
    )
    parts.append("</svg>")
    atomic_write(path, "\n".join(parts))
