"""Command-line entry points.

Subcommands: train, train-vae, distill, eval, sample, ood, simple-bench,
validate.  Every subcommand takes --config (JSON experiment file) and
--seed; explicit flags override config fields.  Outputs (checkpoints,
metric logs, tables, plots, sample grids) land in --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, dataio, evalharness, nn, training
from .builders import (
    ConvPCConfig,
    TabularBuilderConfig,
    build_convpc,
    build_tabular,
    config_from_dict,
)
from .inference import Evidence, sample_joint
from .nn import DecoderConfig, VAEModel
from .training import TrainConfig


DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"source": "bundled-images"},
    "model": {"builder": None, "decoder": None, "vae_encoder_hidden": None},
    "train": TrainConfig().to_dict(),
    "eval": {
        "levels": list(evalharness.DEFAULT_LEVELS),
        "seeds": 5,
        "kind": "mcar",
        "pattern": "left-band",
        "with_ssim": False,
        "probe_levels": [],
    },
    "bench": {
        "dims": [64],
        "iterations": 1000,
        "seeds": 10,
        "lr": 0.01,
        "batch_size": 64,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        with open(path, "r") as f:
            cfg = _merge(cfg, json.load(f))
    return cfg


def serialize_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> dict:
    return json.loads(text)


def _load_dataset(data_cfg: dict) -> dataio.DatasetHandle:
    src = data_cfg.get("source", "bundled-images")
    if src == "bundled-images":
        return dataio.load_bundled_images()
    if src == "bundled-tabular":
        return dataio.load_bundled_tabular()
    if src == "debd":
        x = dataio.load_debd(data_cfg["path"])
        xte = dataio.load_debd(data_cfg.get("test_path", data_cfg["path"]))
        return dataio.DatasetHandle("binary_tabular", x, xte)
    if src == "idx":
        imgs, labels = dataio.load_idx_dataset(
            data_cfg["path"], data_cfg.get("labels_path")
        )
        te, lte = dataio.load_idx_dataset(
            data_cfg.get("test_path", data_cfg["path"]),
            data_cfg.get("test_labels_path"),
        )
        H, W = imgs.shape[1:]
        return dataio.DatasetHandle(
            "gray_image",
            imgs.reshape(len(imgs), -1).astype(float),
            te.reshape(len(te), -1).astype(float),
            labels,
            lte,
            image_shape=(H, W),
        )
    raise dataio.DataIOError(f"unknown data source {src!r}")


def _default_model_cfgs(cfg: dict, ds: dataio.DatasetHandle):
    """Fill in builder/decoder configs appropriate for the dataset."""
    model = cfg["model"]
    z = model.get("embedding_dim", 8)
    if model.get("builder") is None:
        if ds.kind == "gray_image":
            H, W = ds.image_shape
            model["builder"] = ConvPCConfig(
                height=H, width=W, embedding_dim=z, channels=4,
                min_sum_channels=2,
            ).to_dict()
        else:
            model["builder"] = TabularBuilderConfig(
                num_data_vars=ds.n_features, embedding_dim=z, depth=4,
                channels=4,
            ).to_dict()
    z = model["builder"]["embedding_dim"]
    if model.get("decoder") is None:
        model["decoder"] = DecoderConfig(
            kind="mlp", in_dim=z, out_dim=ds.n_features,
        ).to_dict()
    return model


def _build_models(cfg: dict, ds: dataio.DatasetHandle, rng):
    model = _default_model_cfgs(cfg, ds)
    bcfg = config_from_dict(model["builder"])
    circuit = (
        build_convpc(bcfg, rng)
        if isinstance(bcfg, ConvPCConfig)
        else build_tabular(bcfg, rng)
    )
    dcfg = DecoderConfig.from_dict(model["decoder"])
    decoder = nn.build_decoder(dcfg, rng)
    return circuit, dcfg, decoder


def _outdir(args, cmd):
    d = args.out or os.path.join("runs", cmd)
    os.makedirs(d, exist_ok=True)
    return d


def _train_cfg(cfg: dict, args) -> TrainConfig:
    tc = TrainConfig.from_dict(cfg["train"])
    if getattr(args, "iterations", None) is not None:
        tc.iterations = args.iterations
    if getattr(args, "batch_size", None) is not None:
        tc.batch_size = args.batch_size
    tc.seed = cfg["seed"]
    return tc


def cmd_train(cfg, args):
    out = _outdir(args, "train")
    ds = _load_dataset(cfg["data"])
    rng = np.random.default_rng(cfg["seed"])
    circuit, dcfg, decoder = _build_models(cfg, ds, rng)
    tc = _train_cfg(cfg, args)
    history = training.train_apc(tc, circuit, decoder, ds.x_train)
    dataio.write_metrics(os.path.join(out, "metrics.jsonl"), history)
    dataio.save_checkpoint(
        os.path.join(out, "model.ckpt"), circuit, decoder_cfg=dcfg,
        decoder=decoder, extra={"train": tc.to_dict()},
    )
    dataio.atomic_write(
        os.path.join(out, "config.json"), serialize_config(cfg)
    )
    print(f"trained {tc.iterations} steps; final losses "
          f"rec={history[-1]['rec']:.4f} kld={history[-1]['kld']:.4f} "
          f"nll={history[-1]['nll']:.4f}")
    return 0


def cmd_train_vae(cfg, args):
    out = _outdir(args, "train-vae")
    ds = _load_dataset(cfg["data"])
    rng = np.random.default_rng(cfg["seed"])
    model = _default_model_cfgs(cfg, ds)
    dcfg = DecoderConfig.from_dict(model["decoder"])
    vae = VAEModel(dcfg, rng, encoder_hidden=model.get("vae_encoder_hidden"))
    tc = _train_cfg(cfg, args)
    scale = float(cfg["data"].get("scale", 255.0 if ds.kind == "gray_image"
                                  else 1.0))
    history = training.train_vae(tc, vae, ds.x_train / scale)
    dataio.write_metrics(os.path.join(out, "metrics.jsonl"), history)
    dataio.save_checkpoint(
        os.path.join(out, "vae.ckpt"), vae=vae, extra={"train": tc.to_dict(),
                                                       "scale": scale},
    )
    print(f"trained VAE {tc.iterations} steps; final "
          f"rec={history[-1]['rec']:.4f} kld={history[-1]['kld']:.4f}")
    return 0


def cmd_distill(cfg, args):
    out = _outdir(args, "distill")
    loaded = dataio.load_checkpoint(args.teacher)
    if "vae" not in loaded:
        print("error: teacher checkpoint contains no VAE", file=sys.stderr)
        return 1
    teacher = loaded["vae"]
    ds = _load_dataset(cfg["data"])
    rng = np.random.default_rng(cfg["seed"])
    circuit, dcfg, decoder = _build_models(cfg, ds, rng)
    tc = _train_cfg(cfg, args)
    history = training.distill(teacher, circuit, decoder, tc)
    dataio.write_metrics(os.path.join(out, "metrics.jsonl"), history)
    dataio.save_checkpoint(
        os.path.join(out, "student.ckpt"), circuit, decoder_cfg=dcfg,
        decoder=decoder, extra={"train": tc.to_dict()},
    )
    print(f"distilled {len(history)} steps; final "
          f"rec={history[-1]['rec']:.4f}")
    return 0


def _parse_corruption(text: str):
    parts = text.split(":")
    if parts[0] == "sweep":
        return ("sweep",)
    if parts[0] == "mcar" and len(parts) == 2:
        return ("mcar", float(parts[1]))
    if parts[0] == "mar" and len(parts) == 3:
        return ("mar", parts[1], float(parts[2]))
    raise ValueError(
        f"bad corruption spec {text!r}; use mcar:<p>, mar:<pattern>:<sev>, "
        "or sweep"
    )


def cmd_eval(cfg, args):
    out = _outdir(args, "eval")
    loaded = dataio.load_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg["data"])
    if "circuit" in loaded and "decoder" in loaded:
        scale = training.data_scale(loaded["circuit"])
        model = evalharness.APCEvalModel(
            loaded["circuit"], loaded["decoder"], scale
        )
    elif "vae" in loaded:
        scale = float(loaded["extra"].get("scale", 1.0))
        model = evalharness.VAEEvalModel(loaded["vae"], scale)
    else:
        print("error: checkpoint has no evaluable model", file=sys.stderr)
        return 1
    ecfg = cfg["eval"]
    corr = _parse_corruption(args.corruption or "sweep")
    if corr[0] == "sweep":
        levels = ecfg["levels"]
        kind, pattern = ecfg["kind"], ecfg["pattern"]
    elif corr[0] == "mcar":
        levels, kind, pattern = [corr[1]], "mcar", ecfg["pattern"]
    else:
        levels, kind, pattern = [corr[2]], "mar", corr[1]
    res = evalharness.robustness_sweep(
        model,
        ds.x_test,
        levels=levels,
        seeds=tuple(range(ecfg["seeds"])),
        image_shape=ds.image_shape,
        with_ssim=ecfg["with_ssim"] and ds.kind == "gray_image",
        probe_levels=tuple(ecfg["probe_levels"]),
        probe_data=(
            (ds.x_train, ds.labels_train, ds.labels_test)
            if ecfg["probe_levels"] and ds.labels_train is not None
            else None
        ),
        kind=kind,
        pattern=pattern,
    )
    table = res.table()
    dataio.atomic_write(os.path.join(out, "sweep.tsv"), table)
    if len(levels) > 1:
        dataio.write_svg_lineplot(
            os.path.join(out, "sweep.svg"),
            {"mse": (res.levels, res.mse_mean)},
            title="reconstruction error vs corruption level",
            xlabel="corruption level", ylabel="MSE",
        )
    print(table, end="")
    return 0


def cmd_sample(cfg, args):
    out = _outdir(args, "sample")
    loaded = dataio.load_checkpoint(args.checkpoint)
    if "circuit" not in loaded or "decoder" not in loaded:
        print("error: sampling needs a circuit+decoder checkpoint",
              file=sys.stderr)
        return 1
    rng = np.random.default_rng(cfg["seed"])
    n = args.num_samples
    _, z = sample_joint(loaded["circuit"], rng, n)
    x_hat = loaded["decoder"](nn.ad.constant(z)).value
    ds_cfg = cfg["data"]
    shape = None
    if ds_cfg.get("source") == "bundled-images":
        shape = dataio.load_bundled_images().image_shape
    elif "height" in loaded["circuit"].metadata:
        m = loaded["circuit"].metadata
        shape = (m["height"], m["width"])
    if shape is not None:
        imgs = (x_hat * 255.0).reshape(n, *shape)
        cols = int(np.ceil(np.sqrt(n)))
        rows = int(np.ceil(n / cols))
        dataio.write_pgm(
            os.path.join(out, "samples.pgm"),
            dataio.sample_grid(imgs, rows, cols),
        )
        print(f"wrote {n} decoded samples to samples.pgm")
    else:
        dataio.atomic_write(
            os.path.join(out, "samples.tsv"),
            "".join("\t".join(f"{v:.4f}" for v in row) + "\n"
                    for row in x_hat),
        )
        print(f"wrote {n} decoded samples to samples.tsv")
    return 0


def cmd_ood(cfg, args):
    out = _outdir(args, "ood")
    loaded = dataio.load_checkpoint(args.checkpoint)
    if "circuit" not in loaded:
        print("error: OOD scoring needs a circuit checkpoint", file=sys.stderr)
        return 1
    ds = _load_dataset(cfg["data"])
    if args.ood_data is not None:
        x_ood = dataio.load_idx(args.ood_data)
        x_ood = x_ood.reshape(len(x_ood), -1).astype(float)
    else:
        x_ood = dataio.load_bundled_ood_images()
    rng = np.random.default_rng(cfg["seed"])
    res = evalharness.ood_histogram(loaded["circuit"], ds.x_test, x_ood, rng)
    lines = ["bin_lo\tbin_hi\tcount_in\tcount_ood"]
    for i in range(len(res["hist_in"])):
        lines.append(
            f"{res['edges'][i]:.4f}\t{res['edges'][i + 1]:.4f}\t"
            f"{res['hist_in'][i]}\t{res['hist_ood'][i]}"
        )
    lines.append(f"auroc\t{res['auroc']:.4f}")
    dataio.atomic_write(os.path.join(out, "ood.tsv"), "\n".join(lines) + "\n")
    print(f"embedding-likelihood AUROC: {res['auroc']:.4f}")
    return 0


def cmd_simple_bench(cfg, args):
    out = _outdir(args, "simple-bench")
    bcfg = cfg["bench"]
    results = []
    for d in bcfg["dims"]:
        for est in bench.ESTIMATORS:
            results.append(
                bench.run_bench(
                    bench.BenchConfig(
                        num_categories=d,
                        lr=bcfg["lr"],
                        iterations=args.iterations or bcfg["iterations"],
                        batch_size=bcfg["batch_size"],
                        seeds=bcfg["seeds"],
                        estimator=est,
                    )
                )
            )
    table = bench.bench_table(results)
    dataio.atomic_write(os.path.join(out, "bench.tsv"), table)
    print(table, end="")
    return 0


def cmd_validate(cfg, args):
    loaded = dataio.load_checkpoint(args.checkpoint)
    if "circuit" not in loaded:
        print("error: no circuit in checkpoint", file=sys.stderr)
        return 1
    report = loaded["circuit"].validate_structure()
    if report.ok:
        print(f"valid: {len(loaded['circuit'].units)} units, "
              f"{loaded['circuit'].num_parameters()} parameters")
        return 0
    for uid, msg in report.violations:
        print(f"unit {uid}: {msg}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="circuitae", description="circuit autoencoder toolkit"
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", default=None, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("train", help="train the circuit autoencoder")
    common(sp)
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--batch-size", type=int, dest="batch_size", default=None)

    sp = sub.add_parser("train-vae", help="train the VAE baseline")
    common(sp)
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--batch-size", type=int, dest="batch_size", default=None)

    sp = sub.add_parser("distill", help="data-free distillation from a VAE")
    common(sp)
    sp.add_argument("--teacher", required=True, help="VAE checkpoint path")
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--batch-size", type=int, dest="batch_size", default=None)

    sp = sub.add_parser("eval", help="corruption-robustness evaluation")
    common(sp, checkpoint=True)
    sp.add_argument(
        "--corruption", default="sweep",
        help="mcar:<p> | mar:<pattern>:<severity> | sweep",
    )

    sp = sub.add_parser("sample", help="draw embeddings and decode them")
    common(sp, checkpoint=True)
    sp.add_argument("--num-samples", type=int, dest="num_samples", default=16)

    sp = sub.add_parser("ood", help="embedding-likelihood OOD scoring")
    common(sp, checkpoint=True)
    sp.add_argument("--ood-data", dest="ood_data", default=None,
                    help="IDX file of out-of-distribution images")

    sp = sub.add_parser("simple-bench", help="gradient estimator benchmark")
    common(sp)
    sp.add_argument("--iterations", type=int, default=None)

    sp = sub.add_parser("validate", help="structural checks on a checkpoint")
    common(sp, checkpoint=True)
    return p


COMMANDS = {
    "train": cmd_train,
    "train-vae": cmd_train_vae,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "ood": cmd_ood,
    "simple-bench": cmd_simple_bench,
    "validate": cmd_validate,
}


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return COMMANDS[args.cmd](cfg, args)
    except (dataio.DataIOError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
