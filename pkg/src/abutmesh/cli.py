"""Command-line orchestration: config-driven, reproducible runs.

Commands: config, gen-data, remesh, pretrain, finetune, reconstruct, eval,
report. Every run directory receives a full config snapshot and a config
hash so outputs are self-describing.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import datagen, evalkit, pipeline
from .mae import MaeConfig, MaeModel, export_reconstruction, pretrain
from .mesh_core import MeshError, load_mesh
from .nn_core import load_module
from .remesh import patchify, remesh_pipeline, save_remeshed
from .tgl import (AbutmentRegressor, FinetuneConfig, StubTextEncoder,
                  TableTextEncoder, finetune)

FULL_DEFAULTS = {
    "profile": "full",
    "seed": 0,
    "paths": {"cache_dir": "cache", "runs_dir": "runs"},
    "datagen": {
        "n": 320,
        "split_ratio": 0.8,
        "noise_amplitude": 0.1,
        "teeth_per_jaw": 14,
        "ranges": {k: list(v) for k, v in datagen.DEFAULT_RANGES.items()},
    },
    "remesh": {"target": 500, "level": 3},
    "mae": {
        "d_model": 128,
        "n_heads": 4,
        "encoder_blocks": 12,
        "decoder_blocks": 6,
        "mask_ratio": 0.5,
        "phi": 1.0,
        "epochs": 300,
        "batch_size": 128,
        "base_lr": 1e-4,
        "weight_decay": 0.0,
        "warmup_epochs": 0,
        "grad_clip": 0.0,
        "adam_beta2": 0.999,
        "checkpoint_every": 50,
    },
    "finetune": {
        "epochs": 100,
        "batch_size": 64,
        "base_lr": 1e-4,
        "milestones": [30, 60],
        "gamma": 0.1,
        "weight_decay": 0.0,
        "huber_h": 1.0,
        "warmup_epochs": 0,
        "grad_clip": 0.0,
        "adam_beta2": 0.999,
        "augment_rotate": 0.0,
        "freeze_encoder": False,
        "use_tgl": True,
        "text_width": 512,
        "fused_width": 256,
        "fc_widths": [256, 128],
    },
}

DESK_OVERRIDES = {
    "profile": "desk",
    "datagen": {"n": 64},
    "mae": {"d_model": 64, "encoder_blocks": 2, "decoder_blocks": 1,
            "epochs": 10, "batch_size": 8, "base_lr": 1e-3,
            "checkpoint_every": 10},
    "finetune": {"epochs": 60, "batch_size": 16, "base_lr": 1e-3,
                 "milestones": [40, 52], "warmup_epochs": 4,
                 "grad_clip": 1.0, "adam_beta2": 0.95,
                 "augment_rotate": 3.141592653589793},
}


class ConfigError(Exception):
    pass


def _deep_update(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_config(profile: str = "full") -> dict:
    if profile == "full":
        return copy.deepcopy(FULL_DEFAULTS)
    if profile == "desk":
        return _deep_update(FULL_DEFAULTS, DESK_OVERRIDES)
    raise ConfigError(f"unknown profile {profile!r}")


def config_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config = _deep_update(default_config(user.get("profile", "full")), user)
    _validate_config(config)
    return config


def _validate_config(config: dict) -> None:
    mae = config["mae"]
    if not (0 <= mae["mask_ratio"] < 1):
        raise ConfigError(f"field mae.mask_ratio: must be in [0, 1), got {mae['mask_ratio']}")
    if mae["d_model"] % mae["n_heads"] != 0:
        raise ConfigError("field mae.d_model: must be divisible by mae.n_heads")
    if config["datagen"]["n"] < 2:
        raise ConfigError(f"field datagen.n: must be >= 2, got {config['datagen']['n']}")
    if not (0 < config["datagen"]["split_ratio"] < 1):
        raise ConfigError("field datagen.split_ratio: must be in (0, 1)")
    for key in ("epochs", "batch_size"):
        if config["finetune"][key] < 1:
            raise ConfigError(f"field finetune.{key}: must be >= 1")


def mae_config_from(config: dict) -> MaeConfig:
    m = config["mae"]
    return MaeConfig(d_model=m["d_model"], n_heads=m["n_heads"],
                     encoder_blocks=m["encoder_blocks"],
                     decoder_blocks=m["decoder_blocks"],
                     mask_ratio=m["mask_ratio"], phi=m["phi"],
                     epochs=m["epochs"], batch_size=m["batch_size"],
                     base_lr=m["base_lr"], weight_decay=m["weight_decay"],
                     warmup_epochs=m["warmup_epochs"],
                     grad_clip=m["grad_clip"], adam_beta2=m["adam_beta2"],
                     checkpoint_every=m["checkpoint_every"],
                     seed=config["seed"])


def finetune_config_from(config: dict) -> FinetuneConfig:
    f = config["finetune"]
    return FinetuneConfig(epochs=f["epochs"], batch_size=f["batch_size"],
                          base_lr=f["base_lr"],
                          milestones=tuple(f["milestones"]), gamma=f["gamma"],
                          weight_decay=f["weight_decay"], huber_h=f["huber_h"],
                          warmup_epochs=f["warmup_epochs"],
                          grad_clip=f["grad_clip"],
                          adam_beta2=f["adam_beta2"],
                          augment_rotate=f["augment_rotate"],
                          freeze_encoder=f["freeze_encoder"],
                          seed=config["seed"])


def build_regressor(config: dict, use_tgl: bool | None = None) -> AbutmentRegressor:
    f = config["finetune"]
    return AbutmentRegressor(
        mae_config_from(config),
        text_width=f["text_width"], fused_width=f["fused_width"],
        fc_widths=tuple(f["fc_widths"]),
        use_tgl=f["use_tgl"] if use_tgl is None else use_tgl)


def text_encoder_from(config: dict, table_path=None):
    if table_path:
        return TableTextEncoder(table_path)
    return StubTextEncoder(width=config["finetune"]["text_width"])


def _snapshot(config: dict, run_dir) -> None:
    os.makedirs(run_dir, exist_ok=True)
    snap = copy.deepcopy(config)
    snap["config_hash"] = config_hash(config)
    with open(os.path.join(run_dir, "run_config.json"), "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    np.random.seed(seed % 2**32)


def _preprocess(manifest, config, on_error="raise"):
    return pipeline.preprocess_manifest(
        manifest, target=config["remesh"]["target"],
        cache_dir=config["paths"]["cache_dir"], on_error=on_error)


# --- subcommands ------------------------------------------------------------

def cmd_config(args) -> int:
    config = default_config(args.profile)
    text = json.dumps(config, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    dg = config["datagen"]
    n = args.n if args.n is not None else dg["n"]
    train, test = datagen.gen_dataset(
        n=n, seed=config["seed"], out_dir=args.out_dir,
        ranges={k: tuple(v) for k, v in dg["ranges"].items()},
        split_ratio=dg["split_ratio"], noise_amplitude=dg["noise_amplitude"],
        teeth_per_jaw=dg["teeth_per_jaw"])
    _snapshot(config, args.out_dir)
    print(f"wrote {len(train.samples)} train / {len(test.samples)} test samples "
          f"to {args.out_dir}")
    return 0


def cmd_remesh(args) -> int:
    config = load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.input:
        paths = [args.input]
    else:
        manifest = datagen.Manifest.load(args.manifest)
        paths = [s.mesh_path for s in manifest.samples]
    for path in paths:
        mesh = load_mesh(path)
        remeshed = remesh_pipeline(mesh, target=config["remesh"]["target"],
                                   level=config["remesh"]["level"])
        stem = os.path.splitext(os.path.basename(path))[0]
        save_remeshed(remeshed,
                      os.path.join(args.out_dir, f"{stem}_remeshed.off"),
                      os.path.join(args.out_dir, f"{stem}_hierarchy.json"))
        n_patches = len(patchify(remeshed)) if remeshed.level == 3 else "n/a"
        print(f"{path}: {remeshed.base_face_count} base faces, "
              f"{remeshed.leaf_mesh.n_faces} leaf faces, {n_patches} patches")
    _snapshot(config, args.out_dir)
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    if args.epochs is not None:
        config["mae"]["epochs"] = args.epochs
    if args.mask_ratio is not None:
        config["mae"]["mask_ratio"] = args.mask_ratio
    _validate_config(config)
    _seed_everything(config["seed"])
    manifest = datagen.Manifest.load(args.manifest)
    samples, failures = _preprocess(manifest, config, on_error="collect")
    if failures:
        print(f"warning: {len(failures)} samples failed preprocessing",
              file=sys.stderr)
    cfg = mae_config_from(config)
    model = MaeModel(cfg)
    _snapshot(config, args.run_dir)
    records = pretrain(model, samples, cfg, args.run_dir)
    print(f"pretrained {cfg.epochs} epochs; final L = {records[-1]['L']:.6f}")
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args.config)
    if args.no_tgl:
        config["finetune"]["use_tgl"] = False
    if args.epochs is not None:
        config["finetune"]["epochs"] = args.epochs
    if args.mask_ratio is not None:
        config["mae"]["mask_ratio"] = args.mask_ratio
    _validate_config(config)
    _seed_everything(config["seed"])
    manifest = datagen.Manifest.load(args.manifest)
    samples, failures = _preprocess(manifest, config, on_error="collect")
    if failures:
        print(f"warning: {len(failures)} samples failed preprocessing",
              file=sys.stderr)
    model = build_regressor(config)
    if args.pretrained:
        mae_model = MaeModel(mae_config_from(config))
        load_module(args.pretrained, mae_model)
        model.load_pretrained(mae_model)
    encoder = text_encoder_from(config, args.embedding_table)
    _snapshot(config, args.run_dir)
    records = finetune(model, samples, finetune_config_from(config),
                       args.run_dir, encoder)
    print(f"fine-tuned; final L_total = {records[-1]['L_total']:.6f}")
    return 0


def cmd_reconstruct(args) -> int:
    config = load_config(args.config)
    _seed_everything(config["seed"])
    cfg = mae_config_from(config)
    model = MaeModel(cfg)
    load_module(args.checkpoint, model)
    sample = pipeline.preprocess_sample(
        datagen.Sample(mesh_path=args.mesh, jaw="bottom", fdi_index=36,
                       labels=None),
        target=config["remesh"]["target"],
        cache_dir=config["paths"]["cache_dir"])
    paths = export_reconstruction(model, sample, args.seed, args.out_dir, cfg)
    _snapshot(config, args.out_dir)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    if args.no_tgl:
        config["finetune"]["use_tgl"] = False
    _seed_everything(config["seed"])
    model = build_regressor(config)
    load_module(args.checkpoint, model)
    test = datagen.Manifest.load(args.manifest, split="test")
    samples, failures = _preprocess(test, config, on_error="collect")
    if failures:
        print(f"warning: {len(failures)} samples failed preprocessing",
              file=sys.stderr)
    encoder = text_encoder_from(config, args.embedding_table)
    baseline = None
    if args.train_manifest:
        baseline = evalkit.baseline_mean_predictor(
            datagen.Manifest.load(args.train_manifest))
    report = evalkit.evaluate(model, samples, encoder, baseline=baseline,
                              failures=len(failures),
                              metadata={"seed": config["seed"],
                                        "config_hash": config_hash(config)})
    _snapshot(config, args.out_dir)
    paths = evalkit.emit_report(report, args.out_dir)
    for name in evalkit.PARAM_NAMES:
        print(f"{name}: mean IoU {report.mean_iou_percent[name]:.2f}")
    print(f"report: {paths['json']}")
    return 0


def cmd_report(args) -> int:
    with open(args.results) as fh:
        data = json.load(fh)
    records = [
        [evalkit.IouResult(**r) for r in sample] for sample in data["records"]
    ]
    report = evalkit.EvalReport(
        mean_iou_percent=data["mean_iou_percent"], records=records,
        n_samples=data["n_samples"], n_failures=data["n_failures"],
        baseline_mean_iou_percent=data.get("baseline_mean_iou_percent"),
        metadata=data.get("metadata", {}))
    paths = evalkit.emit_report(report, args.out_dir)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abutmesh",
        description="Mesh-transformer pipeline for abutment parameter regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print or write a full default config")
    p.add_argument("action", choices=["init"])
    p.add_argument("--profile", choices=["full", "desk"], default="full")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("remesh", help="remesh one mesh or a whole manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--input")
    group.add_argument("--manifest")
    p.set_defaults(func=cmd_remesh)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="text-conditioned regression fine-tune")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--pretrained", help="pretraining checkpoint to load")
    p.add_argument("--embedding-table", help="offline text-embedding JSON")
    p.add_argument("--no-tgl", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("reconstruct", help="export a masked reconstruction")
    p.add_argument("--config", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--train-manifest", help="for the mean-predictor baseline")
    p.add_argument("--embedding-table")
    p.add_argument("--no-tgl", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="re-emit tables/plots from results.json")
    p.add_argument("--results", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (MeshError, datagen.DatagenError, ValueError, KeyError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
