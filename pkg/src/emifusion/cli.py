"""Command-line entry points: gen-data, train, eval, ablate, gradcheck.

Configuration precedence is flags over config-file values over defaults.
A JSON config file has optional top-level sections ``seed``, ``model``,
``train``, and ``data``; ``--set section.key=value`` overrides single
entries. Every command that writes into an output directory also writes
the fully resolved configuration next to its outputs.

Exit codes: 0 success, 2 usage, 3 data/validation, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .data import (
    PlantedConfig,
    PlantedGenerator,
    RecordFormatError,
    load_split,
    read_manifest,
    read_records,
    write_manifest,
    write_records,
)
from .metrics import evaluate, mse_loss
from .model import (
    CheckpointError,
    FusionModel,
    ModelConfig,
    load_checkpoint,
)
from .oracle import check_gradients
from .optim import TrainReport, TrainSettings, train_loop
from .tensor import NumericError, Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

OUT_ROOT_ENV = "EMIFUSION_OUT_ROOT"

ABLATION_VARIANTS = (
    ("full", {}),
    ("simple_concat", {"fusion": "simple_concat"}),
    ("self_attention_only", {"fusion": "self_attention_only"}),
    ("no_missing_tokens", {"use_missing_tokens": False}),
    ("no_modality_dropout", {"modality_dropout_p": 0.0}),
    ("audio_anchored", {"anchor": "audio"}),
    ("vision_anchored", {"anchor": "vision"}),
)


class UsageError(Exception):
    """Bad flag combinations or malformed override syntax."""


# -- configuration plumbing --------------------------------------------------


def resolve_out(path: str) -> str:
    """Resolve an output path, honoring the output-root environment
    variable for relative paths."""
    if os.path.isabs(path):
        return path
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return os.path.join(root, path)
    return os.path.abspath(path)


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path}: bad JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path}: top level must be an object")
    unknown = set(cfg) - {"seed", "model", "train", "data"}
    if unknown:
        raise ValueError(
            f"config file {path}: unknown sections {sorted(unknown)}")
    return cfg


def apply_set_overrides(cfg: dict, assignments) -> None:
    for item in assignments or ():
        if "=" not in item:
            raise UsageError(f"--set needs section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            cfg["seed"] = _parse_literal(raw)
            continue
        if len(parts) != 2 or parts[0] not in ("model", "train", "data"):
            raise UsageError(
                f"--set path must be seed or model/train/data.key, "
                f"got {dotted!r}")
        section, key = parts
        cfg.setdefault(section, {})[key] = _parse_literal(raw)


def _parse_literal(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_run_config(args) -> dict:
    """Merge defaults, config file, and flags into one nested dict."""
    cfg = {"seed": 0, "model": {}, "train": {}, "data": {}}
    if getattr(args, "config", None):
        file_cfg = load_config_file(args.config)
        cfg["seed"] = file_cfg.get("seed", cfg["seed"])
        for section in ("model", "train", "data"):
            cfg[section].update(file_cfg.get(section, {}))
    apply_set_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    flag_map = (
        ("max_epochs", "train", "max_epochs"),
        ("batch_size", "train", "batch_size"),
        ("n_train", "data", "n_train"),
        ("n_val", "data", "n_val"),
        ("n_test", "data", "n_test"),
        ("sigma", "data", "sigma"),
        ("signal_fraction", "data", "signal_fraction"),
        ("signal_gain", "data", "signal_gain"),
    )
    for attr, section, key in flag_map:
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "missing_prob", None) is not None:
        for m in ("audio", "vision", "text"):
            cfg["data"][f"missing_prob_{m}"] = args.missing_prob
    return cfg


def resolved_sections(cfg: dict):
    """Instantiate the typed configs from a merged dict, defaulting
    sub-seeds to the run seed."""
    seed = int(cfg["seed"])
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_dict = dict(cfg["train"])
    train_dict.setdefault("seed", seed)
    train_settings = TrainSettings.from_dict(train_dict)
    data_dict = dict(cfg["data"])
    counts = {
        "n_train": int(data_dict.pop("n_train", 2000)),
        "n_val": int(data_dict.pop("n_val", 500)),
        "n_test": int(data_dict.pop("n_test", 500)),
    }
    data_dict.setdefault("seed", seed)
    planted = PlantedConfig.from_dict(data_dict)
    return seed, model_cfg, train_settings, planted, counts


def model_init_rng(seed: int) -> np.random.Generator:
    """Model-parameter initialization stream, disjoint from data and
    shuffling streams."""
    return np.random.default_rng(np.random.SeedSequence([seed, 10]))


def refuse_existing(paths, overwrite: bool) -> None:
    if overwrite:
        return
    clashes = [p for p in paths if os.path.exists(p)]
    if clashes:
        raise UsageError(
            "refusing to overwrite existing outputs (pass --overwrite): "
            + ", ".join(clashes))


def write_resolved_config(out_dir: str, cfg: dict, command: str,
                          model_cfg=None, train_settings=None,
                          planted=None, counts=None) -> None:
    resolved = {"command": command, "seed": cfg["seed"]}
    if model_cfg is not None:
        resolved["model"] = model_cfg.to_dict()
    if train_settings is not None:
        resolved["train"] = train_settings.to_dict()
    if planted is not None:
        resolved["data"] = planted.to_dict()
        if counts:
            resolved["data"].update(counts)
    with open(os.path.join(out_dir, "config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2)
        fh.write("\n")


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = build_run_config(args)
    _, _, _, planted, counts = resolved_sections(cfg)
    out_dir = resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    split_files = {name: os.path.join(out_dir, f"{name}.jsonl")
                   for name in ("train", "val", "test")}
    manifest_path = os.path.join(out_dir, "manifest.json")
    refuse_existing(list(split_files.values()) + [manifest_path],
                    args.overwrite)
    generator = PlantedGenerator(planted)
    splits = {}
    for name, key in (("train", "n_train"), ("val", "n_val"),
                      ("test", "n_test")):
        records = generator.generate(counts[key], name)
        write_records(
            records, split_files[name], d_audio=planted.d_audio,
            d_vision=planted.d_vision, d_text=planted.d_text,
            n_targets=planted.n_targets)
        splits[name] = (split_files[name], len(records))
        print(f"wrote {len(records)} records to {split_files[name]}")
    write_manifest(manifest_path, planted, splits)
    write_resolved_config(out_dir, cfg, "gen-data", planted=planted,
                          counts=counts)
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def _print_epoch_row(stats) -> None:
    print(TrainReport.format_row(stats), flush=True)


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    seed, model_cfg, settings, planted, counts = resolved_sections(cfg)
    out_dir = resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.csv")
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    refuse_existing([report_path, ckpt_path], args.overwrite)
    manifest = read_manifest(args.manifest)
    train_records = load_split(manifest, "train")
    val_records = load_split(manifest, "val")
    state = None
    if args.resume:
        model, state = load_checkpoint(args.resume)
        if state is None:
            raise UsageError(
                f"{args.resume} is a weights-only checkpoint; it cannot "
                f"seed a resumed run")
        print(f"resuming from {args.resume} at epoch {state.epoch}")
    else:
        model = FusionModel(model_cfg, rng=model_init_rng(seed))
    print(TrainReport.header(), flush=True)
    report = train_loop(
        model, train_records, val_records, settings, state=state,
        run_epochs=args.run_epochs, checkpoint_path=ckpt_path,
        on_epoch=_print_epoch_row)
    report.write_csv(report_path)
    write_resolved_config(out_dir, cfg, "train", model_cfg=model.config,
                          train_settings=settings)
    print(report.summary())
    print(f"history: {report_path}")
    if os.path.exists(ckpt_path):
        print(f"best checkpoint: {ckpt_path}")
    else:
        print("no improvement was recorded, so no checkpoint was written")
    return EXIT_OK


def cmd_eval(args) -> int:
    if bool(args.records) == bool(args.manifest):
        raise UsageError("pass exactly one of --records or --manifest")
    model, _ = load_checkpoint(args.checkpoint)
    if args.records:
        records = read_records(args.records)
    else:
        records = load_split(read_manifest(args.manifest), args.split)
    result = evaluate(model, records, batch_size=args.batch_size)
    print(result.format())
    if args.out:
        out_path = resolve_out(args.out)
        payload = {
            "rho_per_dim": result.rho_per_dim,
            "mean_rho": result.mean_rho,
            "mse": result.mse,
            "n_samples": result.n_samples,
            "undefined_dims": result.undefined_dims,
        }
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        print(f"wrote {out_path}")
    return EXIT_OK


def variant_config(base: ModelConfig, overrides: dict) -> ModelConfig:
    d = base.to_dict()
    d.update(overrides)
    return ModelConfig.from_dict(d)


def cmd_ablate(args) -> int:
    cfg = build_run_config(args)
    seed, model_cfg, settings, _, _ = resolved_sections(cfg)
    out_dir = resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation.csv")
    txt_path = os.path.join(out_dir, "ablation.txt")
    refuse_existing([csv_path, txt_path], args.overwrite)
    manifest = read_manifest(args.manifest)
    train_records = load_split(manifest, "train")
    val_records = load_split(manifest, "val")
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        vcfg = variant_config(model_cfg, overrides)
        model = FusionModel(vcfg, rng=model_init_rng(seed))
        print(f"-- {name}", flush=True)
        report = train_loop(model, train_records, val_records, settings,
                            run_epochs=args.run_epochs,
                            on_epoch=_print_epoch_row)
        rows.append({
            "variant": name,
            "fusion": vcfg.fusion,
            "anchor": vcfg.anchor,
            "missing_tokens": vcfg.use_missing_tokens,
            "modality_dropout_p": vcfg.modality_dropout_p,
            "best_val_mean_rho": report.best_mean_rho,
            "best_epoch": report.best_epoch,
            "epochs_run": len(report.epochs),
        })
        print(f"{name}: best val mean rho {report.best_mean_rho:+.4f} "
              f"(epoch {report.best_epoch})")
    full_rho = rows[0]["best_val_mean_rho"]
    for row in rows:
        row["delta_vs_full"] = row["best_val_mean_rho"] - full_rho
    header = (f"{'variant':<22}{'fusion':<22}{'anchor':<8}"
              f"{'tokens':<8}{'md_p':<6}{'mean_rho':>10}{'delta':>9}")
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['variant']:<22}{row['fusion']:<22}{row['anchor']:<8}"
            f"{str(row['missing_tokens']):<8}"
            f"{row['modality_dropout_p']:<6.2f}"
            f"{row['best_val_mean_rho']:>10.4f}"
            f"{row['delta_vs_full']:>+9.4f}")
    table = "\n".join(lines)
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    fields = ["variant", "fusion", "anchor", "missing_tokens",
              "modality_dropout_p", "best_val_mean_rho", "delta_vs_full",
              "best_epoch", "epochs_run"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    write_resolved_config(out_dir, cfg, "ablate", model_cfg=model_cfg,
                          train_settings=settings)
    print(table)
    print(f"table: {txt_path}")
    return EXIT_OK


def _gradcheck_fixture(model_cfg: ModelConfig, seed: int):
    """A four-sample batch covering full and missing-modality paths."""
    from .data import FeatureRecord, collate

    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    c = model_cfg
    records = []
    plans = (
        {"audio": True, "vision": True, "text": True},
        {"audio": False, "vision": True, "text": True},
        {"audio": True, "vision": False, "text": True},
        {"audio": True, "vision": True, "text": False},
    )
    for i, plan in enumerate(plans):
        records.append(FeatureRecord(
            id=f"gc-{i}",
            target=rng.uniform(0.0, 1.0, c.n_targets),
            audio=(0.5 * rng.standard_normal((3 + i, c.d_audio_in))
                   if plan["audio"] else None),
            vision=(0.5 * rng.standard_normal((2 + i, c.d_vision_in))
                    if plan["vision"] else None),
            text=(0.5 * rng.standard_normal(c.d_text_in)
                  if plan["text"] else None),
        ))
    batch = collate(records, d_audio=c.d_audio_in, d_vision=c.d_vision_in,
                    d_text=c.d_text_in, n_targets=c.n_targets,
                    max_audio_len=c.max_audio_len,
                    max_vision_len=c.max_vision_len)
    return batch


def default_gradcheck_config() -> ModelConfig:
    """Compact dims so a finite-difference sweep stays fast; the wiring is
    identical to the full-size model."""
    return ModelConfig(
        d_audio_in=11, d_vision_in=10, d_text_in=9, d_latent=16,
        head_count=2, mlp_hidden=12, head_dropout_p=0.0,
        max_audio_len=32, max_vision_len=32)


def cmd_gradcheck(args) -> int:
    cfg = build_run_config(args)
    seed = int(cfg["seed"])
    if cfg["model"]:
        model_cfg = ModelConfig.from_dict(cfg["model"])
    else:
        model_cfg = default_gradcheck_config()
    model = FusionModel(model_cfg, rng=model_init_rng(seed))
    batch = _gradcheck_fixture(model_cfg, seed)
    targets = Tensor(batch.target)

    def loss_fn():
        return mse_loss(model.forward_batch(batch, train=False), targets)

    report = check_gradients(
        loss_fn, model.named_parameters(), tol=args.tolerance,
        max_coords_per_param=args.coords,
        rng=np.random.default_rng(np.random.SeedSequence([seed, 78])))
    print(report.format())
    if args.out:
        out_path = resolve_out(args.out)
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(report.format() + "\n")
        print(f"wrote {out_path}")
    if not report.passed:
        raise NumericError(
            "gradient check failed; see the report above")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_common(p, out_required: bool = True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config entry; repeatable")
    if out_required:
        p.add_argument("--out", required=True,
                       help=f"output directory (relative paths resolve "
                            f"under ${OUT_ROOT_ENV} when set)")
        p.add_argument("--overwrite", action="store_true",
                       help="replace existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emifusion",
        description="Multimodal fusion regressor: data, training, "
                    "evaluation, ablation, gradient checks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate planted synthetic splits")
    _add_common(p)
    p.add_argument("--n-train", type=int, help="training records")
    p.add_argument("--n-val", type=int, help="validation records")
    p.add_argument("--n-test", type=int, help="test records")
    p.add_argument("--sigma", type=float, help="noise scale")
    p.add_argument("--signal-fraction", type=float,
                   help="probability a frame carries the planted signal")
    p.add_argument("--signal-gain", type=float, help="planted signal gain")
    p.add_argument("--missing-prob", type=float,
                   help="per-modality missing probability (all three)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on generated splits")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--max-epochs", type=int, help="schedule horizon")
    p.add_argument("--run-epochs", type=int,
                   help="epochs to execute this invocation")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", help="record file to evaluate on")
    p.add_argument("--manifest", help="dataset manifest")
    p.add_argument("--split", default="val",
                   help="manifest split (default val)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate",
                       help="train every fusion variant on shared data")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--max-epochs", type=int, help="schedule horizon")
    p.add_argument("--run-epochs", type=int,
                   help="epochs to execute per variant")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of model gradients")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--tolerance", type=float, default=1e-3,
                   help="max relative error allowed (default 1e-3)")
    p.add_argument("--coords", type=int, default=6,
                   help="coordinates sampled per parameter")
    p.add_argument("--out", help="write the report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RecordFormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
