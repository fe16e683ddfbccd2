"""Command-line entry point.

Subcommands: pretrain, incremental, eval, grid, gen-data, export-samples.
Exit codes: 0 success, 2 usage/config error, 3 numerical abort during
training, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

import numpy as np

from .autograd import Tensor, no_grad
from .datagen import export_samples, gen_source, gen_target, ingest_samples, split
from .errors import CheckpointError, ConfigError, FormatError, TrainingDiverged
from .imageops import encode_ppm, resize_bicubic, to_uint8
from .losses import LossWeights
from .metrics import evaluate, write_report_csv
from .networks import IdentityEmbedder
from .training import (
    GridSetting, MixSpec, TERM_NAMES, build_checkpoint,
    generator_from_checkpoint, incremental_train, load_checkpoint,
    load_config, parse_config_lines, pretrain_source, run_experiment_grid,
    save_checkpoint, write_train_log,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

DOMAINS = ("source", "target")


def _parse_mix(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"--mix expects 'nS,nT', got {text!r}")
    try:
        n_source, n_target = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"--mix expects integers, got {text!r}") from exc
    return MixSpec(n_source, n_target)


def _parse_domains(text):
    domains = [d.strip() for d in text.split(",") if d.strip()]
    for d in domains:
        if d not in DOMAINS:
            raise ConfigError(f"unknown domain {d!r}; choose from {DOMAINS}")
    if not domains:
        raise ConfigError("--domains must name at least one domain")
    return domains


def _load_pools(data_dir, seed, n_source, n_target):
    """Domain pools from a PPM directory when given, else synthetic."""
    if data_dir is not None:
        samples = ingest_samples(data_dir)
        source = [s for s in samples if s.domain == "source"]
        target = [s for s in samples if s.domain == "target"]
    else:
        source = gen_source(seed, n_source) if n_source else []
        target = gen_target(seed, n_target) if n_target else []
    return source, target


def _write_grids(generator, samples, out_dir, prefix, limit=8):
    """Side-by-side LR(upsampled) | SR | HR comparison strips as PPM."""
    os.makedirs(out_dir, exist_ok=True)
    for i, sample in enumerate(samples[:limit]):
        lr_batch = Tensor(np.transpose(sample.lr, (2, 0, 1))[None].astype(np.float32))
        with no_grad():
            sr = generator.forward(lr_batch).sr.data[0]
        sr_img = np.clip(np.transpose(sr, (1, 2, 0)), 0.0, 1.0)
        lr_up = np.clip(resize_bicubic(sample.lr, 128, 128), 0.0, 1.0)
        strip = np.concatenate([lr_up, sr_img, sample.hr], axis=1)
        path = os.path.join(out_dir, f"{prefix}_{i:02d}.ppm")
        with open(path, "wb") as fh:
            fh.write(encode_ppm(to_uint8(strip)))


# ----------------------------------------------------------------------
# subcommands


def cmd_pretrain(args):
    config = load_config(args.config)
    source, _ = _load_pools(args.data, config.seed, args.pool, 0)
    if not source:
        raise ConfigError("no source-domain samples available for pretraining")
    result = pretrain_source(config, source)
    ckpt = build_checkpoint(result.generator, result.discriminator, config,
                            epoch=config.epochs)
    save_checkpoint(ckpt, args.out)
    write_train_log(result.log, args.log or args.out + ".log.csv")
    print(f"pretrained {config.epochs} epochs on {len(source)} images "
          f"-> {args.out}")
    return EXIT_OK


def cmd_incremental(args):
    config = load_config(args.config)
    mix = _parse_mix(args.mix)
    teacher = load_checkpoint(args.teacher)
    source, target = _load_pools(args.data, config.seed,
                                 mix.n_source, mix.n_target)
    result = incremental_train(teacher, mix, config, source, target)
    ckpt = build_checkpoint(result.generator, result.discriminator, config,
                            epoch=config.epochs)
    save_checkpoint(ckpt, args.out)
    write_train_log(result.log, args.log or args.out + ".log.csv")
    print(f"incremental training done (mix {mix.n_source},{mix.n_target}) "
          f"-> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    generator = generator_from_checkpoint(ckpt)
    domains = _parse_domains(args.domains)
    embedder = IdentityEmbedder()
    experiment = os.path.splitext(os.path.basename(args.ckpt))[0]
    rows = []
    for domain in domains:
        gen_fn = gen_source if domain == "source" else gen_target
        samples = gen_fn(args.seed, args.n)
        row = evaluate(generator, samples, embedder)
        row["experiment"] = experiment
        row["test_domain"] = domain
        rows.append(row)
        if args.images:
            _write_grids(generator, samples, args.images, domain)
    write_report_csv(rows, args.out)
    print(f"wrote {len(rows)} result rows -> {args.out}")
    return EXIT_OK


_SETTING_KEY = re.compile(r"^setting(\d+)\.(\w+)$")
_GRID_GLOBAL_KEYS = ("direction", "pool_source", "pool_target", "train_frac",
                     "eval_n")


def _parse_grid_spec(path):
    """Split a grid spec into (TrainConfig, grid options, GridSettings).

    The file uses the usual ``key = value`` lines; keys with a
    ``settingN.`` prefix describe the N-th experiment, the grid-level keys
    are direction/pool_source/pool_target/train_frac/eval_n, everything
    else must be a TrainConfig key.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read grid spec {path}: {exc}") from exc
    config_lines = []
    options = {"direction": "forward", "pool_source": 16, "pool_target": 16,
               "train_frac": 0.75, "eval_n": 4}
    blocks = {}
    for lineno, raw in enumerate(raw_lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or "=" not in line:
            if line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        m = _SETTING_KEY.match(key)
        if m:
            blocks.setdefault(int(m.group(1)), {})[m.group(2)] = value
        elif key in _GRID_GLOBAL_KEYS:
            if key == "direction":
                options[key] = value
            elif key == "train_frac":
                options[key] = float(value)
            else:
                options[key] = int(value)
        else:
            config_lines.append(raw)
    config = parse_config_lines(config_lines, source=str(path))
    if options["direction"] not in ("forward", "reverse"):
        raise ConfigError(
            f"direction must be forward or reverse, got {options['direction']!r}")
    if not blocks:
        raise ConfigError(f"grid spec {path} defines no settings")
    settings = []
    for idx in sorted(blocks):
        block = dict(blocks[idx])
        if "mix" not in block:
            raise ConfigError(f"setting{idx} is missing its mix")
        mix = _parse_mix(block.pop("mix"))
        name = block.pop("name", f"setting{idx}")
        weight_kwargs = {}
        for key, value in block.items():
            if not key.startswith("weight_") or key[7:] not in TERM_NAMES:
                raise ConfigError(f"setting{idx}: unknown key {key!r}")
            try:
                weight_kwargs[key[7:]] = float(value)
            except ValueError as exc:
                raise ConfigError(f"setting{idx}: bad value for {key}") from exc
        try:
            weights = LossWeights(**{**config.weights.as_dict(), **weight_kwargs})
        except ValueError as exc:
            raise ConfigError(f"setting{idx}: {exc}") from exc
        settings.append(GridSetting(name, mix, weights))
    return config, options, settings


def cmd_grid(args):
    config, options, settings = _parse_grid_spec(args.spec)
    os.makedirs(args.out, exist_ok=True)
    direction = options["direction"]
    source_all = gen_source(config.seed, options["pool_source"])
    target_all = gen_target(config.seed, options["pool_target"])
    source_train, source_test = split(source_all, options["train_frac"], config.seed)
    target_train, target_test = split(target_all, options["train_frac"], config.seed)
    source_test = source_test[:options["eval_n"]]
    target_test = target_test[:options["eval_n"]]

    pretrain_pool = source_train if direction == "forward" else target_train
    pre = pretrain_source(
        config, pretrain_pool,
        task_domain="source" if direction == "forward" else "target")
    teacher = build_checkpoint(pre.generator, pre.discriminator, config,
                               epoch=config.epochs)
    save_checkpoint(teacher, os.path.join(args.out, "teacher.ckpt"))

    results_path = os.path.join(args.out, "results.csv")
    rows = []
    embedder = IdentityEmbedder()
    try:
        for setting in settings:
            new_rows, logs = run_experiment_grid(
                [setting], config, source_train, source_test,
                target_train, target_test, direction=direction,
                teacher_ckpt=teacher, embedder=embedder)
            rows.extend(new_rows)
            write_train_log(logs[setting.name],
                            os.path.join(args.out, f"{setting.name}.log.csv"))
            # rewrite after every setting so partial results survive aborts
            write_report_csv(rows, results_path)
    except TrainingDiverged:
        if rows:
            write_report_csv(rows, results_path)
        raise
    print(f"grid complete: {len(rows)} rows -> {results_path}")
    return EXIT_OK


def cmd_gen_data(args):
    domains = _parse_domains(args.domain)
    samples = []
    if "source" in domains:
        samples.extend(gen_source(args.seed, args.n))
    if "target" in domains:
        samples.extend(gen_target(args.seed, args.n))
    export_samples(samples, args.out)
    print(f"wrote {len(samples)} samples -> {args.out}")
    return EXIT_OK


def cmd_export_samples(args):
    ckpt = load_checkpoint(args.ckpt)
    generator = generator_from_checkpoint(ckpt)
    for domain in _parse_domains(args.domain):
        gen_fn = gen_source if domain == "source" else gen_target
        _write_grids(generator, gen_fn(args.seed, args.n), args.out, domain,
                     limit=args.n)
    print(f"wrote comparison grids -> {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="incsr",
        description="Incremental face-to-cartoon super-resolution trainer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train generator+discriminator from scratch")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--data", help="PPM dataset directory (default: synthetic)")
    p.add_argument("--pool", type=int, default=16,
                   help="synthetic source-pool size (default 16)")
    p.add_argument("--log", help="training-log CSV path (default <out>.log.csv)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("incremental",
                       help="adapt a pretrained model with replay distillation")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--mix", required=True,
                   help="nS,nT: replayed source and target image counts")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="PPM dataset directory (default: synthetic)")
    p.add_argument("--log")
    p.set_defaults(func=cmd_incremental)

    p = sub.add_parser("eval", help="PSNR/SSIM/proxy-FID report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--domains", default="source,target",
                   help="comma-separated test domains")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--images", help="directory for LR|SR|HR comparison grids")
    p.add_argument("--n", type=int, default=8, help="test images per domain")
    p.add_argument("--seed", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run an experiment grid from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gen-data", help="export synthetic samples as PPM + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16, help="samples per domain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", default="source,target")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-samples",
                       help="render LR|SR|HR comparison grids for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--domain", default="target")
    p.set_defaults(func=cmd_export_samples)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        for name, value in exc.term_values.items():
            print(f"  {name} = {value}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
