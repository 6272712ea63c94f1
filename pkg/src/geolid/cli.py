"""Command-line entry point: corpus generation, training, evaluation,
ablation, geolocation utilities, and gradient self-verification."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import NumericError, ShapeError
from .checkpoint import CheckpointError, sha256_file
from .data import (CorpusCounts, DataError, default_specs, gen_corpus,
                   load_manifest, manifest_langs)
from .evaluation import ablation_grid, default_layer_strategies, dump_embeddings, evaluate
from .geovec import (GeoCoordinate, GeoVecError, fibonacci_lattice, geo_vector,
                     load_language_geolocations)
from .model import CondConfig, ConfigError, EncoderConfig, HeadConfig, LIDModel, LossConfig
from .train import TrainConfig, load_checkpoint, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration plumbing

def load_config(path) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments ignored."""
    config = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            config[key.strip()] = value.strip()
    return config


def _resolve(args, config: dict, key: str, default, conv=str):
    """Effective option value: CLI flag > config file > default."""
    cli = getattr(args, key.replace("-", "_"), None)
    if cli is not None:
        return cli
    if key in config:
        raw = config[key]
        if conv is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return conv(raw)
    return default


def _out_dir(args, config: dict) -> Path:
    out = _resolve(args, config, "out", None)
    if out is None:
        out = os.environ.get("GEOLID_OUT", ".")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _set_threads(args, config: dict) -> None:
    threads = _resolve(args, config, "threads", None, int)
    if threads is not None:
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def write_run_meta(out_dir: Path, command: str, effective: dict,
                   artifacts: list) -> Path:
    meta = {
        "command": command,
        "config": effective,
        "artifacts": {str(Path(p).relative_to(out_dir)): sha256_file(p)
                      for p in artifacts},
    }
    path = out_dir / "run.meta"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, config: dict) -> int:
    out = _out_dir(args, config)
    seed = _resolve(args, config, "seed", 0, int)
    langs = _resolve(args, config, "langs", 12, int)
    dialect_langs = _resolve(args, config, "dialect-langs", 4, int)
    extra_dialects = _resolve(args, config, "extra-dialects", 2, int)
    counts = CorpusCounts(
        train_per_lang=_resolve(args, config, "train-per-lang", 60, int),
        dev_per_lang=_resolve(args, config, "dev-per-lang", 20, int),
        dialect_dev_per_dialect=_resolve(args, config, "dialect-dev-per-dialect",
                                         20, int))
    specs = default_specs(num_languages=langs,
                          num_dialect_languages=dialect_langs,
                          extra_dialects=extra_dialects)
    manifest = gen_corpus(specs, counts, seed, out)
    coords_path = out / "languages.csv"
    with open(coords_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for s in specs:
            writer.writerow([s.code, s.coordinate.latitude_deg,
                             s.coordinate.longitude_deg])
    effective = {"seed": seed, "langs": langs, "dialect-langs": dialect_langs,
                 "extra-dialects": extra_dialects,
                 "train-per-lang": counts.train_per_lang,
                 "dev-per-lang": counts.dev_per_lang,
                 "dialect-dev-per-dialect": counts.dialect_dev_per_dialect}
    write_run_meta(out, "gen-data", effective, [manifest, coords_path])
    print(f"wrote {manifest} ({langs} languages) and {coords_path}")
    return EXIT_OK


def _parse_layers(spec: str) -> tuple:
    try:
        return tuple(int(p) for p in spec.split(",") if p.strip() != "")
    except ValueError as exc:
        raise UsageError(f"invalid --layers spec {spec!r}") from exc


def _default_encoder() -> EncoderConfig:
    from .experiment import TOY_ENCODER
    return TOY_ENCODER


def _head_for(num_classes: int, geo_dim: int) -> HeadConfig:
    from .experiment import TOY_HEAD
    return replace(TOY_HEAD, num_classes=num_classes, geo_dim=geo_dim)


def _load_corpus(data_dir: Path, geo_dim: int):
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise UsageError(f"no manifest.jsonl under {data_dir}")
    entries = load_manifest(manifest)
    coords = data_dir / "languages.csv"
    if not coords.exists():
        raise UsageError(f"no languages.csv under {data_dir}")
    table = load_language_geolocations(coords, fibonacci_lattice(geo_dim))
    return entries, table


def _train_config(args, config: dict, mode: str, seed: int, steps: int) -> TrainConfig:
    from .experiment import desk_train_config
    base = desk_train_config(mode if mode != "geo-pred" else "baseline", seed, steps)
    cond = base.cond
    if mode == "geo-cond":
        cond = CondConfig(
            layers=_parse_layers(_resolve(args, config, "layers", "3,4")),
            share=_resolve(args, config, "cond-share", "shared"),
            freeze=_resolve(args, config, "cond-freeze", "trainable"),
            enabled=True)
    detach = not _resolve(args, config, "no-detach", False, bool)
    return replace(base, mode=mode, cond=cond, detach=detach,
                   lam=_resolve(args, config, "lambda", 0.2, float),
                   gamma=_resolve(args, config, "gamma", 0.4, float))


def cmd_train(args, config: dict) -> int:
    out = _out_dir(args, config)
    seed = _resolve(args, config, "seed", 0, int)
    steps = _resolve(args, config, "steps", 1500, int)
    mode = _resolve(args, config, "mode", "baseline")
    geo_dim = _resolve(args, config, "geo-dim", 64, int)
    data_dir = Path(_resolve(args, config, "data", None) or ".")
    entries, table = _load_corpus(data_dir, geo_dim)
    train_langs = sorted({e.lang for e in entries if e.split == "train"})
    cfg = _train_config(args, config, mode, seed, steps)
    head = _head_for(len(train_langs), geo_dim)
    result = train_loop(cfg, _default_encoder(), head, entries, table,
                        data_dir, out,
                        progress=lambda rec: print(
                            f"step {rec.step + 1}/{steps} loss {rec.loss_total:.4f} "
                            f"lr {rec.lr:.3g}", flush=True))
    effective = {"seed": seed, "steps": steps, "mode": mode, "geo-dim": geo_dim,
                 "data": str(data_dir), "lambda": cfg.lam, "gamma": cfg.gamma,
                 "layers": list(cfg.cond.layers), "cond-share": cfg.cond.share,
                 "cond-freeze": cfg.cond.freeze, "detach": cfg.detach}
    write_run_meta(out, "train", effective,
                   [result.final_path, result.best_path, result.log_path])
    print(f"final checkpoint {result.final_path} "
          f"(best dev accuracy {result.best_dev_acc:.2f}%)")
    return EXIT_OK


def cmd_eval(args, config: dict) -> int:
    out = _out_dir(args, config)
    ckpt = _resolve(args, config, "ckpt", None)
    if ckpt is None:
        raise UsageError("eval requires --ckpt")
    data_dir = Path(_resolve(args, config, "data", None) or ".")
    splits = tuple(s for s in _resolve(args, config, "splits",
                                       "dev,dialect-dev").split(",") if s)
    model, _, _, _ = load_checkpoint(ckpt)
    entries = load_manifest(data_dir / "manifest.jsonl")
    report = evaluate(model, entries, splits, data_dir)
    artifacts = []
    report_path = out / "eval.json"
    payload = {
        "splits": {s: report.split_accuracy.get(s) for s in splits
                   if s in report.split_accuracy},
        "macro": report.macro_accuracy,
        "per_language": {s: report.lang_accuracy[s]
                         for s in report.lang_accuracy},
        "compactness": {f"{lang}/{split}": v
                        for (lang, split), v in report.compactness.items()},
    }
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    artifacts.append(report_path)
    if _resolve(args, config, "dump-embeddings", False, bool):
        artifacts.append(dump_embeddings(report, out / "embeddings.bin"))
    write_run_meta(out, "eval", {"ckpt": str(ckpt), "data": str(data_dir),
                                 "splits": list(splits)}, artifacts)
    for split in splits:
        if split in report.split_accuracy:
            print(f"{split}: {report.split_accuracy[split]:.2f}%")
    print(f"macro: {report.macro_accuracy:.2f}%")
    return EXIT_OK


def cmd_ablate(args, config: dict) -> int:
    out = _out_dir(args, config)
    seed = _resolve(args, config, "seed", 0, int)
    steps = _resolve(args, config, "steps", 300, int)
    geo_dim = _resolve(args, config, "geo-dim", 64, int)
    data_dir = Path(_resolve(args, config, "data", None) or ".")
    entries, table = _load_corpus(data_dir, geo_dim)
    train_langs = sorted({e.lang for e in entries if e.split == "train"})
    enc = _default_encoder()
    head = _head_for(len(train_langs), geo_dim)
    strategies = default_layer_strategies(enc.num_layers)
    grid = _resolve(args, config, "grid", "full")
    if grid != "full":
        wanted = [g for g in grid.split(",") if g]
        unknown = [g for g in wanted if g not in strategies]
        if unknown:
            raise UsageError(f"unknown grid strategies {unknown}; "
                             f"choose from {sorted(strategies)} or 'full'")
        strategies = {k: strategies[k] for k in wanted}
    base_cfg = _train_config(args, config, "baseline", seed, steps)
    rows = ablation_grid(base_cfg, enc, head, entries, table, data_dir, out,
                         strategies=strategies,
                         progress=lambda row: print(
                             f"{row['model']:9s} {row['layers']:7s} "
                             f"{row['share']:12s} {row['freeze']:10s} "
                             f"{row['status']}", flush=True))
    write_run_meta(out, "ablate", {"seed": seed, "steps": steps, "grid": grid},
                   [out / "grid.csv", out / "grid.md"])
    print(f"{len(rows)} rows -> {out / 'grid.md'}")
    return EXIT_OK


def cmd_geovec(args, config: dict) -> int:
    lat = _resolve(args, config, "lat", None, float)
    lon = _resolve(args, config, "lon", None, float)
    points = _resolve(args, config, "points", 64, int)
    if lat is None or lon is None:
        raise UsageError("geovec requires --lat and --lon")
    vec = geo_vector(GeoCoordinate(lat, lon), fibonacci_lattice(points))
    print(" ".join(f"{v:.6f}" for v in vec.values))
    return EXIT_OK


def _tiny_gradcheck_setup(seed: int):
    enc = EncoderConfig(conv_channels=(8, 8), conv_kernels=(6, 4),
                        conv_strides=(3, 2), num_layers=2, hidden_dim=8,
                        num_heads=2, ff_dim=16)
    head = HeadConfig(channels=8, embed_dim=4, num_classes=3, geo_dim=6,
                      subcenters=2, margin=0.2, scale=5.0)
    cond = CondConfig(layers=(0, 1), share="shared", freeze="trainable",
                      enabled=True)
    model = LIDModel(enc, cond, head, mode="geo-cond", seed=seed,
                     dtype=np.float64, labels=("a", "b", "c"))
    rng = np.random.default_rng(seed + 1)
    wave = rng.standard_normal((2, 96))
    labels = rng.integers(0, head.num_classes, size=2)
    geo = rng.uniform(0.0, 1.0, size=(2, head.geo_dim))

    def loss_fn():
        # detach disabled so every parameter is exercised through a fully
        # differentiable path, matching what finite differences measure
        trace = model.forward_full(wave, labels, geo, training=True,
                                   detach_cond=False, loss_cfg=LossConfig())
        return trace.loss_total

    return model, loss_fn


def cmd_gradcheck(args, config: dict) -> int:
    name = _resolve(args, config, "model-config", "tiny")
    if name != "tiny":
        raise UsageError(f"unknown gradcheck config {name!r} (only 'tiny')")
    seed = _resolve(args, config, "seed", 0, int)
    samples = _resolve(args, config, "samples", 400, int)
    tol = _resolve(args, config, "tol", 1e-4, float)
    model, loss_fn = _tiny_gradcheck_setup(seed)
    err = ad.gradcheck(loss_fn, model.params, max_entries=samples, seed=seed)
    print(f"max relative error: {err:.3e} (tolerance {tol:.1e})")
    return EXIT_OK if err <= tol else EXIT_RUNTIME


def cmd_version(args, config: dict) -> int:
    print(__version__)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="geolid",
                     description="Geolocation-aware spoken language "
                                 "identification toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override")
        p.add_argument("--seed", type=int, help="master random seed (default 0)")
        p.add_argument("--out", help="output directory (default $GEOLID_OUT or .)")
        p.add_argument("--threads", type=int,
                       help="cap numeric worker threads; 1 is fully serial")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--langs", type=int, help="number of languages (default 12)")
    p.add_argument("--dialect-langs", type=int,
                   help="languages with extra dialects (default 4)")
    p.add_argument("--extra-dialects", type=int,
                   help="extra dialects per dialect language (default 2)")
    p.add_argument("--train-per-lang", type=int,
                   help="train utterances per language (default 60)")
    p.add_argument("--dev-per-lang", type=int,
                   help="dev utterances per language (default 20)")
    p.add_argument("--dialect-dev-per-dialect", type=int,
                   help="dialect-dev utterances per extra dialect (default 20)")

    p = sub.add_parser("train", help="train a model on a generated corpus")
    common(p)
    p.add_argument("--data", help="corpus directory (manifest.jsonl, languages.csv)")
    p.add_argument("--steps", type=int, help="optimizer steps (default 1500)")
    p.add_argument("--mode", choices=("baseline", "geo-pred", "geo-cond"),
                   help="model variant (default baseline)")
    p.add_argument("--layers", help="conditioned layer indices, e.g. 3,4")
    p.add_argument("--cond-share", choices=("shared", "independent"),
                   help="one conditioning projection or one per layer")
    p.add_argument("--cond-freeze", choices=("frozen", "trainable"),
                   help="freeze the conditioning projection (default trainable)")
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="geolocation loss weight (default 0.2)")
    p.add_argument("--gamma", type=float,
                   help="intermediate geolocation loss weight (default 0.4)")
    p.add_argument("--no-detach", action="store_const", const=True,
                   help="let auxiliary-head gradients reach the encoder")
    p.add_argument("--geo-dim", type=int, help="lattice dimension (default 64)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", help="checkpoint archive to evaluate")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--splits", help="comma-separated splits (default dev,dialect-dev)")
    p.add_argument("--dump-embeddings", action="store_const", const=True,
                   help="also write per-split embeddings archive")

    p = sub.add_parser("ablate", help="train the conditioning ablation grid")
    common(p)
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--steps", type=int, help="steps per grid cell (default 300)")
    p.add_argument("--grid", help="'full' or comma-separated strategy names")
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="geolocation loss weight (default 0.2)")
    p.add_argument("--gamma", type=float,
                   help="intermediate geolocation loss weight (default 0.4)")
    p.add_argument("--geo-dim", type=int, help="lattice dimension (default 64)")

    p = sub.add_parser("geovec", help="print the geolocation vector of a coordinate")
    common(p)
    p.add_argument("--lat", type=float, help="latitude in degrees")
    p.add_argument("--lon", type=float, help="longitude in degrees")
    p.add_argument("--points", type=int, help="lattice point count (default 64)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    common(p)
    p.add_argument("--model-config", help="model size preset (only 'tiny')")
    p.add_argument("--samples", type=int,
                   help="sampled gradient entries (default 400)")
    p.add_argument("--tol", type=float,
                   help="max relative error tolerance (default 1e-4)")

    p = sub.add_parser("version", help="print the package version")
    common(p)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "geovec": cmd_geovec,
    "gradcheck": cmd_gradcheck,
    "version": cmd_version,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        # the --lambda flag lands on attribute lambda_; _resolve looks up "lambda"
        if hasattr(args, "lambda_"):
            setattr(args, "lambda", args.lambda_)
        config = load_config(args.config) if args.config else {}
        _set_threads(args, config)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GeoVecError, DataError, ConfigError, ShapeError, NumericError,
            CheckpointError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
