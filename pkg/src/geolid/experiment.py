"""Desk-scale directional experiment: baseline vs geolocation conditioning.

Trains both models on the synthetic corpus over several seeds and compares
dialect-split accuracy and intra-language embedding compactness.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import sha256_file
from .data import CorpusCounts, build_geo_table, default_specs, gen_corpus, load_manifest
from .evaluation import compactness, evaluate
from .geovec import fibonacci_lattice
from .model import CondConfig, EncoderConfig, HeadConfig
from .train import TrainConfig, load_checkpoint, train_loop

TOY_ENCODER = EncoderConfig(conv_channels=(32, 32, 64, 64),
                            conv_kernels=(10, 8, 6, 4),
                            conv_strides=(5, 4, 4, 2),
                            num_layers=6, hidden_dim=64, num_heads=4, ff_dim=128)
TOY_HEAD = HeadConfig(channels=64, embed_dim=32, num_classes=12, geo_dim=64,
                      subcenters=3, margin=0.1, scale=15.0)
COND_LAYERS = (3, 4)
CORPUS_SEED = 123


def desk_train_config(mode: str, seed: int, steps: int = 1500) -> TrainConfig:
    cond = CondConfig(layers=COND_LAYERS, share="shared", freeze="trainable",
                      enabled=True) if mode == "geo-cond" else CondConfig()
    warmup = max(1, steps // 15)
    decay = max(1, steps * 2 // 3)
    hold = max(0, steps - warmup - decay)
    return TrainConfig(mode=mode, total_steps=steps, warmup_steps=warmup,
                       hold_steps=hold, decay_steps=decay,
                       lr_init=1e-4, lr_peak=1e-3, lr_final=1e-4,
                       accumulation=1, batch_seconds=8.0,
                       lam=0.2, gamma=0.4, cond=cond, detach=True, seed=seed,
                       checkpoint_interval=max(1, steps // 3))


def build_desk_corpus(out_dir, corpus_seed: int = CORPUS_SEED,
                      counts: CorpusCounts | None = None):
    specs = default_specs(num_languages=12, num_dialect_languages=4,
                          extra_dialects=2)
    counts = counts or CorpusCounts(train_per_lang=60, dev_per_lang=20,
                                    dialect_dev_per_dialect=20)
    manifest = gen_corpus(specs, counts, corpus_seed, out_dir)
    lattice = fibonacci_lattice(TOY_HEAD.geo_dim)
    table = build_geo_table(specs, lattice)
    return load_manifest(manifest), table, specs


def dialect_language_codes(specs) -> list[str]:
    return [s.code for s in specs if len(s.dialects) > 1]


def intra_language_compactness(report, langs) -> float:
    """Mean compactness per dialect language over dev + dialect-dev embeddings."""
    scores = []
    for lang in langs:
        embs = []
        for split in ("dev", "dialect-dev"):
            if split not in report.embeddings:
                continue
            mask = np.array([l == lang for l in report.embedding_langs[split]])
            if mask.any():
                embs.append(report.embeddings[split][mask])
        stacked = np.concatenate(embs, axis=0)
        scores.append(compactness(stacked))
    return float(np.mean(scores))


@dataclass
class SeedOutcome:
    seed: int
    baseline_dialect_acc: float
    cond_dialect_acc: float
    baseline_compactness: float
    cond_compactness: float
    baseline_checksum: str
    cond_checksum: str


@dataclass
class DirectionalResult:
    outcomes: list = field(default_factory=list)

    @property
    def mean_baseline_acc(self) -> float:
        return float(np.mean([o.baseline_dialect_acc for o in self.outcomes]))

    @property
    def mean_cond_acc(self) -> float:
        return float(np.mean([o.cond_dialect_acc for o in self.outcomes]))

    @property
    def compactness_wins(self) -> int:
        return sum(o.cond_compactness < o.baseline_compactness for o in self.outcomes)


def run_one(mode: str, seed: int, steps, entries, geo_table, signals_root,
            out_dir, progress=None):
    cfg = desk_train_config(mode, seed, steps)
    result = train_loop(cfg, TOY_ENCODER, TOY_HEAD, entries, geo_table,
                        signals_root, out_dir, progress=progress)
    model, _, _, _ = load_checkpoint(result.best_path)
    report = evaluate(model, entries, ("dev", "dialect-dev"), signals_root)
    return result, model, report


def directional_experiment(out_dir, seeds=(0, 1, 2), steps: int = 1500,
                           progress=None) -> DirectionalResult:
    out_dir = Path(out_dir)
    corpus_dir = out_dir / "corpus"
    entries, table, specs = build_desk_corpus(corpus_dir)
    dialect_langs = dialect_language_codes(specs)

    result = DirectionalResult()
    for seed in seeds:
        per_mode = {}
        for mode in ("baseline", "geo-cond"):
            run_dir = out_dir / f"{mode}_seed{seed}"
            train_res, model, report = run_one(mode, seed, steps, entries, table,
                                               corpus_dir, run_dir, progress)
            per_mode[mode] = {
                "acc": report.split_accuracy.get("dialect-dev", 0.0),
                "compactness": intra_language_compactness(report, dialect_langs),
                "checksum": sha256_file(train_res.final_path),
            }
        result.outcomes.append(SeedOutcome(
            seed=seed,
            baseline_dialect_acc=per_mode["baseline"]["acc"],
            cond_dialect_acc=per_mode["geo-cond"]["acc"],
            baseline_compactness=per_mode["baseline"]["compactness"],
            cond_compactness=per_mode["geo-cond"]["compactness"],
            baseline_checksum=per_mode["baseline"]["checksum"],
            cond_checksum=per_mode["geo-cond"]["checksum"]))
    return result
