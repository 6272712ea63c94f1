"""Synthetic multilingual corpus with dialect variants.

Each "language" is a mixture of formant sinusoids, amplitude-modulated at a
language-specific rate over a noise floor. Dialects shift the formants and
jitter the modulation; all dialects share the parent language's geolocation
target. Signals are 8 kHz mono float32.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geovec import GeoCoordinate, LanguageGeoTable, ReferenceLattice, fibonacci_lattice

SAMPLE_RATE = 8000
SPLITS = ("train", "dev", "dialect-dev")
FORMANT_AMPLITUDES = (1.0, 0.6, 0.4)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DialectSpec:
    dialect_id: str
    formant_shift: tuple = (1.0, 1.0, 1.0)
    modulation_jitter: float = 0.0


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    code: str
    formants: tuple                  # Hz, one amplitude slot per formant
    modulation_rate: float           # Hz
    noise_floor: float
    coordinate: GeoCoordinate
    dialects: tuple = (DialectSpec("default"),)
    formant_jitter: float = 0.0      # per-utterance relative formant spread

    def __post_init__(self):
        if len(self.formants) < 1:
            raise DataError(f"{self.code}: at least one formant required")
        nyquist = SAMPLE_RATE / 2
        for f in self.formants:
            if not (0.0 < f < nyquist):
                raise DataError(f"{self.code}: formant {f} outside (0, {nyquist})")
        if not self.dialects:
            raise DataError(f"{self.code}: at least one dialect required")

    def dialect(self, dialect_id: str) -> DialectSpec:
        for d in self.dialects:
            if d.dialect_id == dialect_id:
                return d
        raise KeyError(f"language {self.code} has no dialect {dialect_id!r}")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    lang: str
    dialect: str
    split: str
    seconds: float
    path: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"invalid split {self.split!r}")


@dataclass(frozen=True)
class SamplingPlan:
    langs: tuple
    probs: np.ndarray
    beta: float


@dataclass
class Batch:
    wave: np.ndarray        # (B, L)
    labels: np.ndarray      # (B,) class indices
    geo: np.ndarray         # (B, G)
    langs: list
    ids: list


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary string/int components."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2 ** 63 - 1)


def synth_utterance(spec: SyntheticLanguageSpec, dialect_id: str, duration: float,
                    seed: int) -> np.ndarray:
    if not (0.5 <= duration <= 10.0):
        raise DataError(f"duration {duration} outside [0.5, 10] s")
    dialect = spec.dialect(dialect_id)
    rng = np.random.default_rng(seed)
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n, dtype=np.float64) / SAMPLE_RATE

    sig = np.zeros(n)
    for i, f in enumerate(spec.formants):
        shift = dialect.formant_shift[i] if i < len(dialect.formant_shift) else 1.0
        if spec.formant_jitter:
            shift *= 1.0 + spec.formant_jitter * rng.uniform(-1.0, 1.0)
        amp = FORMANT_AMPLITUDES[i % len(FORMANT_AMPLITUDES)]
        phase = rng.uniform(0.0, 2.0 * math.pi)
        sig += amp * np.sin(2.0 * math.pi * f * shift * t + phase)

    rate = spec.modulation_rate
    if dialect.modulation_jitter:
        rate *= 1.0 + dialect.modulation_jitter * rng.uniform(-1.0, 1.0)
    am_phase = rng.uniform(0.0, 2.0 * math.pi)
    envelope = 0.5 * (1.0 + np.sin(2.0 * math.pi * rate * t + am_phase))
    sig = envelope * sig + spec.noise_floor * rng.standard_normal(n)

    peak = np.max(np.abs(sig))
    if peak > 0:
        sig = 0.95 * sig / peak
    return sig.astype(np.float32)


@dataclass(frozen=True)
class CorpusCounts:
    train_per_lang: int = 60
    dev_per_lang: int = 20
    dialect_dev_per_dialect: int = 20


def gen_corpus(specs, counts: CorpusCounts, seed: int, out_dir,
               duration: float = 1.0) -> Path:
    """Write a signal store plus JSONL manifest; returns the manifest path."""
    specs = list(specs)
    if len(specs) < 2:
        raise DataError("at least 2 languages required")
    coords = {}
    for s in specs:
        key = (s.coordinate.latitude_deg, s.coordinate.longitude_deg)
        if key in coords:
            raise DataError(f"coordinate collision between {coords[key]} and {s.code}")
        coords[key] = s.code

    out_dir = Path(out_dir)
    sig_dir = out_dir / "signals"
    sig_dir.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []

    def emit(spec, dialect_id, split, index):
        utt_id = f"{spec.code}-{dialect_id}-{split}-{index:04d}"
        sig = synth_utterance(spec, dialect_id, duration, derive_seed(seed, utt_id))
        rel = f"signals/{utt_id}.f32"
        sig.astype("<f4").tofile(out_dir / rel)
        entries.append(ManifestEntry(utt_id, spec.code, dialect_id, split,
                                     duration, rel))

    for spec in specs:
        for i in range(counts.train_per_lang):
            emit(spec, "default", "train", i)
        for i in range(counts.dev_per_lang):
            emit(spec, "default", "dev", i)
        for d in spec.dialects:
            if d.dialect_id == "default":
                continue
            for i in range(counts.dialect_dev_per_dialect):
                emit(spec, d.dialect_id, "dialect-dev", i)

    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"id": e.utt_id, "lang": e.lang, "dialect": e.dialect,
                                 "split": e.split, "seconds": e.seconds,
                                 "path": e.path}) + "\n")
    return manifest


def load_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                entries.append(ManifestEntry(rec["id"], rec["lang"], rec["dialect"],
                                             rec["split"], float(rec["seconds"]),
                                             rec["path"]))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return entries


def load_signal(root, entry: ManifestEntry) -> np.ndarray:
    return np.fromfile(Path(root) / entry.path, dtype="<f4")


def manifest_langs(entries) -> list[str]:
    return sorted({e.lang for e in entries})


def balanced_sampler(counts: dict, beta: float) -> SamplingPlan:
    """Language draw probabilities proportional to count**beta."""
    if not counts:
        raise DataError("empty language counts")
    if not (0.0 <= beta <= 1.0):
        raise DataError(f"beta {beta} outside [0, 1]")
    langs = tuple(sorted(counts))
    weights = np.array([float(counts[l]) ** beta for l in langs])
    if np.any(weights <= 0):
        raise DataError("counts must be positive")
    return SamplingPlan(langs, weights / weights.sum(), beta)


def sample_batch(by_lang: dict, plan: SamplingPlan, batch_seconds: float,
                 rng: np.random.Generator, geo_table: LanguageGeoTable,
                 signals_root, labels: list[str], dtype=np.float32) -> Batch:
    """Draw languages from the plan, utterances uniformly within language."""
    label_index = {l: i for i, l in enumerate(labels)}
    chosen: list[ManifestEntry] = []
    total = 0.0
    while total < batch_seconds:
        lang = plan.langs[rng.choice(len(plan.langs), p=plan.probs)]
        pool = by_lang[lang]
        entry = pool[rng.integers(len(pool))]
        chosen.append(entry)
        total += entry.seconds
    waves = [load_signal(signals_root, e) for e in chosen]
    min_len = min(len(w) for w in waves)
    wave = np.stack([w[:min_len] for w in waves]).astype(dtype)
    geo = np.stack([geo_table.vector(e.lang).values for e in chosen]).astype(dtype)
    return Batch(wave=wave,
                 labels=np.array([label_index[e.lang] for e in chosen]),
                 geo=geo, langs=[e.lang for e in chosen],
                 ids=[e.utt_id for e in chosen])


def group_by_lang(entries, split: str = "train") -> dict:
    by_lang: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        if e.split == split:
            by_lang.setdefault(e.lang, []).append(e)
    return by_lang


def batch_iterator(entries, plan: SamplingPlan, batch_seconds: float, seed: int,
                   geo_table: LanguageGeoTable, signals_root, labels=None,
                   dtype=np.float32):
    """Deterministic stream of training batches."""
    if not entries:
        raise DataError("empty manifest")
    by_lang = group_by_lang(entries, "train")
    labels = labels or sorted(by_lang)
    step = 0
    while True:
        rng = np.random.default_rng(derive_seed(seed, "batch", step))
        yield sample_batch(by_lang, plan, batch_seconds, rng, geo_table,
                           signals_root, labels, dtype=dtype)
        step += 1


# ---------------------------------------------------------------------------
# default desk-scale corpus

def default_specs(num_languages: int = 12, num_dialect_languages: int = 4,
                  extra_dialects: int = 2, dialect_shift: float = 0.05,
                  noise_floor: float = 0.1,
                  formant_jitter: float = 0.02) -> list[SyntheticLanguageSpec]:
    """Languages on a Fibonacci lattice of coordinates, formants on a grid."""
    lattice = fibonacci_lattice(num_languages)
    coords = lattice.coordinates()
    specs = []
    for i in range(num_languages):
        # Geometric spacing keeps the relative gap between neighbouring
        # languages constant, so a given relative dialect shift never crosses
        # into another language's formant slot.
        f1 = 250.0 * 1.15 ** i
        f2 = 900.0 * 1.12 ** ((i * 5) % num_languages)
        f3 = 2100.0 * 1.05 ** ((i * 7) % num_languages)
        rate = 2.0 + 0.45 * i
        dialects = [DialectSpec("default")]
        if i < num_dialect_languages:
            for d in range(extra_dialects):
                sgn = 1.0 if d % 2 == 0 else -1.0
                shift = 1.0 + sgn * dialect_shift * (1.0 + 0.5 * d)
                dialects.append(DialectSpec(
                    f"d{d + 1}",
                    formant_shift=(shift, 1.0 / shift, shift),
                    modulation_jitter=0.15 * (d + 1)))
        specs.append(SyntheticLanguageSpec(
            code=f"lang{i:02d}", formants=(f1, f2, f3), modulation_rate=rate,
            noise_floor=noise_floor, coordinate=coords[i],
            dialects=tuple(dialects), formant_jitter=formant_jitter))
    return specs


def build_geo_table(specs, lattice: ReferenceLattice) -> LanguageGeoTable:
    table = LanguageGeoTable(lattice)
    for s in specs:
        table.add(s.code, s.coordinate)
    return table
