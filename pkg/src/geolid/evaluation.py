"""Accuracy, compactness, and ablation-grid reporting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import write_archive
from .data import ManifestEntry, load_signal
from .model import ConfigError, LIDModel


@dataclass
class EvalReport:
    labels: tuple
    split_accuracy: dict = field(default_factory=dict)     # split -> %
    lang_accuracy: dict = field(default_factory=dict)      # split -> {lang: %}
    confusion: dict = field(default_factory=dict)          # split -> (C, C) counts
    macro_accuracy: float = 0.0
    compactness: dict = field(default_factory=dict)        # (lang, split) -> score
    zero_embeddings: dict = field(default_factory=dict)    # split -> excluded count
    embeddings: dict = field(default_factory=dict)         # split -> (n, E)
    embedding_langs: dict = field(default_factory=dict)    # split -> [lang]


def classify(model: LIDModel, wave: np.ndarray) -> str:
    """Predicted language for one utterance; margin-free cosine scoring."""
    if not model.labels:
        raise ConfigError("model carries no class labels")
    trace = model.forward_inference(np.asarray(wave, dtype=model.dtype)[None, :])
    return model.labels[int(np.argmax(trace.logits.data[0]))]


def _normalize_rows(embs: np.ndarray):
    norms = np.linalg.norm(embs, axis=1)
    nonzero = norms > 0
    return embs[nonzero] / norms[nonzero, None], int((~nonzero).sum())


def compactness_detail(embs: np.ndarray, kind: str = "euclidean"):
    """Mean distance of L2-normalized embeddings to their centroid."""
    embs = np.asarray(embs, dtype=np.float64)
    if embs.ndim != 2 or embs.shape[0] < 2:
        raise ConfigError("compactness requires at least 2 embeddings")
    if kind not in ("euclidean", "cosine"):
        raise ConfigError(f"unknown distance kind {kind!r}")
    normed, excluded = _normalize_rows(embs)
    if normed.shape[0] < 2:
        raise ConfigError("fewer than 2 nonzero embeddings")
    centroid = normed.mean(axis=0)
    if kind == "euclidean":
        d = np.linalg.norm(normed - centroid, axis=1)
    else:
        cn = np.linalg.norm(centroid)
        d = 1.0 - (normed @ centroid) / cn if cn > 0 else np.ones(normed.shape[0])
    return float(d.mean()), excluded


def compactness(embs: np.ndarray, kind: str = "euclidean") -> float:
    return compactness_detail(embs, kind)[0]


def evaluate(model: LIDModel, entries, splits, signals_root,
             batch_size: int = 32) -> EvalReport:
    """Per-split accuracy, confusion, per-language compactness, macro average."""
    if not model.labels:
        raise ConfigError("model carries no class labels")
    labels = model.labels
    index = {l: i for i, l in enumerate(labels)}
    report = EvalReport(labels=labels)
    ncls = len(labels)

    for split in splits:
        split_entries = [e for e in entries if e.split == split]
        if not split_entries:
            continue  # reported as absent, not zero
        conf = np.zeros((ncls, ncls), dtype=np.int64)
        embs, elangs = [], []
        by_len: dict[int, list[ManifestEntry]] = {}
        waves = {e.utt_id: load_signal(signals_root, e) for e in split_entries}
        for e in split_entries:
            by_len.setdefault(len(waves[e.utt_id]), []).append(e)
        for group in by_len.values():
            for i in range(0, len(group), batch_size):
                chunk = group[i:i + batch_size]
                wave = np.stack([waves[e.utt_id] for e in chunk]).astype(model.dtype)
                trace = model.forward_inference(wave)
                preds = np.argmax(trace.logits.data, axis=1)
                for e, p in zip(chunk, preds):
                    conf[index[e.lang], p] += 1
                embs.append(trace.embedding.data)
                elangs.extend(e.lang for e in chunk)
        emb = np.concatenate(embs, axis=0)
        report.confusion[split] = conf
        total = conf.sum()
        report.split_accuracy[split] = 100.0 * conf.trace() / total
        per_lang = {}
        for lang in sorted({e.lang for e in split_entries}):
            row = conf[index[lang]]
            if row.sum():
                per_lang[lang] = 100.0 * row[index[lang]] / row.sum()
        report.lang_accuracy[split] = per_lang
        report.embeddings[split] = emb
        report.embedding_langs[split] = elangs
        zero_total = 0
        for lang in per_lang:
            mask = np.array([l == lang for l in elangs])
            if mask.sum() >= 2:
                score, excluded = compactness_detail(emb[mask])
                report.compactness[(lang, split)] = score
                zero_total += excluded
        report.zero_embeddings[split] = zero_total

    if report.split_accuracy:
        report.macro_accuracy = float(np.mean(list(report.split_accuracy.values())))
    return report


def dump_embeddings(report: EvalReport, path) -> Path:
    """Embeddings per split in the checkpoint archive format."""
    tensors = {}
    label_index = {l: i for i, l in enumerate(report.labels)}
    for split, emb in report.embeddings.items():
        tensors[f"emb/{split}"] = emb.astype(np.float32)
        tensors[f"label/{split}"] = np.array(
            [label_index[l] for l in report.embedding_langs[split]], dtype=np.int64)
    return write_archive(path, tensors, {"labels": list(report.labels)})


# ---------------------------------------------------------------------------
# ablation grid

def default_layer_strategies(num_layers: int) -> dict:
    """Quarter-depth selections scaled to the configured encoder depth."""
    q = max(1, num_layers // 3)
    strategies = {
        "bottom": tuple(range(0, q)),
        "middle": tuple(range(q, 2 * q)),
        "top": tuple(range(2 * q, min(3 * q, num_layers))),
        "full": tuple(range(num_layers)),
    }
    # very shallow encoders can leave a selection empty; drop those cells
    return {name: layers for name, layers in strategies.items() if layers}


def ablation_grid(base_cfg, enc_cfg, head_cfg, entries, geo_table, signals_root,
                  out_dir, strategies=None, splits=("dev", "dialect-dev"),
                  progress=None) -> list[dict]:
    """Train baseline, geo-pred, and every conditioning cell; report a table."""
    from .model import CondConfig
    from .train import load_checkpoint, train_loop

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    strategies = strategies or default_layer_strategies(enc_cfg.num_layers)
    cells = [("baseline", None, "-", "-"), ("geo-pred", None, "-", "-")]
    for sname in strategies:
        for share in ("shared", "independent"):
            for freeze in ("frozen", "trainable"):
                cells.append(("geo-cond", sname, share, freeze))

    rows = []
    for label, sname, share, freeze in cells:
        if label == "geo-cond":
            cond = CondConfig(layers=strategies[sname], share=share,
                              freeze=freeze, enabled=True)
            cfg = replace(base_cfg, mode="geo-cond", cond=cond)
            name = f"geo-cond_{sname}_{share}_{freeze}"
        else:
            cfg = replace(base_cfg, mode=label, cond=CondConfig())
            name = label
        row = {"model": label, "layers": sname or "-", "share": share,
               "freeze": freeze, "status": "ok"}
        try:
            result = train_loop(cfg, enc_cfg, head_cfg, entries, geo_table,
                                signals_root, out_dir / name)
            model, _, _, _ = load_checkpoint(result.best_path)
            report = evaluate(model, entries, splits, signals_root)
            for split in splits:
                row[split] = report.split_accuracy.get(split)
            row["macro"] = report.macro_accuracy
        except Exception as exc:  # a failing cell must not stop the grid
            row["status"] = f"failed: {exc}"
            for split in splits:
                row[split] = None
            row["macro"] = None
        rows.append(row)
        if progress:
            progress(row)

    _write_grid_reports(rows, splits, out_dir)
    return rows


def _fmt(x):
    return f"{x:.1f}" if isinstance(x, float) else ("-" if x is None else str(x))


def _write_grid_reports(rows, splits, out_dir) -> None:
    cols = ["model", "layers", "share", "freeze", *splits, "macro", "status"]
    with open(Path(out_dir) / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])

    best = {}
    for c in (*splits, "macro"):
        vals = [r[c] for r in rows if isinstance(r[c], float)]
        best[c] = max(vals) if vals else None
    lines = ["| " + " | ".join(cols) + " |",
             "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        cells = []
        for c in cols:
            v = _fmt(r[c])
            if c in best and isinstance(r[c], float) and r[c] == best[c]:
                v = f"**{v}**"
            cells.append(v)
        lines.append("| " + " | ".join(cells) + " |")
    (Path(out_dir) / "grid.md").write_text("\n".join(lines) + "\n")
