"""Training loop: tri-stage schedule, Adam, accumulation, checkpointing."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ParameterSet, Tape
from .checkpoint import read_archive, write_archive
from .data import balanced_sampler, derive_seed, group_by_lang, sample_batch
from .model import (CondConfig, ConfigError, EncoderConfig, HeadConfig,
                    LIDModel, LossConfig)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    total_steps: int = 1500
    warmup_steps: int = 100
    hold_steps: int = 400
    decay_steps: int = 1000
    lr_init: float = 2e-4
    lr_peak: float = 2e-3
    lr_final: float = 2e-4
    accumulation: int = 2
    batch_seconds: float = 16.0
    lam: float = 0.2
    gamma: float = 0.4
    beta_lang: float = 0.5
    cond: CondConfig = field(default_factory=CondConfig)
    detach: bool = True
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.warmup_steps + self.hold_steps + self.decay_steps > self.total_steps:
            raise ConfigError("schedule stages exceed total steps")
        for name in ("lr_init", "lr_peak", "lr_final"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.accumulation < 1:
            raise ConfigError("accumulation must be >= 1")
        if self.mode == "baseline" and not self.detach:
            raise ConfigError("detach cannot be disabled in baseline mode")


# Reference full-scale schedule used by the anchor checks.
REFERENCE_SCHEDULE = dict(warmup_steps=5000, hold_steps=20000, decay_steps=75000,
                      lr_init=6e-6, lr_peak=1e-5, lr_final=1e-6,
                      total_steps=100000)


def tri_stage_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, constant hold, exponential decay, then floor."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    w, h, d = cfg.warmup_steps, cfg.hold_steps, cfg.decay_steps
    if step < w:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * (step / w)
    if step <= w + h:
        return cfg.lr_peak
    if step <= w + h + d:
        frac = (step - w - h) / d
        return cfg.lr_peak * (cfg.lr_final / cfg.lr_peak) ** frac
    return cfg.lr_final


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParameterSet, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> None:
    """In-place Adam with bias correction; frozen parameters skipped."""
    state.t += 1
    t = state.t
    for name, tensor in params.items():
        if not params.trainable(name):
            continue
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        tensor.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(tensor.data.dtype)


@dataclass
class TrainLogRecord:
    step: int
    lr: float
    loss_class: float
    loss_geo: float
    loss_geo_inter: float
    loss_total: float
    secs: float


@dataclass
class TrainResult:
    final_path: Path
    best_path: Path
    log_path: Path
    history: list
    best_dev_acc: float
    final_step: int


LOG_HEADER = ("step", "lr", "loss_class", "loss_geo", "loss_geo_inter",
              "loss_total", "secs")


def save_checkpoint(path, model: LIDModel, state: AdamState, cfg: TrainConfig,
                    step: int, extra: dict | None = None) -> Path:
    tensors = dict(model.params.arrays())
    for name, arr in state.m.items():
        tensors[f"opt.m/{name}"] = arr
    for name, arr in state.v.items():
        tensors[f"opt.v/{name}"] = arr
    meta = {"model": model.config_dict(),
            "train": _train_cfg_dict(cfg),
            "step": step, "adam_t": state.t}
    meta.update(extra or {})
    return write_archive(path, tensors, meta)


def _train_cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["cond"] = asdict(cfg.cond)
    return d


def train_cfg_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    cond = d.pop("cond")
    cond["layers"] = tuple(cond.get("layers", ()))
    return TrainConfig(cond=CondConfig(**cond), **d)


def load_checkpoint(path):
    """Rebuild (model, adam state, step, train config) from an archive."""
    tensors, meta = read_archive(path)
    model = LIDModel.from_config_dict(meta["model"])
    state = AdamState(t=meta["adam_t"])
    for name in model.params.names():
        model.params[name].data = tensors[name].copy()
        mkey, vkey = f"opt.m/{name}", f"opt.v/{name}"
        if mkey in tensors:
            state.m[name] = tensors[mkey].copy()
            state.v[name] = tensors[vkey].copy()
    cfg = train_cfg_from_dict(meta["train"])
    return model, state, meta["step"], cfg


def train_loop(cfg: TrainConfig, enc_cfg: EncoderConfig, head_cfg: HeadConfig,
               entries, geo_table, signals_root, out_dir,
               resume_from=None, log_every: int = 50,
               progress=None) -> TrainResult:
    """Optimize a model on the manifest's train split.

    Writes ``train_log.csv``, ``ckpt_latest.bin`` and ``ckpt_best.bin`` under
    ``out_dir``; returns paths and the in-memory loss history.
    """
    from .evaluation import evaluate  # local import: evaluation also uses models

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_lang = group_by_lang(entries, "train")
    if not by_lang:
        raise ConfigError("manifest has no train entries")
    labels = sorted(by_lang)
    plan = balanced_sampler({l: len(v) for l, v in by_lang.items()}, cfg.beta_lang)
    loss_cfg = LossConfig(cfg.lam, cfg.gamma)

    if resume_from is not None:
        model, state, start_step, _ = load_checkpoint(resume_from)
    else:
        model = LIDModel(enc_cfg, cfg.cond, head_cfg, mode=cfg.mode,
                         seed=derive_seed(cfg.seed, "model"), labels=tuple(labels))
        state = AdamState()
        start_step = 0

    frozen_before = {n: model.params[n].data.copy() for n in model.params.names()
                     if not model.params.trainable(n) and not n.endswith(("running_mean",
                                                                          "running_var"))}
    latest = out_dir / "ckpt_latest.bin"
    best = out_dir / "ckpt_best.bin"
    log_path = out_dir / "train_log.csv"
    history: list[TrainLogRecord] = []
    best_acc = -1.0
    mode = "a" if resume_from is not None and log_path.exists() else "w"
    with open(log_path, mode, newline="") as log_fh:
        writer = csv.writer(log_fh)
        if mode == "w":
            writer.writerow(LOG_HEADER)

        for step in range(start_step, cfg.total_steps):
            t0 = time.perf_counter()
            lr = tri_stage_lr(step, cfg)
            acc_grads = None
            lc = lg = li = lt = 0.0
            for micro in range(cfg.accumulation):
                rng = np.random.default_rng(derive_seed(cfg.seed, "batch", step, micro))
                batch = sample_batch(by_lang, plan, cfg.batch_seconds, rng,
                                     geo_table, signals_root, labels,
                                     dtype=model.dtype)
                geo = None if cfg.mode == "baseline" else batch.geo
                with Tape():
                    trace = model.forward_full(batch.wave, batch.labels, geo,
                                               training=True, detach_cond=cfg.detach,
                                               loss_cfg=loss_cfg)
                    if not np.isfinite(trace.loss_total.data):
                        raise NumericError(
                            f"non-finite loss at step {step}; last checkpoint kept")
                    grads = ad.backward(trace.loss_total, model.params)
                if acc_grads is None:
                    acc_grads = grads
                else:
                    for name in acc_grads:
                        acc_grads[name] += grads[name]
                lc += trace.loss_class.item()
                lg += trace.loss_geo.item() if trace.loss_geo is not None else 0.0
                if trace.inter_geo_losses:
                    li += float(np.mean([l.item()
                                         for l in trace.inter_geo_losses.values()]))
                lt += trace.loss_total.item()
            inv = 1.0 / cfg.accumulation
            for name in acc_grads:
                acc_grads[name] *= inv
            adam_step(model.params, acc_grads, state, lr)

            rec = TrainLogRecord(step, lr, lc * inv, lg * inv, li * inv, lt * inv,
                                 time.perf_counter() - t0)
            history.append(rec)
            writer.writerow([rec.step, f"{rec.lr:.8g}", f"{rec.loss_class:.6f}",
                             f"{rec.loss_geo:.6f}", f"{rec.loss_geo_inter:.6f}",
                             f"{rec.loss_total:.6f}", f"{rec.secs:.4f}"])
            if progress and (step + 1) % log_every == 0:
                progress(rec)

            at_interval = (step + 1) % cfg.checkpoint_interval == 0
            if at_interval or step + 1 == cfg.total_steps:
                save_checkpoint(latest, model, state, cfg, step + 1)
                report = evaluate(model, entries, ("dev",), signals_root)
                acc = report.split_accuracy.get("dev", 0.0)
                if acc > best_acc:
                    best_acc = acc
                    save_checkpoint(best, model, state, cfg, step + 1,
                                    extra={"dev_accuracy": acc})

    for name, before in frozen_before.items():
        if not np.array_equal(before, model.params[name].data):
            raise NumericError(f"frozen parameter {name!r} changed during training")

    return TrainResult(latest, best, log_path, history, best_acc, cfg.total_steps)
