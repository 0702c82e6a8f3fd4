"""Adam training with staircase LR decay, cross-validation, and sweeps.

All randomness (init, epoch shuffling, augmentation) derives from the run
seed, so a (seed, config, manifest) triple fully determines every logged
number. The learning rate follows lr0 * base^floor(t / every).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import AugmentConfig, augment, stratified_kfold
from .errors import ConfigError, TrainingError
from .layers import ModelParams, ModelSpec, build_darkcovidnet, forward, init_params, save_checkpoint
from .metrics import MetricsReport, aggregate_metrics, evaluate_predictions
from .osloss import OsConfig, os_penalty, os_penalty_value, partition, total_loss, weighted_cross_entropy
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_base: float = 0.7
    decay_every: int = 1000
    os: OsConfig = field(default_factory=OsConfig)
    os_enabled: bool = True
    augment: Optional[AugmentConfig] = None
    seed: int = 0
    num_classes: int = 3
    image_side: int = 256
    width_divisor: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr0", "decay_base", "decay_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")


def lr_at_step(t: int, cfg: TrainConfig) -> float:
    """Staircase decay: lr0 * base^floor(t / every)."""
    return cfg.lr0 * cfg.decay_base ** (t // cfg.decay_every)


class AdamState:
    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(t.data) for k, t in params.named()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.named()}
        self.t = 0


def adam_step(params: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter with a gradient."""
    state.t += 1
    t = state.t
    for name, p in params.named():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class FoldResult:
    fold: int
    train_acc: list
    train_loss: list
    val_acc: list
    val_loss: list
    os_penalty: list
    metrics: MetricsReport
    checkpoint: Optional[str] = None


def _predict_probs(spec: ModelSpec, params: ModelParams, images: np.ndarray,
                   batch_size: int) -> np.ndarray:
    probs = []
    for start in range(0, len(images), batch_size):
        xb = Tensor(images[start:start + batch_size])
        logits = forward(spec, params, xb, mode="eval").logits.data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(probs)


def train_fold(spec: ModelSpec, images: np.ndarray, labels: np.ndarray,
               train_idx: np.ndarray, val_idx: np.ndarray, cfg: TrainConfig,
               fold: int = 0, log_dir=None) -> tuple:
    """Train one fold; returns (FoldResult, ModelParams).

    Divergence (non-finite loss or gradient) raises TrainingError after
    saving the last good checkpoint when a log directory is given.
    """
    params = init_params(spec, seed=cfg.seed * 1000 + fold)
    state = AdamState(params)
    rng = np.random.default_rng(np.random.SeedSequence([0x7EA1, int(cfg.seed), fold]))
    aug_rng = np.random.default_rng(np.random.SeedSequence(
        [0xA0C, int(cfg.augment.seed if cfg.augment else 0), int(cfg.seed), fold]))
    weights = cfg.os.class_weights[:cfg.num_classes]
    lam = cfg.os.lam
    use_os = cfg.os_enabled and spec.os_k is not None and lam < 1.0

    steps_log = []
    result = FoldResult(fold=fold, train_acc=[], train_loss=[], val_acc=[],
                        val_loss=[], os_penalty=[], metrics=None)
    ckpt_path = None
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = log_dir / "checkpoint.osx"

    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(train_idx)
            correct = 0
            loss_sum = 0.0
            pen_sum = 0.0
            nseen = 0
            nbatches = 0
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                xb_np = images[idx]
                if cfg.augment is not None:
                    xb_np = np.stack([augment(s, cfg.augment, aug_rng) for s in xb_np])
                xb = Tensor(xb_np)
                yb = labels[idx]
                out = forward(spec, params, xb, mode="train")
                ce = weighted_cross_entropy(out.logits, yb, weights)
                pen_value = os_penalty_value(out.flatten_features.data, spec.os_k) if use_os else 0.0
                if use_os:
                    pen = os_penalty(partition(out.flatten_features, spec.os_k))
                    loss = total_loss(ce, pen, lam)
                else:
                    # lam == 1 contributes nothing from the penalty; keeping it
                    # out of the graph makes the baseline bitwise identical
                    loss = ce
                if not np.isfinite(float(loss.data)):
                    raise TrainingError(f"loss diverged at epoch {epoch}, step {state.t}")
                params.zero_grads()
                loss.backward()
                lr = lr_at_step(state.t, cfg)
                adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

                preds = out.logits.data.argmax(axis=1)
                correct += int((preds == yb).sum())
                loss_sum += float(loss.data) * len(idx)
                pen_sum += pen_value
                nseen += len(idx)
                nbatches += 1
                steps_log.append((state.t, lr, float(ce.data), float(pen_value), float(loss.data)))

            result.train_acc.append(correct / nseen)
            result.train_loss.append(loss_sum / nseen)
            result.os_penalty.append(pen_sum / nbatches)

            val_probs = _predict_probs(spec, params, images[val_idx], cfg.batch_size)
            val_preds = val_probs.argmax(axis=1)
            result.val_acc.append(float((val_preds == labels[val_idx]).mean()))
            logp = np.log(np.clip(val_probs, 1e-12, None))
            wy = np.asarray(weights)[labels[val_idx]]
            val_ce = float((-wy * logp[np.arange(len(val_idx)), labels[val_idx]]).mean())
            result.val_loss.append(val_ce)
    except TrainingError:
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, spec, params, cfg.seed)
        raise

    val_probs = _predict_probs(spec, params, images[val_idx], cfg.batch_size)
    result.metrics = evaluate_predictions(val_probs, labels[val_idx], cfg.num_classes)

    if log_dir is not None:
        with open(log_dir / "steps.csv", "w", encoding="utf-8") as fh:
            fh.write("step,lr,ce,os,total\n")
            for row in steps_log:
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r}\n")
        with open(log_dir / "epochs.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,train_acc,train_loss,val_acc,val_loss,os_penalty\n")
            for e in range(cfg.epochs):
                fh.write(f"{e},{result.train_acc[e]!r},{result.train_loss[e]!r},"
                         f"{result.val_acc[e]!r},{result.val_loss[e]!r},{result.os_penalty[e]!r}\n")
        save_checkpoint(ckpt_path, spec, params, cfg.seed)
        result.checkpoint = str(ckpt_path)
    return result, params


def build_spec_for(cfg: TrainConfig) -> ModelSpec:
    # lambda = 1 is the baseline endpoint: original architecture, CE only
    use_os = cfg.os_enabled and cfg.os.lam < 1.0
    os_k = cfg.os.k if use_os else None
    return build_darkcovidnet(cfg.num_classes, os_k, cfg.image_side, cfg.width_divisor)


def cross_validate(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                   n_folds: int = 5, out_dir=None, only_fold: Optional[int] = None) -> dict:
    """Train across stratified folds; returns per-fold results plus the mean
    and sample std of each metric."""
    spec = build_spec_for(cfg)
    splits = stratified_kfold(labels, n_folds=n_folds, seed=cfg.seed)
    results = []
    for fold, (train_idx, val_idx) in enumerate(splits):
        if only_fold is not None and fold != only_fold:
            continue
        fold_dir = Path(out_dir) / f"fold{fold}" if out_dir is not None else None
        res, _ = train_fold(spec, images, labels, train_idx, val_idx, cfg,
                            fold=fold, log_dir=fold_dir)
        results.append(res)
    aggregate = aggregate_metrics([r.metrics for r in results])
    return {"folds": results, "aggregate": aggregate}


def sweep(axis: str, values, base_cfg: TrainConfig, images: np.ndarray,
          labels: np.ndarray, n_folds: int = 5) -> list:
    """One cross_validate run per value of k or lambda; returns
    [(value, aggregate dict), ...]."""
    if axis not in ("k", "lambda"):
        raise ConfigError(f"sweep axis must be 'k' or 'lambda', got {axis!r}")
    rows = []
    for value in values:
        if axis == "k":
            cfg = replace(base_cfg, os=replace(base_cfg.os, k=int(value)))
        else:
            cfg = replace(base_cfg, os=replace(base_cfg.os, lam=float(value)))
        out = cross_validate(images, labels, cfg, n_folds=n_folds)
        rows.append((value, out["aggregate"]))
    return rows
