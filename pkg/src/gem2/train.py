"""Adam + EMA training loop, learning-rate schedule, losses and metrics."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError, InputError, NumericError
from .featurize import FeaturizerConfig, featurize, max_topo_dist, topo_distance
from .model import GEM2

logger = logging.getLogger(__name__)

LOSSES = ("L1", "binary_cross_entropy")

# (name, lowest, highest) max topological distance, inclusive
TOPO_BINS = (("short", 1, 7), ("moderate", 8, 11), ("long", 12, math.inf))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    base_lr: float = 4e-4
    warmup_epochs: float = 10
    warmup_start: float = 0.01
    hold_epochs: float = 40
    decay_every: float = 10
    decay_factor: float = 0.5
    total_epochs: int = 100
    max_steps: Optional[int] = None
    ema_decay: float = 0.999
    loss: str = "L1"
    seed: int = 0
    valid_fraction: float = 0.1
    normalize_targets: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.warmup_epochs < 0 or self.hold_epochs < 0 or self.decay_every <= 0:
            raise ConfigError("schedule lengths must be non-negative (decay_every positive)")

    @classmethod
    def quantum_preset(cls, **kw):
        return cls(batch_size=512, base_lr=4e-4, loss="L1", **kw)

    @classmethod
    def drug_preset(cls, **kw):
        return cls(batch_size=256, base_lr=2e-4, loss="binary_cross_entropy", **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def _exact(x):
    return Fraction(repr(float(x))) if isinstance(x, float) else Fraction(x)


def lr_at(epoch, config):
    """Warmup from ``warmup_start * base`` to ``base``, hold, then step decay.

    Evaluated in rational arithmetic on the decimal values of the config, so
    the result is the correctly rounded schedule value.
    """
    if epoch < 0:
        raise InputError("epoch must be non-negative")
    e = _exact(epoch)
    base = _exact(config.base_lr)
    warm = _exact(config.warmup_epochs)
    hold_end = warm + _exact(config.hold_epochs)
    if e < warm:
        start = _exact(config.warmup_start)
        return float(base * (start + (1 - start) * e / warm))
    if e < hold_end:
        return float(base)
    steps = math.floor((e - hold_end) / _exact(config.decay_every)) + 1
    return float(base * _exact(config.decay_factor) ** steps)


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    shadow: dict
    step: int = 0
    epoch: int = 0

    @classmethod
    def init(cls, params):
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        return cls(
            params=params,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            shadow={k: v.copy() for k, v in params.items()},
        )


def adam_step(state, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``state.params`` in place; returns ``state``."""
    for name, g in grads.items():
        if g.shape != state.params[name].shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, parameter {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.params[name] = state.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def ema_update(state, decay):
    for name, p in state.params.items():
        state.shadow[name] = decay * state.shadow[name] + (1.0 - decay) * p
    return state


def ema_apply(state):
    """Parameters used for evaluation."""
    return {k: v.copy() for k, v in state.shadow.items()}


# --- metrics ------------------------------------------------------------------------

def mae(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(pred - target)))


def roc_auc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC-AUC is undefined unless both classes are present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def topo_bin(value):
    for name, lo, hi in TOPO_BINS:
        if lo <= value <= hi:
            return name
    return None


# --- data ---------------------------------------------------------------------------

def split_records(records, valid_fraction=0.1, seed=0):
    """Honour per-record ``split`` tags when present, else a seeded random split."""
    if any(r.split is not None for r in records):
        train = [r for r in records if r.split in (None, "train")]
        valid = [r for r in records if r.split in ("valid", "validation", "val")]
        if not valid:
            raise InputError("dataset declares splits but no validation records")
        return train, valid
    order = np.random.default_rng([seed, 7]).permutation(len(records))
    n_valid = max(1, int(round(valid_fraction * len(records)))) if len(records) > 1 else 0
    valid = [records[i] for i in sorted(order[:n_valid])]
    train = [records[i] for i in sorted(order[n_valid:])]
    return train, valid


@dataclass
class TargetScaler:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, labels):
        labels = np.asarray(labels, dtype=np.float64)
        std = float(labels.std())
        return cls(float(labels.mean()), std if std > 0 else 1.0)

    def encode(self, y):
        return (y - self.mean) / self.std

    def decode(self, y):
        return y * self.std + self.mean


def _loss(kind, pred, target):
    if kind == "L1":
        return T.l1_loss(pred, target)
    return T.bce_with_logits(pred, target)


def predict(model, features, scaler=None, loss="L1"):
    """Inference-mode predictions (decoded regression values or probabilities)."""
    out = []
    with T.no_grad():
        for fs in features:
            y = float(model.forward(fs, training=False).data[0])
            out.append(scaler.decode(y) if scaler is not None and loss == "L1" else y)
    out = np.asarray(out)
    if loss == "binary_cross_entropy":
        out = 1.0 / (1.0 + np.exp(-out))
    return out


def validation_metric(model, features, labels, scaler, loss):
    preds = predict(model, features, scaler, loss)
    if loss == "L1":
        return mae(preds, labels)
    return roc_auc(preds, labels)


def _better(loss, new, best):
    if best is None:
        return True
    return new < best if loss == "L1" else new > best


@dataclass
class TrainResult:
    model: GEM2
    best_state: dict
    best_metric: Optional[float]
    log: list
    scaler: TargetScaler
    state: TrainState
    history: list = field(default_factory=list)

    @property
    def extra(self):
        return {"target_mean": self.scaler.mean, "target_std": self.scaler.std}


def train(
    train_records,
    valid_records,
    model_config,
    train_config,
    featurizer_config=None,
    log_path=None,
    model_seed=None,
    train_features=None,
    valid_features=None,
):
    """Optimise a fresh GEM-2 on ``train_records``; model selection on ``valid_records``.

    Each mini-batch is processed molecule by molecule and gradients are
    averaged. After every epoch the EMA parameters are scored on the
    validation set and the best ones are kept in ``best_state``. Pre-computed
    feature lists may be passed to skip featurisation.
    """
    tc = train_config
    if not train_records:
        raise InputError("training set is empty")
    if not valid_records:
        raise InputError("validation set is empty")
    featurizer_config = featurizer_config or FeaturizerConfig()
    train_fs = train_features or [featurize(r, featurizer_config) for r in train_records]
    valid_fs = valid_features or [featurize(r, featurizer_config) for r in valid_records]
    y_train = np.array([float(r.label) for r in train_records])
    y_valid = np.array([float(r.label) for r in valid_records])
    scaler = TargetScaler.fit(y_train) if tc.loss == "L1" and tc.normalize_targets else TargetScaler()
    targets = scaler.encode(y_train) if tc.loss == "L1" else y_train

    model = GEM2(model_config, seed=tc.seed if model_seed is None else model_seed)
    named = dict(model.named_parameters())
    state = TrainState.init({k: p.data for k, p in named.items()})
    steps_per_epoch = math.ceil(len(train_fs) / tc.batch_size)
    log, best_state, best_metric = [], None, None
    history = []
    start = time.perf_counter()

    def load(params):
        for k, p in named.items():
            p.assign(params[k])

    for epoch in range(tc.total_epochs):
        state.epoch = epoch
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(train_fs))
        epoch_loss, seen = 0.0, 0
        for b in range(steps_per_epoch):
            if tc.max_steps is not None and state.step >= tc.max_steps:
                break
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            lr = lr_at(epoch + b / steps_per_epoch, tc)
            load(state.params)
            model.zero_grad()
            drop_rng = np.random.default_rng([tc.seed, 1, state.step])
            batch_loss = 0.0
            try:
                for i in idx:
                    pred = model.forward(train_fs[i], training=True, rng=drop_rng)
                    loss = _loss(tc.loss, pred, np.array([targets[i]]))
                    batch_loss += loss.item()
                    T.backward(loss * (1.0 / len(idx)))
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
                adam_step(state, grads, lr, tc.beta1, tc.beta2, tc.adam_eps)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at step {state.step}: {exc}", checkpoint=best_state) from exc
            ema_update(state, tc.ema_decay)
            history.append(batch_loss / len(idx))
            epoch_loss += batch_loss
            seen += len(idx)
        if seen == 0:
            break
        load(ema_apply(state))
        metric = validation_metric(model, valid_fs, y_valid, scaler, tc.loss)
        if _better(tc.loss, metric, best_metric):
            best_metric, best_state = metric, ema_apply(state)
        entry = {
            "epoch": epoch,
            "step": state.step,
            "lr": lr,
            "train_loss": epoch_loss / seen,
            "val_metric": metric,
            "wall_ms": int(1000 * (time.perf_counter() - start)),
        }
        log.append(entry)
        logger.info("epoch %d step %d loss %.5f val %.5f", epoch, state.step, entry["train_loss"], metric)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    load(best_state)
    return TrainResult(model, best_state, best_metric, log, scaler, state, history)


def eval_grouped(model, records, scaler=None, featurizer_config=None, loss="L1"):
    """Overall and per max-topological-distance-bin MAE; empty bins are omitted."""
    featurizer_config = featurizer_config or FeaturizerConfig()
    if not records:
        raise InputError("evaluation set is empty")
    fs = [featurize(r, featurizer_config) for r in records]
    preds = predict(model, fs, scaler, loss)
    labels = np.array([float(r.label) for r in records])
    bins = [topo_bin(max_topo_dist(topo_distance(r))) for r in records]
    report = {"count": len(records), "overall_mae": mae(preds, labels), "groups": {}}
    for name, lo, hi in TOPO_BINS:
        sel = [i for i, b in enumerate(bins) if b == name]
        if sel:
            report["groups"][name] = {
                "count": len(sel),
                "max_topo_dist": [lo, None if hi == math.inf else hi],
                "mae": mae(preds[sel], labels[sel]),
            }
    if loss == "binary_cross_entropy" and 0 < labels.sum() < labels.size:
        report["roc_auc"] = roc_auc(preds, labels)
    return report
