"""Epoch-based training with teacher forcing, tracked metrics, divergence
detection, and bit-exact checkpoint/resume.

Metrics are token-weighted so the reported numbers do not depend on how
the data happened to be batched. Perplexity is exp(validation loss) by
construction, which is also how it is cross-checked against published
loss/perplexity pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .data import Batch, PAD_ID
from .errors import ConfigError, ContractError, DegenerateBatchError
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    params_from_arrays,
    save_checkpoint,
)

DIVERGENCE_PERPLEXITY_THRESHOLD = 1e7
DIVERGENCE_PATIENCE = 20

_METRIC_FIELDS = ("train_loss", "train_acc", "val_loss", "val_acc",
                  "val_perplexity", "wall_seconds")


def perplexity(loss: float) -> float:
    """exp(loss), saturating to inf instead of raising on overflow."""
    try:
        return math.exp(loss)
    except OverflowError:
        return math.inf


@dataclass
class EpochMetrics:
    """One epoch's curve point: losses, token accuracies, perplexity, timing."""

    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    val_perplexity: float
    wall_seconds: float

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in _METRIC_FIELDS)

    def to_record(self, run_id: str) -> dict:
        rec = {"run_id": run_id, "epoch": self.epoch}
        rec.update({f: getattr(self, f) for f in _METRIC_FIELDS})
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EpochMetrics":
        return cls(epoch=rec["epoch"], **{f: rec[f] for f in _METRIC_FIELDS})


def masked_accuracy(logits, tgt_out: np.ndarray, pad_id: int = PAD_ID) -> float:
    """Fraction of non-pad target positions whose argmax prediction is right."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    tgt_out = np.asarray(tgt_out)
    if data.shape[:2] != tgt_out.shape:
        raise ContractError(
            f"masked_accuracy: logits {data.shape} vs targets {tgt_out.shape}"
        )
    mask = tgt_out != pad_id
    n = int(mask.sum())
    if n == 0:
        raise DegenerateBatchError("masked_accuracy: every position is padding")
    pred = data.argmax(axis=-1)
    return float(((pred == tgt_out) & mask).sum() / n)


class AdamState:
    """Bias-corrected adaptive-moment optimizer state, one slot per parameter."""

    def __init__(self, params: ModelParams, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.named()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.named()}


def adam_step(params: ModelParams, state: AdamState):
    """One in-place update of every parameter from its accumulated gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.named():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (state.learning_rate / bc1) * m / denom


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    params: ModelParams
    opt: AdamState
    epoch: int = 0
    rng_shuffle: Rng = None
    rng_dropout: Rng = None
    best_val_loss: float = math.inf
    best_epoch: int = -1
    train_seconds: float = 0.0


def init_train_state(config: ModelConfig, learning_rate: float = 1e-4,
                     dtype=np.float32) -> TrainState:
    params = init_params(config, dtype=dtype)
    root = Rng(config.seed)
    return TrainState(
        params=params,
        opt=AdamState(params, learning_rate=learning_rate),
        epoch=0,
        rng_shuffle=root.split(1),
        rng_dropout=root.split(2),
    )


def run_epoch(state: TrainState, batches: list[Batch],
              pad_id: int = PAD_ID) -> tuple[float, float]:
    """One full teacher-forced pass; returns token-weighted (loss, accuracy).

    A non-finite batch loss does not crash: the epoch stops there, skips the
    parameter update, and surfaces the non-finite mean as the divergence
    signal.
    """
    loss_sum = 0.0
    correct_weight = 0.0
    n_tokens = 0
    for batch in batches:
        state.params.zero_grad()
        logits = forward(state.params, batch, training=True, rng=state.rng_dropout)
        loss = ad.cross_entropy_masked(logits, batch.tgt_out, pad_id)
        value = float(loss.data)
        n = batch.n_target_tokens
        if not math.isfinite(value):
            loss_sum = value  # poisons the epoch mean deliberately
            n_tokens = max(n_tokens, 1)
            break
        acc = masked_accuracy(logits, batch.tgt_out, pad_id)
        loss_sum += value * n
        correct_weight += acc * n
        n_tokens += n
        ad.backward(loss)
        adam_step(state.params, state.opt)
    state.epoch += 1
    if not math.isfinite(loss_sum):
        return float(loss_sum), 0.0
    return loss_sum / n_tokens, correct_weight / n_tokens


def evaluate(params: ModelParams, val_batches: list[Batch],
             pad_id: int = PAD_ID) -> tuple[float, float, float]:
    """Token-weighted (loss, accuracy, perplexity) with dropout off."""
    if not val_batches:
        raise ConfigError("evaluate: validation set is empty")
    loss_sum = 0.0
    correct_weight = 0.0
    n_tokens = 0
    for batch in val_batches:
        logits = forward(params, batch, training=False)
        loss = float(ad.cross_entropy_masked(logits, batch.tgt_out, pad_id).data)
        n = batch.n_target_tokens
        if not math.isfinite(loss):
            return loss, 0.0, math.nan if math.isnan(loss) else perplexity(loss)
        loss_sum += loss * n
        correct_weight += masked_accuracy(logits, batch.tgt_out, pad_id) * n
        n_tokens += n
    mean_loss = loss_sum / n_tokens
    return mean_loss, correct_weight / n_tokens, perplexity(mean_loss)


def detect_divergence(history: list[EpochMetrics],
                      threshold: float = DIVERGENCE_PERPLEXITY_THRESHOLD,
                      patience: int = DIVERGENCE_PATIENCE) -> str | None:
    """Pure function of the metric history: a halt reason, or None to continue.

    Halts immediately on any non-finite metric, or once validation
    perplexity has exceeded ``threshold`` for ``patience`` consecutive
    trailing epochs.
    """
    if not history:
        return None
    latest = history[-1]
    if not latest.is_finite():
        return "non-finite metric"
    run = 0
    for m in reversed(history):
        if m.val_perplexity > threshold:
            run += 1
        else:
            break
    if run >= patience:
        return (f"validation perplexity above {threshold:g} "
                f"for {run} consecutive epochs")
    return None


def save_train_state(state: TrainState, path):
    """Write a resumable checkpoint; restore continues bit-identically."""
    arrays = dict(state.params.arrays())
    for name, m in state.opt.m.items():
        arrays[f"adam.m.{name}"] = m
    for name, v in state.opt.v.items():
        arrays[f"adam.v.{name}"] = v
    extra = {
        "epoch": state.epoch,
        "adam": {
            "learning_rate": state.opt.learning_rate,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
            "t": state.opt.t,
        },
        "rng_shuffle": state.rng_shuffle.state(),
        "rng_dropout": state.rng_dropout.state(),
        "best_val_loss": state.best_val_loss,
        "best_epoch": state.best_epoch,
        "train_seconds": state.train_seconds,
    }
    save_checkpoint(path, state.params.config, arrays, extra_state=extra)


def restore_train_state(path) -> TrainState:
    config, arrays, extra = load_checkpoint(path)
    if extra is None:
        raise ContractError(f"checkpoint {path} has no training state")
    params = params_from_arrays(
        config, {k: v for k, v in arrays.items() if not k.startswith("adam.")})
    opt = AdamState(params, learning_rate=extra["adam"]["learning_rate"],
                    beta1=extra["adam"]["beta1"], beta2=extra["adam"]["beta2"],
                    eps=extra["adam"]["eps"])
    opt.t = extra["adam"]["t"]
    for name in params.names():
        opt.m[name] = arrays[f"adam.m.{name}"].copy()
        opt.v[name] = arrays[f"adam.v.{name}"].copy()
    return TrainState(
        params=params,
        opt=opt,
        epoch=extra["epoch"],
        rng_shuffle=Rng.from_state(extra["rng_shuffle"]),
        rng_dropout=Rng.from_state(extra["rng_dropout"]),
        best_val_loss=extra["best_val_loss"],
        best_epoch=extra["best_epoch"],
        train_seconds=extra["train_seconds"],
    )
