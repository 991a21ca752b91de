"""MixedLoss objective and the optimizer loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .io_utils import sha256_bytes
from .model import ModelParams, checkpoint_bytes, forward
from .numerics import Tensor
from .pipeline import FeatureSchema, WindowSet

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


class NumericError(RuntimeError):
    """Non-finite loss or parameters during training."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    gamma_cont: float = 1.0
    gamma_bool: float = 1.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.gamma_cont < 0 or self.gamma_bool < 0 or self.gamma_cont + self.gamma_bool == 0:
            raise ValueError("gamma weights must be >= 0 and not both 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    final_val_loss: float = float("nan")
    wall_clock: float = 0.0
    checksum: str = ""

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _entity_weights(mask: np.ndarray) -> np.ndarray:
    """1/|set_i| per channel of entity i, 0 where the entity has none."""
    counts = mask.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return mask * w


def mixed_loss(pred: Tensor, target: np.ndarray, schema: FeatureSchema,
               gamma_cont: float = 1.0, gamma_bool: float = 1.0) -> Tensor:
    """Entity-averaged MixedLoss over a batch.

    Per entity: gamma_cont * mean squared error over its scored continuous
    channels plus gamma_bool * mean BCE (on sigmoid of the raw score) over its
    scored Boolean channels; then the mean over entities and batch. With the
    same channel counts on every entity this is the pooled MSE + BCE form,
    and it equals the mean of the per-entity anomaly scores by construction.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.DimensionError(f"mixed_loss: pred {pred.shape} vs target {target.shape}")
    cont, boo = schema.masks()
    B, N = pred.shape[0], pred.shape[1]
    terms = []
    if gamma_cont > 0 and cont.any():
        w = Tensor(_entity_weights(cont) * gamma_cont / (B * N))
        terms.append(nx.sum_all(nx.mul(nx.square(nx.sub(pred, Tensor(target))), w)))
    if gamma_bool > 0 and boo.any():
        w = Tensor(_entity_weights(boo) * gamma_bool / (B * N))
        p = nx.clip(nx.sigmoid(pred), PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = np.where(boo, target, 0.0)
        bce = nx.add(nx.mul(nx.log(p), Tensor(-y)),
                     nx.mul(nx.log(nx.sub(Tensor(np.ones(p.shape)), p)), Tensor(y - 1.0)))
        terms.append(nx.sum_all(nx.mul(bce, w)))
    if not terms:
        return nx.sum_all(nx.scale(pred, 0.0))
    return terms[0] if len(terms) == 1 else nx.add(terms[0], terms[1])


class AdamW:
    """Adam with decoupled weight decay; decay is applied before the moment step."""

    def __init__(self, params: ModelParams, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.trainable()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.trainable()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, t in self.params.trainable():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            t.data *= 1.0 - self.lr * self.wd
            t.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def batch_loss(params: ModelParams, x: np.ndarray, y: np.ndarray, schema: FeatureSchema,
               cfg: TrainConfig) -> Tensor:
    out = forward(x, params)
    return mixed_loss(out.predictions, y, schema, cfg.gamma_cont, cfg.gamma_bool)


def evaluate_loss(params: ModelParams, windows: WindowSet, schema: FeatureSchema,
                  cfg: TrainConfig, batch_size: int = 256) -> float:
    frozen = params.freeze()
    total, n = 0.0, len(windows)
    for i in range(0, n, batch_size):
        xb, yb = windows.x[i:i + batch_size], windows.y[i:i + batch_size]
        total += batch_loss(frozen, xb, yb, schema, cfg).item() * len(xb)
    return total / n if n else float("nan")


def params_checksum(params: ModelParams) -> str:
    return sha256_bytes(checkpoint_bytes(params))


def train(params: ModelParams, windows: WindowSet, schema: FeatureSchema, cfg: TrainConfig,
          validation: WindowSet | None = None) -> tuple[ModelParams, TrainReport]:
    """Minimize MixedLoss over training windows in temporal order (no shuffling).

    The temperature is trained through its logarithm so it stays positive.
    Returns a copy of the parameters at the best epoch: lowest validation
    loss when ``validation`` is given (early stopping after ``patience``
    epochs without improvement), lowest training loss otherwise.
    """
    t_start = time.perf_counter()
    params = params.copy()
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay, cfg.betas, cfg.eps)
    report = TrainReport()
    best, best_score, stale = params.copy(), float("inf"), 0
    n = len(windows)
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            xb, yb = windows.x[i:i + cfg.batch_size], windows.y[i:i + cfg.batch_size]
            loss = batch_loss(params, xb, yb, schema, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            nx.backward(loss)
            opt.step()
            step += 1
            total += value * len(xb)
        for k, t in params.trainable():
            if not np.isfinite(t.data).all():
                raise NumericError(f"parameter {k} became non-finite at epoch {epoch}")
        report.epoch_losses.append(total / n)
        if validation is not None and len(validation):
            score = evaluate_loss(params, validation, schema, cfg)
            report.val_losses.append(score)
        else:
            score = report.epoch_losses[-1]
        logger.info("epoch %d train %.6g val %s", epoch, report.epoch_losses[-1],
                    report.val_losses[-1] if report.val_losses else "-")
        if score < best_score:
            best, best_score, stale = params.copy(), score, 0
            report.best_epoch = epoch
        else:
            stale += 1
            if validation is not None and stale >= cfg.patience:
                break
    if cfg.epochs == 0:
        best = params.copy()
    if validation is not None and len(validation):
        report.final_val_loss = evaluate_loss(best, validation, schema, cfg)
    report.wall_clock = time.perf_counter() - t_start
    report.checksum = params_checksum(best)
    return best, report
