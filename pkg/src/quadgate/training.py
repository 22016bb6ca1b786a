"""Weighted L1 loss, AdamW, cosine warm restarts, the training loop and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Modality, Sample, stack
from .errors import ContractError, NumericalError
from .model import QCrossAttPVT
from .nn import Parameter
from .tensor import Tensor
from .transmix import EligibilityRule, conditional_transmix, nearest_level, score_histogram

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "mae", "pc", "ae_sd", "lr", "loss")


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------


@dataclass
class WeightTable:
    """Per-score-level loss weights ``N / (c_l * k)``; empty levels weigh 0."""

    levels: np.ndarray
    weights: np.ndarray
    n: int
    k: int

    def lookup(self, scores) -> np.ndarray:
        return self.weights[nearest_level(scores, self.levels)]


def build_weight_table(histogram, n: int, k: int, levels=None) -> WeightTable:
    counts = np.asarray(histogram, dtype=np.float64)
    if len(counts) != k:
        raise ContractError(f"histogram has {len(counts)} levels, expected k={k}")
    if counts.sum() != n:
        raise ContractError(f"histogram sums to {counts.sum():g}, expected N={n}")
    weights = np.zeros(k)
    nz = counts > 0
    weights[nz] = n / (counts[nz] * k)
    levels = np.arange(k, dtype=np.float64) if levels is None else np.asarray(levels, dtype=np.float64)
    return WeightTable(levels, weights, int(n), int(k))


def weight_table_for(scores, modality) -> WeightTable:
    levels = Modality.parse(modality).levels
    hist = score_histogram(scores, levels)
    return build_weight_table(hist, len(np.ravel(scores)), len(levels), levels)


def weighted_l1_loss(preds: Tensor, targets, table: WeightTable | None) -> Tensor:
    """``mean_i w_i * |y_i - yhat_i|``, weights looked up from each target's level."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != targets.shape:
        raise ContractError(f"{preds.shape[0] if preds.ndim else 1} predictions for {targets.size} targets")
    w = np.ones_like(targets) if table is None else table.lookup(targets)
    return T.mean(T.mul(T.abs_(T.sub(preds, targets)), w))


# ----------------------------------------------------------------------
# optimiser and schedule
# ----------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """

    def __init__(self, params: Sequence[tuple[str, Parameter]] | Sequence[Parameter], lr: float = 1e-5,
                 betas: tuple[float, float] = (0.5, 0.99), eps: float = 1e-8, weight_decay: float = 0.01):
        items = list(params)
        if items and not isinstance(items[0], tuple):
            items = [(f"param{i}", p) for i, p in enumerate(items)]
        self.named = items
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in items]
        self.v = [np.zeros_like(p.data) for _, p in items]

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name}; step aborted")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for (_, p), m, v in zip(self.named, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def adamw_step(optimizer: AdamW) -> None:
    optimizer.step()


class CosineWarmRestarts:
    """Cosine decay from ``base_lr`` to ``min_lr`` over a period that grows by ``mult`` at each restart."""

    def __init__(self, base_lr: float, period: int, mult: int = 2, min_lr: float = 0.0):
        if period < 1:
            raise ContractError("restart period must be at least one step")
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.period = period
        self.t_cur = 0
        self.mult = mult

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.min_lr, self.t_cur, self.period)

    def step(self) -> float:
        self.t_cur += 1
        if self.t_cur >= self.period:
            self.t_cur = 0
            self.period *= self.mult
        return self.lr


def cosine_lr(base_lr: float, min_lr: float, t_cur: int, period: int) -> float:
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * t_cur / period)) / 2.0


def cosine_warm_restart_lr(state: CosineWarmRestarts) -> float:
    return state.lr


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    mae: float
    pc: float | None  # None when undefined (constant targets or predictions)
    ae_sd: float

    def pc_text(self) -> str:
        return "undefined" if self.pc is None else f"{self.pc:.6f}"


def evaluate(preds, targets) -> Metrics:
    """MAE, sample Pearson correlation and population std of the absolute errors."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != y.shape or p.size == 0:
        raise ContractError(f"need equal non-empty lengths, got {p.size} and {y.size}")
    ae = np.abs(p - y)
    pc_ = None
    pd, yd = p - p.mean(), y - y.mean()
    denom = math.sqrt(float(np.dot(pd, pd)) * float(np.dot(yd, yd)))
    if denom > 0:
        pc_ = min(1.0, max(-1.0, float(np.dot(pd, yd)) / denom))
    return Metrics(float(ae.mean()), pc_, float(ae.std()))


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 5e-5  # 1e-3 diverges after the first warm restart at desk scale
    min_lr: float = 0.0
    betas: tuple[float, float] = (0.5, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.01
    restart_mult: int = 2
    transmix: bool = True
    weighted_loss: bool = True
    modality: Modality = Modality.CIP
    seed: int = 0

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)
        self.betas = tuple(float(b) for b in self.betas)


def desk_training(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def paper_training(**overrides) -> TrainConfig:
    """Published schedule: 50 epochs, batch 16, lr 1e-5."""
    base = dict(epochs=50, batch_size=16, lr=1e-5)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainResult:
    model: QCrossAttPVT
    rows: list[dict] = field(default_factory=list)
    mixed_count: int = 0


def format_row(row: dict) -> list[str]:
    def f(v):
        if v is None:
            return "NA"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return [f(row[k]) for k in METRICS_HEADER]


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_HEADER)
        for r in rows:
            wr.writerow(format_row(r))


def _append_row(path, row: dict) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(METRICS_HEADER)
        wr.writerow(format_row(row))


def _row(epoch: int, split: str, m: Metrics, lr: float, loss: float) -> dict:
    return {"epoch": epoch, "split": split, "mae": m.mae, "pc": m.pc, "ae_sd": m.ae_sd, "lr": lr, "loss": loss}


def train(model: QCrossAttPVT, train_set: list[Sample], config: TrainConfig,
          test_set: list[Sample] | None = None, metrics_path=None, checkpoint_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the epoch loop; append one metrics row per split per epoch.

    A non-finite loss aborts the run with :class:`NumericalError`; when
    ``checkpoint_path`` is set the last finite parameters are saved there first.
    """
    from .checkpoint import save_checkpoint

    if not train_set:
        raise ContractError("training set is empty")
    images, scores = stack(train_set)
    n = len(images)
    table = weight_table_for(scores, config.modality) if config.weighted_loss else None
    rule = EligibilityRule(config.modality)
    shuffle_seq, aug_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    bs = config.batch_size
    iters = math.ceil(n / bs)
    opt = AdamW(list(model.named_parameters()), lr=config.lr, betas=config.betas,
                eps=config.eps, weight_decay=config.weight_decay)
    sched = CosineWarmRestarts(config.lr, iters, config.restart_mult, config.min_lr)
    if test_set:
        test_images, test_scores = stack(test_set)
    if metrics_path is not None and Path(metrics_path).exists():
        Path(metrics_path).unlink()

    result = TrainResult(model)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_preds, epoch_targets, losses = [], [], []
        for b in range(iters):
            idx = order[b * bs:(b + 1) * bs]
            xb, yb = images[idx], scores[idx]
            try:
                if config.transmix:
                    xb, yb, mixed = conditional_transmix(xb, yb, rule, model.attention_maps, aug_rng)
                    result.mixed_count += len(mixed)
                lr = sched.lr
                opt.lr = lr
                opt.zero_grad()
                preds = model(xb)
                loss = weighted_l1_loss(preds, yb, table)
                if not np.isfinite(loss.data):
                    raise NumericalError("non-finite loss")
            except NumericalError as exc:
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
                raise NumericalError(f"{exc} at epoch {epoch}, iteration {b + 1}") from None
            T.backward(loss)
            opt.step()
            sched.step()
            model.clear_caches()
            epoch_preds.append(preds.data.copy())
            epoch_targets.append(yb)
            losses.append(float(loss.data))
        train_metrics = evaluate(np.concatenate(epoch_preds), np.concatenate(epoch_targets))
        rows = [_row(epoch, "train", train_metrics, lr, float(np.mean(losses)))]
        if test_set:
            tp = model.predict(test_images)
            test_loss = float(weighted_l1_loss(Tensor(tp), test_scores, table).data)
            rows.append(_row(epoch, "test", evaluate(tp, test_scores), lr, test_loss))
        for r in rows:
            log.info("epoch %d %s loss=%.4f mae=%.4f", r["epoch"], r["split"], r["loss"], r["mae"])
            if metrics_path is not None:
                _append_row(metrics_path, r)
            if on_epoch is not None:
                on_epoch(r)
        result.rows.extend(rows)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return result
