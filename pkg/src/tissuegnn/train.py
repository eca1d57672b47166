"""MEE loss, AdamW, reduce-on-plateau, early stopping and the fit loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .gnn import SurrogateModel, backward, forward, operators

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.005
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 1e-8
    early_stop_patience: int = 15
    n_batches: int = 8
    dropout: float = 0.1
    max_epochs: int = 500
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_delta: float = 1e-12

    def __post_init__(self):
        problems = []
        if not 0 < self.plateau_factor < 1:
            problems.append("plateau_factor must lie in (0, 1)")
        if self.min_lr <= 0:
            problems.append("min_lr must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            problems.append("patience values must be >= 1")
        if self.n_batches < 1:
            problems.append("n_batches must be >= 1")
        if self.initial_lr <= 0:
            problems.append("initial_lr must be positive")
        if self.max_epochs < 0:
            problems.append("max_epochs must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))


def mee_loss(pred, target):
    """Mean Euclidean error (mm) and its gradient w.r.t. ``pred``.

    The gradient of a node with zero error (norm < 1e-12) is taken as 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and target must both be (N, 3)")
    d = pred - target
    norm = np.linalg.norm(d, axis=1)
    n = len(d)
    safe = np.where(norm < 1e-12, 1.0, norm)
    grad = np.where((norm < 1e-12)[:, None], 0.0, d / (n * safe[:, None]))
    return float(norm.mean()), grad


# --- optimizer -----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    lr: float = 0.005

    @classmethod
    def zeros_like(cls, params, lr):
        z = lambda: [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        return cls(z(), z(), 0, lr)


def adamw_step(params, grads, state: OptimizerState, config: TrainConfig):
    """In-place AdamW update with decoupled weight decay."""
    for g in grads:
        for a in g.values():
            if not np.all(np.isfinite(a)):
                raise TrainingError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2, lr = config.beta1, config.beta2, state.lr
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for k in p:
            if config.weight_decay:
                p[k] *= 1.0 - lr * config.weight_decay
            m[k] *= b1
            m[k] += (1.0 - b1) * g[k]
            v[k] *= b2
            v[k] += (1.0 - b2) * g[k] ** 2
            p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + config.eps)
    return params, state


# --- schedules ----------------------------------------------------------------------

class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.1, patience=5, min_lr=1e-8, min_delta=1e-12):
        self.lr = lr
        self.factor, self.patience, self.min_lr, self.min_delta = factor, patience, min_lr, min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(val_losses, lr=0.005, factor=0.1, patience=5, min_lr=1e-8):
    """lr after replaying a history of validation losses."""
    s = PlateauScheduler(lr, factor, patience, min_lr)
    for v in val_losses:
        s.step(v)
    return s.lr


# --- fit ----------------------------------------------------------------------------

@dataclass
class FitResult:
    model: SurrogateModel
    log: list = field(default_factory=list)  # dicts: epoch, train_mee_mm, val_mee_mm, lr, seconds
    state: dict | None = None
    stopped_early: bool = False


def batches(n, n_batches, rng):
    """Shuffled index chunks of size ceil(n / n_batches)."""
    order = rng.permutation(n)
    size = max(1, math.ceil(n / n_batches))
    return [order[i:i + size] for i in range(0, n, size)]


def evaluate_mee(model, graph, samples, batch=32):
    if not samples:
        return math.nan
    losses = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        pred = forward(model, graph, np.stack([s.features for s in chunk]))[0]
        losses.extend(mee_loss(p, s.target)[0] for p, s in zip(pred, chunk))
    return float(np.mean(losses))


def fit(model: SurrogateModel, train, val, config: TrainConfig = TrainConfig(), graph=None,
        set_normalization=True, callback=None) -> FitResult:
    """Train on whole-graph samples; returns the best-validation model.

    ``graph`` defaults to the graph attached to the first sample.
    """
    if config.max_epochs == 0:
        return FitResult(model, [])
    if not train or not val:
        raise TrainingError("training and validation sets must be non-empty")
    graph = graph if graph is not None else train[0].graph
    if graph is None:
        raise TrainingError("no graph given and samples carry none")
    ops = operators(graph)
    model = model.copy()
    model.dropout = config.dropout
    if set_normalization:
        model.set_normalization([s.features for s in train])
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    state = OptimizerState.zeros_like(model.params, config.initial_lr)
    sched = PlateauScheduler(config.initial_lr, config.plateau_factor, config.plateau_patience,
                             config.min_lr, config.min_delta)
    best_val, best_params, best_epoch = math.inf, None, 0
    result = FitResult(model)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in batches(len(train), config.n_batches, rng):
            feats = np.stack([train[i].features for i in idx])
            pred, cache = forward(model, ops, feats, training=True, rng=rng)
            grad = np.empty_like(pred)
            for b, i in enumerate(idx):
                loss, grad[b] = mee_loss(pred[b], train[i].target)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                losses.append(loss)
            # batch loss is the mean of per-sample MEE
            grads = backward(model, cache, grad / len(idx))
            adamw_step(model.params, grads, state, config)
            model.bump()
        val_mee = evaluate_mee(model, ops, val)
        if not math.isfinite(val_mee):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        lr_used = state.lr
        if val_mee < best_val - config.min_delta:
            best_val, best_epoch = val_mee, epoch
            best_params = [{k: a.copy() for k, a in p.items()} for p in model.params]
        state.lr = sched.step(val_mee)
        row = {"epoch": epoch, "train_mee_mm": float(np.mean(losses)), "val_mee_mm": val_mee,
               "lr": lr_used, "seconds": time.perf_counter() - t0}
        result.log.append(row)
        if callback is not None:
            callback(row)
        log.debug("epoch %d train %.4f val %.4f lr %.2e", epoch, row["train_mee_mm"], val_mee, lr_used)
        if epoch - best_epoch >= config.early_stop_patience:
            result.stopped_early = True
            break
    final = model.copy()
    final.params = best_params
    final.bump()
    result.model = final
    result.state = {"epoch": result.log[-1]["epoch"], "best_val": best_val, "step": state.step,
                    "lr": state.lr, "m": state.m, "v": state.v}
    return result


LOG_FIELDS = ("epoch", "train_mee_mm", "val_mee_mm", "lr", "seconds")


def write_log(rows, path, include_seconds=True):
    fields = LOG_FIELDS if include_seconds else LOG_FIELDS[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in fields[1:]])
