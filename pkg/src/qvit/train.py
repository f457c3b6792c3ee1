"""Optimization, metrics and the training loop.

The loop is deliberately boring and mode-free: it shuffles with a seed
derived from (run seed, epoch), walks minibatches, clips the global
gradient norm, applies the decoupled-weight-decay optimizer under a
warmup-plus-cosine schedule, logs loss and ranking quality per epoch,
checkpoints, and finally re-evaluates the best validation checkpoint on the
test split. Two identical single-threaded runs produce byte-identical
outputs.

metrics.csv: header epoch,train_loss,val_loss,train_auc,val_auc,lr,
wall_time_s, one row per epoch, reals printed with 9 significant digits.
The wall_time_s column is written as 0 unless timing is enabled, because
measured wall time is the one quantity that would break the byte-identical
determinism contract.

roc.csv: a "# auc=<value>" first line, then threshold,fpr,tpr rows from
(0,0) to (1,1).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as md
from . import tensor as tn
from .data import Dataset
from .errors import ConfigError, MetricError, ShapeError, TrainingDiverged
from .model import ModelConfig, ParamStore


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. Defaults are desk scale; the full-size
    protocol (batch 256, 25 epochs, 5000 warmup steps) is reachable by
    overriding them."""

    batch_size: int = 32
    epochs: int = 10
    base_lr: float = 1e-3
    warmup_steps: int | None = None  # None: min(5000, 10% of total steps)
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    train_eval_samples: int = 0  # 0 evaluates the full training split
    keep_all_checkpoints: bool = True
    timing: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.base_lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("base_lr and clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.train_eval_samples < 0:
            raise ConfigError("weight_decay and train_eval_samples must be nonnegative")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
    """Plain in-place descent: p <- p - lr * grad."""
    _check_aligned(params, grads)
    for name, t in params.items():
        t.data = t.data - lr * grads[name]


class AdamWState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: ParamStore):
        self.step = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected adaptive update with decoupled weight decay.

    Decay is skipped for norm gains/offsets, biases, the class token and
    position embeddings (the registry's decay flags).
    """
    _check_aligned(params, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and params.decays(name):
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update


def _check_aligned(params: ParamStore, grads: dict[str, np.ndarray]) -> None:
    for name, t in params.items():
        if name not in grads:
            raise ShapeError(f"gradient registry missing {name!r}")
        if grads[name].shape != t.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {grads[name].shape}, expected {t.shape}"
            )


def collect_grads(params: ParamStore) -> dict[str, np.ndarray]:
    """Gradients in registry order; missing ones are zero."""
    out = {}
    for name, t in params.items():
        out[name] = np.zeros(t.shape) if t.grad is None else t.grad
    return out


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    """Scale all gradients down together if their joint L2 norm exceeds
    max_norm; never scales up."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


def lr_at(step: int, warmup: int, total_steps: int, base: float = 1e-3) -> float:
    """Linear warmup from 0 to base over `warmup` steps, then cosine decay
    to 0 at total_steps. Continuous at the warmup boundary."""
    if total_steps <= warmup:
        raise ConfigError(f"total_steps {total_steps} must exceed warmup {warmup}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup:
        return base * step / warmup if warmup else 0.0
    progress = (step - warmup) / (total_steps - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# metrics


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points, one per distinct score plus the (0,0)
    anchor at threshold +inf. Tied scores collapse to a single point."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1D and aligned")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < scores.size:
        threshold = scores[order[i]]
        while i < scores.size and scores[order[i]] == threshold:
            if labels[order[i]] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos, float(threshold)))
    return points


def auc(roc: list[tuple[float, float, float]]) -> float:
    """Area under the ROC curve by trapezoidal integration over fpr."""
    fpr = np.array([p[0] for p in roc])
    tpr = np.array([p[1] for p in roc])
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(tpr, fpr))


def auc_score(scores, labels) -> float:
    return auc(roc_curve(scores, labels))


# ---------------------------------------------------------------------------
# evaluation and the loop


def _softmax_class1(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e[:, 1] / e.sum(axis=1)


def predict(params: ParamStore, cfg: ModelConfig, dataset: Dataset, indices) -> tuple[np.ndarray, np.ndarray]:
    """Logits and labels over the given sample indices, in index order."""
    indices = list(indices)
    logits = np.empty((len(indices), cfg.num_classes))
    labels = np.empty(len(indices), dtype=np.int64)
    for row, i in enumerate(indices):
        logits[row] = md.forward(dataset.model_input(i), params, cfg).data
        labels[row] = dataset.label(i)
    return logits, labels


def class1_scores(logits: np.ndarray) -> np.ndarray:
    """Ranking score: softmax probability of class 1 (the dispersed class)."""
    return _softmax_class1(logits)


def evaluate(params: ParamStore, cfg: ModelConfig, dataset: Dataset, indices) -> tuple[float, float]:
    """Mean cross-entropy and AUC over the given sample indices."""
    logits, labels = predict(params, cfg, dataset, indices)
    loss = tn.cross_entropy_with_logits(tn.Tensor(logits), labels, reduction="mean").item()
    return loss, auc_score(_softmax_class1(logits), labels)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    train_auc: float
    val_auc: float
    lr: float
    wall_time_s: float


@dataclass
class RunRecord:
    rows: list[EpochRow] = field(default_factory=list)
    test_loss: float | None = None
    test_auc: float | None = None

    @property
    def best_epoch(self) -> int:
        """Epoch with the highest validation AUC; ties go to the earliest."""
        if not self.rows:
            raise MetricError("no completed epochs")
        best = max(self.rows, key=lambda r: (r.val_auc, -r.epoch))
        return best.epoch


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_metrics_csv(path, record: RunRecord) -> None:
    lines = ["epoch,train_loss,val_loss,train_auc,val_auc,lr,wall_time_s"]
    for r in record.rows:
        lines.append(
            f"{r.epoch},{_fmt(r.train_loss)},{_fmt(r.val_loss)},"
            f"{_fmt(r.train_auc)},{_fmt(r.val_auc)},{_fmt(r.lr)},{_fmt(r.wall_time_s)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_roc_csv(path, roc: list[tuple[float, float, float]]) -> None:
    lines = [f"# auc={_fmt(auc(roc))}", "threshold,fpr,tpr"]
    for fpr, tpr, threshold in roc:
        lines.append(f"{_fmt(threshold)},{_fmt(fpr)},{_fmt(tpr)}")
    Path(path).write_text("\n".join(lines) + "\n")


def train_run(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
              seed: int, out_dir, log=print) -> RunRecord:
    """Full training run; returns the per-epoch record and leaves
    metrics.csv, per-epoch checkpoints (optional), the best checkpoint and
    its final test evaluation under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_range = dataset.split_range("train")
    val_range = dataset.split_range("val")
    test_range = dataset.split_range("test")

    params = md.init_params(model_cfg, seed)
    state = AdamWState(params)
    steps_per_epoch = math.ceil(len(train_range) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup = train_cfg.warmup_steps
    if warmup is None:
        warmup = min(5000, max(1, total_steps // 10), total_steps - 1)
    if total_steps <= warmup:
        raise ConfigError(
            f"{total_steps} total steps do not cover the {warmup}-step warmup"
        )

    if train_cfg.train_eval_samples and train_cfg.train_eval_samples < len(train_range):
        train_eval = list(train_range)[: train_cfg.train_eval_samples]
    else:
        train_eval = list(train_range)
    log(f"training {model_cfg.mode} model: {params.total_params()} parameters, "
        f"{len(train_range)} train / {len(val_range)} val / {len(test_range)} test, "
        f"{total_steps} steps (warmup {warmup}), train metrics over {len(train_eval)} samples")

    record = RunRecord()
    best_auc = -math.inf
    best_dir = out_dir / "best"
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(np.asarray(train_range))
        for start in range(0, order.size, train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            images = np.stack([dataset.model_input(i) for i in batch])
            labels = np.array([dataset.label(i) for i in batch])
            step += 1
            lr = lr_at(step, warmup, total_steps, train_cfg.base_lr)
            params.zero_grads()
            with tn.Tape() as tape:
                logits = md.forward_batch(images, params, model_cfg)
                loss = tn.cross_entropy_with_logits(logits, labels, reduction="mean")
            tn.backward(loss, tape)
            grads = collect_grads(params)
            norm = global_norm(grads)
            if not (math.isfinite(loss.item()) and math.isfinite(norm)):
                raise TrainingDiverged(step, lr, norm)
            grads = clip_global_norm(grads, train_cfg.clip_norm)
            adamw_step(params, grads, state, lr, train_cfg)

        train_loss, train_auc = evaluate(params, model_cfg, dataset, train_eval)
        val_loss, val_auc = evaluate(params, model_cfg, dataset, val_range)
        elapsed = time.perf_counter() - t0 if train_cfg.timing else 0.0
        lr_end = lr_at(step, warmup, total_steps, train_cfg.base_lr)
        row = EpochRow(epoch, train_loss, val_loss, train_auc, val_auc, lr_end, elapsed)
        record.rows.append(row)
        log(f"epoch {epoch}: train_loss={_fmt(train_loss)} val_loss={_fmt(val_loss)} "
            f"train_auc={_fmt(train_auc)} val_auc={_fmt(val_auc)} lr={_fmt(lr_end)}")

        meta = {"epoch": epoch, "metrics": {
            "train_loss": train_loss, "val_loss": val_loss,
            "train_auc": train_auc, "val_auc": val_auc, "lr": lr_end,
        }}
        if train_cfg.keep_all_checkpoints:
            md.save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:03d}",
                               model_cfg, params, meta)
        if val_auc > best_auc:
            best_auc = val_auc
            md.save_checkpoint(best_dir, model_cfg, params, meta)

    write_metrics_csv(out_dir / "metrics.csv", record)

    best_cfg, best_params, best_meta = md.load_checkpoint(best_dir)
    record.test_loss, record.test_auc = evaluate(best_params, best_cfg, dataset, test_range)
    log(f"best epoch {best_meta['epoch']} (val_auc={_fmt(best_meta['metrics']['val_auc'])}): "
        f"test_loss={_fmt(record.test_loss)} test_auc={_fmt(record.test_auc)}")
    (out_dir / "test_metrics.csv").write_text(
        "best_epoch,test_loss,test_auc\n"
        f"{best_meta['epoch']},{_fmt(record.test_loss)},{_fmt(record.test_auc)}\n"
    )
    return record
