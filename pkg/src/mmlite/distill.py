"""Supervised training, knowledge distillation and evaluation loops."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, resolve_config
from .data import Dataset
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .model import Model, build_model, model_forward
from .tensor import Tape, Tensor, ops

DEFAULT_ALPHA = 0.5
DEFAULT_TEMPERATURE = 4.0


# ---------------------------------------------------------------------------
# losses

def kd_loss(student_logits: Tensor, teacher_logits, labels, T: float = DEFAULT_TEMPERATURE,
            alpha: float = DEFAULT_ALPHA) -> Tensor:
    """``alpha*CE + (1-alpha)*T^2*KL(softmax(t/T) || softmax(s/T))``, batch mean.

    The teacher logits are constants. With ``alpha == 1`` the teacher is not
    read at all.
    """
    T, alpha = float(T), float(alpha)
    if not T > 0 or not math.isfinite(T):
        raise ContractError(f"temperature must be positive and finite, got {T}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if student_logits.ndim != 2:
        raise ContractError(f"student logits must be [B, K], got {list(student_logits.shape)}")
    labels = np.asarray(labels)
    if labels.shape != (student_logits.shape[0],):
        raise ContractError(f"labels {list(labels.shape)} do not match batch {student_logits.shape[0]}")
    ce = ops.cross_entropy(student_logits, labels)
    if alpha == 1.0:
        return ce
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ContractError(f"teacher logits {list(t.shape)} vs student {list(student_logits.shape)}")
    t = t.astype(student_logits.dtype) / T
    log_pt = t - t.max(axis=1, keepdims=True)
    log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_qs = ops.log_softmax(ops.scale(student_logits, 1.0 / T))
    # KL = sum pt*(log pt - log qs); the constant entropy part carries no gradient
    cross = ops.sum(ops.mul(Tensor._wrap(pt), log_qs))
    B = student_logits.shape[0]
    kl = ops.add_scalar(ops.scale(cross, -1.0 / B), float((pt * log_pt).sum() / B))
    soft = ops.scale(kl, (1.0 - alpha) * T * T)
    if alpha == 0.0:
        return soft
    return ops.add(ops.scale(ce, alpha), soft)


# ---------------------------------------------------------------------------
# optimiser

def _no_decay(name: str) -> bool:
    return name.endswith("A_log") or name.endswith(".D") or name.endswith("bias")


class SGD:
    """SGD with momentum, cosine-decayed learning rate and selective weight decay.

    Aliased tensors appear once in the registry, so each receives one update
    from the sum of its gradients over every use site.
    """

    def __init__(self, model: Model, lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 1e-4,
                 total_steps: int = 1, min_lr: float = 0.0):
        if lr < 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ContractError("lr, weight_decay must be >= 0 and momentum in [0, 1)")
        self.params = list(model.params.items())
        self.base_lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.total_steps = max(int(total_steps), 1)
        self.min_lr = float(min_lr)
        self.step_count = 0
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}
        self.last_lr = self.lr

    @property
    def lr(self) -> float:
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))

    def describe(self) -> str:
        return (f"SGD momentum={self.momentum} lr={self.base_lr} cosine over {self.total_steps} steps, "
                f"weight_decay={self.weight_decay} (none on A_log, D, biases)")

    def step(self) -> None:
        lr = self.lr
        self.last_lr = lr
        if lr == 0.0:
            self.step_count += 1
            return
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay and not _no_decay(name):
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= t.dtype.type(lr) * v
        self.step_count += 1

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


def grad_norms(model: Model) -> dict:
    return {n: float(np.linalg.norm(t.grad)) for n, t in model.params.items() if t.grad is not None}


def train_step(model: Model, batch, labels, opt: SGD, teacher_logits=None,
               alpha: float = 1.0, T: float = DEFAULT_TEMPERATURE) -> float:
    """One forward/backward/update; returns the loss value.

    Raises :class:`TrainingError` with the last learning rate and gradient
    norms when the loss or any gradient is not finite.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    opt.zero_grad()
    try:
        with Tape() as tape:
            logits = model_forward(model, x)
            loss = kd_loss(logits, teacher_logits, labels, T=T, alpha=alpha)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError("loss is not finite")
        tape.backward(loss)
    except NumericError as exc:
        norms = grad_norms(model)
        worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
        raise TrainingError(f"non-finite value at step {opt.step_count}: {exc}; last lr {opt.last_lr:.6g}; "
                            f"largest grad norms {worst}") from exc
    bad = [n for n, t in model.params.items() if t.grad is not None and not np.all(np.isfinite(t.grad))]
    if bad:
        raise TrainingError(f"non-finite gradients at step {opt.step_count} in {bad[:5]}; "
                            f"last lr {opt.last_lr:.6g}")
    opt.step()
    return value


# ---------------------------------------------------------------------------
# evaluation

def predict_logits(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Logits for an image array, without gradient recording."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model_forward(model, Tensor(np.asarray(images[i:i + batch_size], dtype=model.dtype))).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), dtype=model.dtype)


def evaluate(model: Model, dataset: Dataset, split: str = "val", batch_size: int = 128):
    """Top-1 accuracy and mean cross-entropy over a split."""
    images, labels = dataset.split(split)
    if len(labels) == 0:
        raise ContractError(f"split {split!r} is empty")
    logits = predict_logits(model, images, batch_size).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return acc, loss


# ---------------------------------------------------------------------------
# reports

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float]
    lr: float


@dataclass
class TrainReport:
    config_name: str
    seed: int
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None
    hyperparams: dict = field(default_factory=dict)

    @property
    def final_train_acc(self) -> float:
        return self.epochs[-1].train_acc if self.epochs else float("nan")

    @property
    def final_val_acc(self) -> Optional[float]:
        return self.epochs[-1].val_acc if self.epochs else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc", "lr"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.train_acc),
                        "" if e.val_acc is None else repr(e.val_acc), repr(e.lr)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"model: {self.config_name}", f"seed: {self.seed}"]
        lines += [f"{k}: {v}" for k, v in self.hyperparams.items()]
        for e in self.epochs:
            val = "-" if e.val_acc is None else f"{e.val_acc:.4f}"
            lines.append(f"epoch {e.epoch:3d}  loss {e.train_loss:.4f}  train_acc {e.train_acc:.4f}  "
                         f"val_acc {val}  lr {e.lr:.5f}")
        lines.append(f"wall_clock_s: {self.wall_clock:.2f}")
        lines.append(f"checkpoint: {self.checkpoint or '-'}")
        return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(EpochMetrics(int(rec["epoch"]), float(rec["train_loss"]), float(rec["train_acc"]),
                                 float(rec["val_acc"]) if rec["val_acc"] else None, float(rec["lr"])))
    return rows


# ---------------------------------------------------------------------------
# loops

def _check_compatible(cfg: ModelConfig, dataset: Dataset) -> None:
    if tuple(dataset.resolution) != tuple(cfg.input_resolution) or dataset.channels != cfg.in_channels:
        raise ConfigError(f"dataset {dataset.channels}x{dataset.resolution} does not match model "
                          f"{cfg.in_channels}x{cfg.input_resolution}")
    if dataset.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model {cfg.num_classes}")


def train(model: Model, dataset: Dataset, epochs: int = 10, lr: float = 0.05, batch_size: int = 32,
          seed: int = 0, weight_decay: float = 1e-4, teacher_logits: Optional[np.ndarray] = None,
          alpha: float = 1.0, T: float = DEFAULT_TEMPERATURE, out: Optional[Union[str, Path]] = None,
          eval_every: int = 1, log=None) -> TrainReport:
    """Minibatch training; ``teacher_logits`` (aligned with the train split) enables distillation."""
    _check_compatible(model.config, dataset)
    images, labels = dataset.split("train")
    n = len(labels)
    if n == 0:
        raise ContractError("training split is empty")
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be >= 1")
    if teacher_logits is not None and teacher_logits.shape != (n, model.config.num_classes):
        raise ContractError(f"teacher logits {teacher_logits.shape} do not cover the train split")
    steps_per_epoch = math.ceil(n / batch_size)
    opt = SGD(model, lr=lr, weight_decay=weight_decay, total_steps=epochs * steps_per_epoch)
    rng = np.random.default_rng(seed)
    report = TrainReport(model.config.name, seed, hyperparams={
        "optimizer": opt.describe(), "batch_size": batch_size, "epochs": epochs,
        "distillation": "off" if teacher_logits is None or alpha == 1.0 else f"alpha={alpha} T={T}",
    })
    has_val = len(dataset.labels) > dataset.n_train
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        total, correct, seen = 0.0, 0, 0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            tl = None if teacher_logits is None else teacher_logits[idx]
            lr_used = opt.lr
            total += train_step(model, images[idx], labels[idx], opt, tl, alpha, T) * len(idx)
            seen += len(idx)
        train_acc, _ = evaluate(model, dataset, "train")
        val_acc = evaluate(model, dataset, "val")[0] if has_val and (epoch % eval_every == 0 or epoch == epochs) \
            else None
        report.epochs.append(EpochMetrics(epoch, total / seen, train_acc, val_acc, lr_used))
        if log is not None:
            log(report.epochs[-1])
    report.wall_clock = time.perf_counter() - t0
    if out is not None:
        report.checkpoint = str(save_checkpoint(model, out))
    return report


def distill_run(teacher: Union[Model, str, Path], student_cfg: Union[ModelConfig, str], dataset: Dataset,
                alpha: float = DEFAULT_ALPHA, T: float = DEFAULT_TEMPERATURE, epochs: int = 10, lr: float = 0.05,
                batch_size: int = 32, seed: int = 0, weight_decay: float = 1e-4,
                out: Optional[Union[str, Path]] = None, log=None):
    """Train a fresh student against a frozen teacher; returns ``(report, student)``.

    Teacher logits are computed once, outside any tape, on the same
    preprocessed inputs the student sees.
    """
    teacher_model = teacher if isinstance(teacher, Model) else load_checkpoint(teacher)
    cfg = resolve_config(student_cfg)
    if teacher_model.config.num_classes != cfg.num_classes:
        raise ConfigError(f"teacher has {teacher_model.config.num_classes} classes, "
                          f"student {cfg.num_classes}")
    _check_compatible(teacher_model.config, dataset)
    student = build_model(cfg, seed=seed)
    t_logits = None
    if alpha < 1.0:
        images, _ = dataset.split("train")
        t_logits = predict_logits(teacher_model, images)
    report = train(student, dataset, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed,
                   weight_decay=weight_decay, teacher_logits=t_logits, alpha=alpha, T=T, out=out, log=log)
    report.hyperparams["teacher"] = teacher_model.config.name
    report.hyperparams["distillation"] = f"alpha={alpha} T={T}"
    return report, student


__all__ = ["DEFAULT_ALPHA", "DEFAULT_TEMPERATURE", "EpochMetrics", "SGD", "TrainReport", "distill_run",
           "evaluate", "grad_norms", "kd_loss", "parse_report_csv", "predict_logits", "train", "train_step"]
