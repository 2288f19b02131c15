"""Distillation losses, training loops and multi-step quantization schedules."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (AdamState, Tensor, adam_step, add, cross_entropy, log_softmax,
                       mean_all, mul, no_grad, sub, sum_all)
from .errors import ArchitectureError, DimensionError, ScheduleError, TrainingError
from .model import Encoder, quantize_model
from .quantizers import QuantSpec

log = logging.getLogger(__name__)

FULL_PRECISION = QuantSpec.full_precision()


@dataclass
class Dataset:
    ids: np.ndarray      # int64 [n, seq]
    labels: np.ndarray   # int64 [n]

    def __len__(self):
        return len(self.labels)


@dataclass
class DistillConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    seed: int = 0
    w_logits: float = 1.0
    w_reps: float = 1.0
    temperature: float = 1.0
    carry_alpha: bool = True
    select_best: bool = True
    site_lr_mult: float = 1.0

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.warmup_ratio < 1:
            raise ValueError("weight_decay must be >= 0 and warmup_ratio in [0, 1)")


def lr_at(step: int, total: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup over ``warmup_ratio * total`` steps, then linear decay to zero."""
    warm = int(math.ceil(total * warmup_ratio))
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    return base_lr * max(0.0, (total - step) / max(1, total - warm))


# ------------------------------------------------------------------ losses

def _probs(logits, temperature):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits_loss(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """KL(p || q), p = softmax(teacher), q = softmax(student), averaged over the batch."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"logits shapes differ: {student_logits.shape} vs {t.shape}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(student_logits.data))):
        raise TrainingError("non-finite logits in distillation loss")
    p = _probs(t, temperature)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    n = t.shape[0]
    s = student_logits if temperature == 1.0 else mul(student_logits, 1.0 / temperature)
    cross = sum_all(mul(log_softmax(s, axis=-1), Tensor(p)))
    return mul(sub(Tensor(plogp.sum()), cross), 1.0 / n)


def reps_loss(student_blocks: Sequence[Tensor], teacher_blocks: Sequence) -> Tensor:
    """Sum over blocks of the mean squared difference of block outputs."""
    if len(student_blocks) != len(teacher_blocks):
        raise ArchitectureError(
            f"block count mismatch: student {len(student_blocks)} vs teacher {len(teacher_blocks)}")
    total = None
    for s, t in zip(student_blocks, teacher_blocks):
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        if s.shape != t.shape:
            raise ArchitectureError(f"block shape mismatch: {s.shape} vs {t.shape}")
        d = sub(s, Tensor(t))
        term = mean_all(mul(d, d))
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


# ------------------------------------------------------------------ metrics

class MetricsLog:
    """Append-only tab-separated records: run_id, stage, spec, epoch, split, metric, value."""

    HEADER = ("run_id", "stage", "spec", "epoch", "split", "metric", "value")

    def __init__(self, path=None, run_id: str = "run"):
        self.path = path
        self.run_id = run_id
        self.rows = []
        if path is not None:
            from pathlib import Path
            p = Path(path)
            if not p.exists() or p.stat().st_size == 0:
                p.write_text("\t".join(self.HEADER) + "\n", encoding="utf-8")

    def add(self, stage, spec, epoch, split, metric, value):
        row = (self.run_id, str(stage), str(spec), str(epoch), split, metric, f"{float(value):.6g}")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write("\t".join(row) + "\n")

    @staticmethod
    def read(path) -> list:
        lines = open(path, encoding="utf-8").read().splitlines()
        return [dict(zip(MetricsLog.HEADER, ln.split("\t"))) for ln in lines[1:] if ln]


# ------------------------------------------------------------------ training

def accuracy(model, data: Dataset, mode: str = "train", batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    logits = model.predict(data.ids, mode=mode, batch_size=batch_size) if isinstance(model, Encoder) \
        else model.predict(data.ids, batch_size=batch_size)
    return float((logits.argmax(axis=1) == data.labels).mean())


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _update(model: Encoder, cfg: DistillConfig, state: AdamState, lr: float):
    params = model.trainable()
    grads = {n: t.grad for n, t in params.items() if t.grad is not None}
    scale = {n: cfg.site_lr_mult for n in params if n.startswith("site.")}
    adam_step(params, grads, state, lr, cfg.weight_decay, no_decay=model.no_decay_names(),
              lr_scale=scale)
    model.clamp_sites()
    model.zero_grad()


def calibrate(model: Encoder, ids):
    """Initialize any uninitialized site (alpha*, beta=0) from one batch."""
    with no_grad():
        model.forward(ids)


@dataclass
class StepLosses:
    logits: float
    reps: float
    total: float

    def components(self):
        return {"logits": self.logits, "reps": self.reps}


def distill_step(student: Encoder, teacher: Encoder, ids, cfg: DistillConfig,
                 state: AdamState | None = None, lr: float | None = None) -> StepLosses:
    """One joint step on L_logits + L_reps; the teacher is evaluated without recording."""
    with no_grad():
        t_logits, t_blocks = teacher.forward(ids)
    s_logits, s_blocks = student.forward(ids)
    l_log = logits_loss(s_logits, t_logits.data, cfg.temperature)
    l_rep = reps_loss(s_blocks, [b.data for b in t_blocks])
    total = add(mul(l_log, cfg.w_logits), mul(l_rep, cfg.w_reps))
    if not np.isfinite(total.data):
        raise TrainingError("non-finite distillation loss")
    if total.requires_grad:
        total.backward()
    if state is not None:
        _update(student, cfg, state, cfg.lr if lr is None else lr)
    return StepLosses(l_log.item(), l_rep.item(), total.item())


def supervised_step(model: Encoder, ids, labels, cfg: DistillConfig, state: AdamState, lr: float) -> float:
    logits, _ = model.forward(ids)
    loss = cross_entropy(logits, labels)
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite cross-entropy loss")
    loss.backward()
    _update(model, cfg, state, lr)
    return loss.item()


@dataclass
class StageResult:
    stage: int
    spec: QuantSpec
    dev_acc: float
    best_epoch: int
    history: list = field(default_factory=list)   # (epoch, train_loss, dev_acc)
    teacher_spec: QuantSpec | None = None


def _snapshot(model: Encoder):
    return model.latent_state(), model.site_state()


def _restore(model: Encoder, snap):
    model.load_latent(snap[0])
    model.load_site_state(snap[1])


def _fit(model, train, dev, cfg, step_fn, stage, metrics):
    rng = np.random.default_rng(cfg.seed)
    n_batches = -(-len(train) // cfg.batch_size)
    total = n_batches * cfg.epochs
    state = AdamState()
    first = _batches(len(train), cfg.batch_size, np.random.default_rng(cfg.seed))[0]
    calibrate(model, train.ids[first])
    best = (-1.0, -1, None)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            lr = lr_at(step, total, cfg.lr, cfg.warmup_ratio)
            losses.append(step_fn(idx, state, lr))
            step += 1
        acc = accuracy(model, dev)
        tl = float(np.mean(losses))
        history.append((epoch, tl, acc))
        if metrics is not None:
            metrics.add(stage, model.quant, epoch, "train", "loss", tl)
            metrics.add(stage, model.quant, epoch, "dev", "accuracy", acc)
        log.info("stage %s spec %s epoch %d loss %.4f dev %.4f", stage, model.quant, epoch, tl, acc)
        if acc > best[0] or not cfg.select_best:
            best = (acc, epoch, _snapshot(model))
    _restore(model, best[2])
    return StageResult(stage, model.quant, best[0], best[1], history)


def train_supervised(model: Encoder, train: Dataset, dev: Dataset, cfg: DistillConfig,
                     metrics: MetricsLog | None = None, stage=0) -> StageResult:
    """Cross-entropy training (the full-precision teacher); keeps the best dev epoch."""
    return _fit(model, train, dev, cfg,
                lambda idx, st, lr: supervised_step(model, train.ids[idx], train.labels[idx], cfg, st, lr),
                stage, metrics)


def knowledge_distill(student: Encoder, teacher: Encoder, train: Dataset, dev: Dataset,
                      cfg: DistillConfig, metrics: MetricsLog | None = None, stage=1) -> StageResult:
    res = _fit(student, train, dev, cfg,
               lambda idx, st, lr: distill_step(student, teacher, train.ids[idx], cfg, st, lr).total,
               stage, metrics)
    res.teacher_spec = teacher.quant
    return res


def validate_schedule(schedule: Sequence[QuantSpec], source: QuantSpec = FULL_PRECISION) -> list:
    specs = [QuantSpec.parse(s) if isinstance(s, str) else s for s in schedule]
    prev = source
    for s in specs:
        if not prev.dominates(s):
            raise ScheduleError(f"schedule step {prev} -> {s} is not strictly decreasing")
        prev = s
    return specs


def parse_schedule(text: str) -> list:
    return [QuantSpec.parse(p) for p in text.split(",") if p.strip()]


@dataclass
class DistillRun:
    student: Encoder
    stages: list
    students: list = field(default_factory=list)   # one per stage


def multi_distill(h0: Encoder, schedule: Sequence[QuantSpec], train: Dataset, dev: Dataset,
                  cfg: DistillConfig, metrics: MetricsLog | None = None,
                  progressive: bool = False, **quant_kw) -> DistillRun:
    """Quantize teacher -> distill -> promote the student to teacher, for each schedule level.

    With ``progressive`` the teacher stays ``h0`` at every stage while the
    student is still initialized from the latest quantized model.
    """
    specs = validate_schedule(schedule, h0.quant)
    teacher = h0
    latest = h0
    stages, students = [], []
    for i, spec in enumerate(specs, start=1):
        student = quantize_model(latest, spec, carry_alpha=cfg.carry_alpha, **quant_kw)
        res = knowledge_distill(student, h0 if progressive else teacher, train, dev, cfg, metrics, stage=i)
        stages.append(res)
        students.append(student)
        latest = student
        teacher = student
    return DistillRun(latest, stages, students)


def progressive_distill(h0: Encoder, schedule, train, dev, cfg, metrics=None, **quant_kw) -> DistillRun:
    return multi_distill(h0, schedule, train, dev, cfg, metrics, progressive=True, **quant_kw)


def schedule_sweep(h0: Encoder, schedules: Sequence[Sequence[QuantSpec]], train: Dataset, dev: Dataset,
                   cfg: DistillConfig, metrics: MetricsLog | None = None, **quant_kw) -> list:
    """Run multi_distill per path; rows are (path, stage, spec, dev_acc).

    Stage 0 of every path is the full-precision source model.  Runs that
    share a schedule prefix reuse the already distilled prefix.
    """
    for s in schedules:
        validate_schedule(s, h0.quant)
    h0_acc = accuracy(h0, dev)
    cache = {}
    rows = []
    for sched in schedules:
        specs = validate_schedule(sched, h0.quant)
        path = "->".join(["32-32-32"] + [str(s) for s in specs])
        rows.append((path, 0, str(h0.quant), h0_acc))
        teacher = h0
        for i, spec in enumerate(specs, start=1):
            key = tuple(str(s) for s in specs[:i])
            if key not in cache:
                student = quantize_model(teacher, spec, carry_alpha=cfg.carry_alpha, **quant_kw)
                res = knowledge_distill(student, teacher, train, dev, cfg, metrics, stage=i)
                cache[key] = (student, res.dev_acc)
            student, acc = cache[key]
            rows.append((path, i, str(spec), acc))
            teacher = student
    return rows
