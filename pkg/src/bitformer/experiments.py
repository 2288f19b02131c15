"""Paired, seeded experiments on synthetic tasks.

A :class:`Study` trains one full-precision teacher per seed and memoizes every
distilled stage by (seed, schedule prefix, site map, elastic flag), so
comparisons that share a prefix (direct W1A1 appears in several of them) are
only trained once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Vocab, encode, synth_task
from .distill import Dataset, DistillConfig, MetricsLog, accuracy, knowledge_distill, train_supervised
from .model import Encoder, ModelConfig, quantize_model
from .quantizers import QuantSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskSetup:
    kind: str = "keyword-presence"
    n: int = 2000
    max_len: int = 16
    length: tuple = (6, 14)
    fp_epochs: int = 2
    epochs: int = 2
    lr: float = 5e-4
    batch_size: int = 32
    num_layers: int = 4
    d_model: int = 128

    def distill_config(self, seed: int) -> DistillConfig:
        return DistillConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=seed)


@dataclass
class Prepared:
    seed: int
    vocab: Vocab
    train: Dataset
    dev: Dataset
    teacher: Encoder
    teacher_acc: float


def prepare(setup: TaskSetup, seed: int) -> Prepared:
    tr, dv = synth_task(setup.kind, setup.n, seed=seed, length=setup.length)
    vocab = Vocab.build(e.text for e in tr)
    train = Dataset(*encode(tr, vocab, setup.max_len))
    dev = Dataset(*encode(dv, vocab, setup.max_len))
    cfg = ModelConfig(num_layers=setup.num_layers, num_heads=4, d_model=setup.d_model,
                      d_ff=4 * setup.d_model, vocab_size=len(vocab), max_seq_len=setup.max_len)
    teacher = Encoder(cfg, seed=seed)
    fp_cfg = DistillConfig(lr=setup.lr, batch_size=setup.batch_size, epochs=setup.fp_epochs, seed=seed)
    res = train_supervised(teacher, train, dev, fp_cfg)
    return Prepared(seed, vocab, train, dev, teacher, res.dev_acc)


def _key(specs):
    return tuple(str(s) for s in specs)


class Study:
    def __init__(self, setup: TaskSetup = TaskSetup(), metrics: MetricsLog | None = None):
        self.setup = setup
        self.metrics = metrics
        self._prep = {}
        self._stages = {}

    def prepared(self, seed: int) -> Prepared:
        if seed not in self._prep:
            self._prep[seed] = prepare(self.setup, seed)
            log.info("seed %d teacher dev %.4f", seed, self._prep[seed].teacher_acc)
        return self._prep[seed]

    def run(self, seed: int, schedule: Sequence, two_set: bool = True, elastic: bool = True) -> list:
        """Dev accuracy after each stage of ``schedule`` (multi-distillation)."""
        prep = self.prepared(seed)
        specs = [QuantSpec.parse(s) if isinstance(s, str) else s for s in schedule]
        cfg = self.setup.distill_config(seed)
        teacher = prep.teacher
        accs = []
        for i, spec in enumerate(specs, start=1):
            key = (seed, _key(specs[:i]), two_set, elastic)
            if key not in self._stages:
                student = quantize_model(teacher, spec, carry_alpha=cfg.carry_alpha,
                                         two_set=two_set, elastic=elastic)
                res = knowledge_distill(student, teacher, prep.train, prep.dev, cfg, self.metrics, stage=i)
                self._stages[key] = (student, res.dev_acc)
                log.info("seed %d %s two_set=%s elastic=%s: %.4f", seed, "->".join(key[1]),
                         two_set, elastic, res.dev_acc)
            teacher, acc = self._stages[key]
            accs.append(acc)
        return accs

    def final(self, seed: int, schedule: Sequence, **kw) -> float:
        return self.run(seed, schedule, **kw)[-1]

    def student(self, seed: int, schedule: Sequence, two_set: bool = True, elastic: bool = True) -> Encoder:
        self.run(seed, schedule, two_set, elastic)
        return self._stages[(seed, _key(schedule), two_set, elastic)][0]


@dataclass
class Paired:
    name_a: str
    name_b: str
    a: list = field(default_factory=list)
    b: list = field(default_factory=list)

    @property
    def mean_a(self) -> float:
        return float(np.mean(self.a))

    @property
    def mean_b(self) -> float:
        return float(np.mean(self.b))

    @property
    def wins(self) -> int:
        """Seeds where arm a is strictly better."""
        return int(sum(x > y for x, y in zip(self.a, self.b)))

    def summary(self) -> str:
        per = ", ".join(f"{x:.3f}/{y:.3f}" for x, y in zip(self.a, self.b))
        return (f"{self.name_a} {100 * self.mean_a:.2f} vs {self.name_b} {100 * self.mean_b:.2f} "
                f"(wins {self.wins}/{len(self.a)}; per seed {per})")


def compare(study: Study, seeds, arm_a: dict, arm_b: dict, name_a="a", name_b="b") -> Paired:
    """Final dev accuracy of two arms (kwargs for :meth:`Study.run`) on the same seeds."""
    out = Paired(name_a, name_b)
    for seed in seeds:
        out.a.append(study.final(seed, **arm_a))
        out.b.append(study.final(seed, **arm_b))
    return out


DIRECT = ("1-1-1",)
MULTI = ("1-1-2", "1-1-1")
PATHS = (("1-1-1",), ("1-1-2", "1-1-1"), ("1-1-4", "1-1-1"), ("1-1-8", "1-1-1"),
         ("1-1-4", "1-1-2", "1-1-1"))


def multi_vs_direct(study, seeds) -> Paired:
    return compare(study, seeds, dict(schedule=MULTI), dict(schedule=DIRECT), "W1A2->W1A1", "W1A1")


def two_set_vs_signed(study, seeds, schedule=MULTI) -> Paired:
    return compare(study, seeds, dict(schedule=schedule), dict(schedule=schedule, two_set=False),
                   "two-set", "all-signed")


def elastic_vs_frozen(study, seeds, schedule=MULTI) -> Paired:
    return compare(study, seeds, dict(schedule=schedule), dict(schedule=schedule, elastic=False),
                   "elastic", "frozen")


def path_table(study, seeds, paths=PATHS) -> dict:
    """Mean final dev accuracy per path, plus per-seed values."""
    out = {}
    for p in paths:
        vals = [study.final(s, p) for s in seeds]
        out["->".join(p)] = (float(np.mean(vals)), vals)
    return out
