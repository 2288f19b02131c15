import numpy as np
import pytest

from bitformer.data import Vocab, encode, synth_task
from bitformer.distill import Dataset, DistillConfig, knowledge_distill, train_supervised
from bitformer.model import Encoder, ModelConfig, quantize_model


def tiny_config(vocab_size, **kw):
    base = dict(num_layers=2, num_heads=2, d_model=32, d_ff=64, vocab_size=vocab_size, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_task():
    tr, dv = synth_task("keyword-presence", 300, seed=11, length=(4, 9))
    vocab = Vocab.build(e.text for e in tr)
    train = Dataset(*encode(tr, vocab, 12))
    dev = Dataset(*encode(dv, vocab, 12))
    return vocab, train, dev


@pytest.fixture(scope="session")
def tiny_teacher(tiny_task):
    vocab, train, dev = tiny_task
    model = Encoder(tiny_config(len(vocab)), seed=0)
    train_supervised(model, train, dev, DistillConfig(lr=1e-3, epochs=2, seed=0))
    return model


@pytest.fixture(scope="session")
def tiny_binary(tiny_task, tiny_teacher):
    """A 1-1-1 student after one epoch of distillation."""
    _, train, dev = tiny_task
    student = quantize_model(tiny_teacher, "1-1-1")
    knowledge_distill(student, tiny_teacher, train, dev, DistillConfig(lr=1e-3, epochs=1, seed=0))
    return student


@pytest.fixture
def rng():
    return np.random.default_rng(0)


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
