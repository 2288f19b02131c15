"""TSV ingestion, a word-level tokenizer, and synthetic classification tasks."""
from __future__ import annotations

import csv
import io
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, RowError, SchemaError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)

SYNTH_KINDS = ("parity-of-token-class", "keyword-presence", "majority-vote")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int
    text_b: str | None = None


@dataclass(frozen=True)
class TsvSchema:
    text: str
    label: str
    text_b: str | None = None
    label_map: dict | None = None


class Vocab:
    """Dense token ids; ids 0-3 are PAD, UNK, CLS, SEP."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(RESERVED)
        for t in tokens:
            if t not in RESERVED:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1, max_size: int | None = None) -> "Vocab":
        """Most frequent first; ties broken lexicographically, so corpus order does not matter."""
        counts = Counter()
        for t in texts:
            counts.update(split_words(t))
        items = sorted((kv for kv in counts.items() if kv[1] >= min_freq),
                       key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            items = items[: max(0, max_size - len(RESERVED))]
        return cls([w for w, _ in items])

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise InputError(f"{path}: first four vocab lines must be {RESERVED}")
        return cls(lines[4:])


def split_words(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text, vocab: Vocab, max_len: int, text_b: str | None = None) -> list:
    """[CLS] a [SEP] (b [SEP]) padded/truncated to ``max_len``; CLS and the last SEP survive truncation."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    a = [vocab.id(w) for w in split_words(text)]
    if text_b is None:
        room = max_len - 2
        ids = [CLS_ID] + a[:room] + [SEP_ID]
    else:
        b = [vocab.id(w) for w in split_words(text_b)]
        room = max_len - 3
        while len(a) + len(b) > room:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
        ids = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
    return ids + [PAD_ID] * (max_len - len(ids))


def encode(examples: Sequence[LabeledExample], vocab: Vocab, max_len: int):
    """(ids int64 [n, max_len], labels int64 [n])."""
    ids = np.array([tokenize(e.text, vocab, max_len, e.text_b) for e in examples], dtype=np.int64)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return ids.reshape(len(examples), max_len), labels


def load_tsv(path, schema: TsvSchema) -> list:
    """Parse a headered, tab-separated UTF-8 file into examples (file order)."""
    raw = Path(path).read_bytes().decode("utf-8")
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    reader = csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file") from None
    cols = {name: i for i, name in enumerate(header)}
    for needed in (schema.text, schema.label, schema.text_b):
        if needed is not None and needed not in cols:
            raise SchemaError(f"{path}: missing column {needed!r} (have {header})")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row or row == [""]:
            continue
        try:
            text = row[cols[schema.text]]
            label_raw = row[cols[schema.label]]
            text_b = row[cols[schema.text_b]] if schema.text_b else None
        except IndexError:
            raise RowError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}",
                           line=lineno) from None
        if schema.label_map is not None:
            if label_raw not in schema.label_map:
                raise RowError(f"{path}: line {lineno}: unknown label {label_raw!r}", line=lineno)
            label = schema.label_map[label_raw]
        else:
            try:
                label = int(label_raw)
            except ValueError:
                raise RowError(f"{path}: line {lineno}: unparseable label {label_raw!r}",
                               line=lineno) from None
        out.append(LabeledExample(text, label, text_b))
    return out


# ------------------------------------------------------------------ synthetic tasks

def _filler(n_words: int):
    return [f"w{i}" for i in range(n_words)]


def _gen_keyword(rng, n_filler, length):
    words = _filler(n_filler)
    keywords = ["kwa", "kwb", "kwc", "kwd"]
    label = int(rng.integers(2))
    k = int(rng.integers(length[0], length[1] + 1))
    toks = [words[j] for j in rng.integers(n_filler, size=k)]
    if label:
        toks[int(rng.integers(k))] = keywords[int(rng.integers(len(keywords)))]
    return " ".join(toks), label


def _gen_parity(rng, n_filler, length):
    words = _filler(n_filler)
    marked = [f"m{i}" for i in range(8)]
    k = length[1]
    count = int(rng.integers(0, 4))
    toks = [words[j] for j in rng.integers(n_filler, size=k)]
    for pos in rng.choice(k, size=count, replace=False):
        toks[int(pos)] = marked[int(rng.integers(len(marked)))]
    return " ".join(toks), count % 2


def _gen_majority(rng, n_filler, length):
    a_words = [f"a{i}" for i in range(8)]
    b_words = [f"b{i}" for i in range(8)]
    k = int(rng.integers(length[0], length[1] + 1))
    if k % 2 == 0:
        k -= 1
    p = rng.uniform(0.2, 0.8)
    is_a = rng.random(k) < p
    toks = [a_words[int(rng.integers(8))] if f else b_words[int(rng.integers(8))] for f in is_a]
    label = int(is_a.sum() * 2 > k)
    return " ".join(toks), label


_GENERATORS = {
    "keyword-presence": _gen_keyword,
    "parity-of-token-class": _gen_parity,
    "majority-vote": _gen_majority,
}


def synth_task(kind: str, n: int, seed: int = 0, dev_fraction: float = 0.2,
               length=(6, 14), n_filler: int = 200):
    """Deterministic (train, dev) example lists with disjoint texts.

    keyword-presence: label 1 iff one of four keywords occurs.
    parity-of-token-class: parity of the number of marked tokens (0-3) in a fixed-length text.
    majority-vote: 1 iff "a*" tokens outnumber "b*" tokens (odd length, no ties).
    """
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic task {kind!r}; choose from {SYNTH_KINDS}")
    if n < 20:
        raise ValueError("n must be >= 20")
    rng = np.random.default_rng(seed)
    gen = _GENERATORS[kind]
    seen, examples = set(), []
    attempts = 0
    while len(examples) < n:
        attempts += 1
        if attempts > 50 * n:
            raise ValueError(f"could not generate {n} distinct examples for {kind}")
        text, label = gen(rng, n_filler, length)
        if text in seen:
            continue
        seen.add(text)
        examples.append(LabeledExample(text, label))
    n_dev = max(1, int(round(n * dev_fraction)))
    return examples[n_dev:], examples[:n_dev]
