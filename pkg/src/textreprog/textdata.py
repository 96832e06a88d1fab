"""Corpora, vocabularies and batching.

Dataset files are UTF-8 TSV (``label<TAB>text`` per line). A task directory
holds a ``task.json`` sidecar naming the split files and label names::

    {"name": "questions", "mode": "word", "labels": ["ABBR", ...],
     "train": "train.tsv", "test": "test.tsv"}
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
RESERVED = (PAD_TOKEN, UNK_TOKEN)

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_tokens(text, mode):
    """Raw token strings for ``text``.

    Char mode yields every Unicode code point (spaces included). Word mode
    lowercases, then splits into runs of word characters with each
    punctuation mark as its own token.
    """
    if mode == "char":
        return list(text)
    if mode == "word":
        return _WORD_RE.findall(text.lower())
    raise ValueError(f"unknown tokenization mode {mode!r}")


@dataclass
class Vocab:
    mode: str
    itos: list
    freqs: list

    def __post_init__(self):
        if self.mode not in ("char", "word"):
            raise ValueError(f"unknown tokenization mode {self.mode!r}")
        if tuple(self.itos[:2]) != RESERVED:
            raise ValueError("vocab must start with the reserved PAD and UNK tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")
        if len(self.freqs) != len(self.itos):
            raise ValueError("freqs must align with itos")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token):
        return self.stoi.get(token, UNK)

    def to_dict(self):
        return {"mode": self.mode, "itos": list(self.itos), "freqs": list(self.freqs)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], list(d["itos"]), list(d["freqs"]))


def build_vocab(corpus, mode, max_size=None):
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` counts the two reserved ids.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(tok for tok in split_tokens(text, mode) if tok and tok not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        if max_size < 2:
            raise ValueError("max_size must leave room for PAD and UNK")
        ranked = ranked[: max_size - 2]
    itos = list(RESERVED) + [tok for tok, _ in ranked]
    freqs = [0, 0] + [n for _, n in ranked]
    return Vocab(mode, itos, freqs)


def tokenize(text, vocab):
    return [vocab.id(tok) for tok in split_tokens(text, vocab.mode)]


def detokenize(ids, vocab):
    toks = [vocab.itos[i] for i in ids]
    return "".join(toks) if vocab.mode == "char" else " ".join(toks)


def normalize(text, mode):
    """The text ``detokenize(tokenize(text))`` reproduces when nothing is UNK."""
    toks = split_tokens(text, mode)
    return "".join(toks) if mode == "char" else " ".join(toks)


@dataclass
class Dataset:
    examples: list
    label_names: list
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        n = len(self.label_names)
        for _, label in self.examples:
            if not 0 <= label < n:
                raise ValueError(f"label {label} outside [0, {n})")

    def __len__(self):
        return len(self.examples)

    @property
    def texts(self):
        return [text for text, _ in self.examples]

    @property
    def labels(self):
        return np.array([label for _, label in self.examples], dtype=np.int64)

    @property
    def n_classes(self):
        return len(self.label_names)

    def stats(self, vocab):
        lengths = [len(split_tokens(t, vocab.mode)) for t in self.texts]
        return {
            "classes": self.n_classes,
            "examples": len(self),
            "vocab_size": len(vocab),
            "avg_length": float(np.mean(lengths)) if lengths else 0.0,
        }


@dataclass
class Task:
    """A named classification task with train/test splits."""

    name: str
    mode: str
    train: Dataset
    test: Dataset
    meta: dict = field(default_factory=dict)

    @property
    def label_names(self):
        return self.train.label_names

    def overlap(self):
        """Number of test texts that also occur in train."""
        seen = set(self.train.texts)
        return sum(text in seen for text in self.test.texts)


def read_tsv(path, label_names=None, split="train"):
    """Read ``label<TAB>text`` lines. Labels may be names or integer ids."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected label<TAB>text")
        label, text = line.split("\t", 1)
        rows.append((label, text))
    if label_names is None:
        label_names = sorted({label for label, _ in rows})
    index = {name: i for i, name in enumerate(label_names)}
    examples = []
    for label, text in rows:
        if label in index:
            examples.append((text, index[label]))
        elif label.isdigit() and int(label) < len(label_names):
            examples.append((text, int(label)))
        else:
            raise ValueError(f"{path}: unknown label {label!r}")
    return Dataset(examples, list(label_names), split=split)


def write_tsv(path, dataset):
    lines = [f"{dataset.label_names[label]}\t{text}" for text, label in dataset.examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_task(directory):
    directory = Path(directory)
    meta = json.loads((directory / "task.json").read_text())
    labels = meta.get("labels")
    train = read_tsv(directory / meta.get("train", "train.tsv"), labels, "train")
    test = read_tsv(directory / meta.get("test", "test.tsv"), train.label_names, "test")
    name = meta.get("name", directory.name)
    train.name = test.name = name
    return Task(name, meta.get("mode", "word"), train, test, meta)


def save_task(directory, task):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tsv(directory / "train.tsv", task.train)
    write_tsv(directory / "test.tsv", task.test)
    meta = dict(task.meta)
    meta.update(name=task.name, mode=task.mode, labels=task.label_names,
                train="train.tsv", test="test.tsv")
    (directory / "task.json").write_text(json.dumps(meta, indent=2))


def task_from_files(train_path, test_path, mode, name=""):
    train = read_tsv(train_path, split="train")
    test = read_tsv(test_path, train.label_names, split="test")
    train.name = test.name = name
    return Task(name, mode, train, test)


@dataclass
class Batch:
    ids: np.ndarray  # (B, L) int64, PAD-filled
    lengths: np.ndarray  # (B,)
    labels: np.ndarray  # (B,)
    index: np.ndarray = None  # positions in the source dataset

    def __len__(self):
        return len(self.labels)

    @property
    def mask(self):
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def pad_sequences(seqs, max_len=None):
    """Truncate to ``max_len`` and PAD-fill to the longest remaining length.

    Empty sequences are given a single PAD token so every row has length >= 1.
    """
    seqs = [list(s[:max_len]) if max_len else list(s) for s in seqs]
    lengths = np.array([max(len(s), 1) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 1
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
    return ids, lengths


def encode(dataset, vocab, max_len=None):
    """The whole dataset as a single unshuffled Batch."""
    ids, lengths = pad_sequences([tokenize(t, vocab) for t in dataset.texts], max_len)
    return Batch(ids, lengths, dataset.labels, np.arange(len(dataset)))


def make_batches(dataset, vocab, batch_size, max_len=None, rng=None, shuffle=True):
    """One epoch of batches; order drawn from ``rng`` when shuffling."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    encoded = [tokenize(t, vocab) for t in dataset.texts]
    labels = dataset.labels
    order = np.arange(len(dataset))
    if shuffle:
        rng = np.random.default_rng() if rng is None else rng
        order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        ids, lengths = pad_sequences([encoded[i] for i in idx], max_len)
        yield Batch(ids, lengths, labels[idx], idx)


def iter_batches(batch, batch_size, rng=None):
    """Re-batch a pre-encoded Batch (faster than re-tokenizing every epoch)."""
    n = len(batch)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        width = int(batch.lengths[idx].max())
        yield Batch(batch.ids[idx, :width], batch.lengths[idx], batch.labels[idx], idx)
