"""Desk-scale synthetic task pairs.

Original task (victim vocabulary): filler words with up to ``max_triggers``
trigger tokens (``kw0``/``kw1``) dropped in; the label says which triggers
occur: none, a single kind, or both kinds ("mixed").

Adversarial task (attacker vocabulary): every sequence holds two events,
each an adjacent marker bigram ``a b`` or ``b a``, separated by at least
``event_gap`` fillers. The label says whether the two events have the same
orientation. Every sequence contains exactly two ``a`` and two ``b``
regardless of label, so a per-token (k=1) remap hands a victim that only
looks at which triggers occur the same distribution of token multisets for
both classes, while a remap that sees neighbours can turn ``a b`` into
``kw0`` and ``b a`` into ``kw1``. Read through :func:`default_label_map`
("same" -> "single", "mixed" -> "mixed") that solves the task. The
adversarial label is the XOR of the two orientations, which a mean-pooled
single-layer CNN with a linear read-out cannot represent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .advprog import LabelMap
from .textdata import Dataset, Task

ORIG_LABELS = ["none", "single", "mixed"]
ADV_LABELS = ["same", "mixed"]
TRIGGERS = ("kw0", "kw1")
MARKERS = ("a", "b")


@dataclass
class SynthSpec:
    orig_fillers: int = 20
    orig_min_len: int = 8
    orig_max_len: int = 16
    max_triggers: int = 4
    orig_train: int = 3000
    orig_test: int = 600
    adv_fillers: int = 10
    adv_min_len: int = 12
    adv_max_len: int = 16
    event_gap: int = 4
    same_ab_frac: float = 0.75
    adv_train: int = 2000
    adv_test: int = 500

    def validate(self):
        if self.orig_min_len < 2 or self.orig_max_len < self.orig_min_len:
            raise ValueError("original lengths must satisfy 2 <= min <= max")
        if self.max_triggers < 2:
            raise ValueError("max_triggers must allow both trigger kinds")
        if self.adv_min_len < 4 + self.event_gap or self.adv_max_len < self.adv_min_len:
            raise ValueError("adversarial sequences too short for two events and the gap")
        if self.orig_fillers < 1 or self.adv_fillers < 1:
            raise ValueError("need at least one filler token per task")
        if min(self.orig_train, self.orig_test, self.adv_train, self.adv_test) < 2:
            raise ValueError("each split needs at least two examples")
        if not 0.0 <= self.same_ab_frac <= 1.0:
            raise ValueError("same_ab_frac must lie in [0, 1]")
        if self.event_gap < 0:
            raise ValueError("event_gap must be non-negative")
        return self


def _balanced_labels(n, n_classes, rng):
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def original_example(label, rng, spec):
    n = int(rng.integers(spec.orig_min_len, spec.orig_max_len + 1))
    toks = [f"w{i}" for i in rng.integers(0, spec.orig_fillers, size=n)]
    most = min(spec.max_triggers, n)
    if label == 0:
        kinds = np.zeros(0, dtype=np.int64)
    elif label == 1:
        kinds = np.full(int(rng.integers(1, most + 1)), rng.integers(0, 2))
    else:
        kinds = rng.integers(0, 2, size=int(rng.integers(2, most + 1)))
        kinds[:2] = rng.permutation([0, 1])  # guarantee both kinds
    for pos, kind in zip(rng.choice(n, size=len(kinds), replace=False), rng.permutation(kinds)):
        toks[pos] = TRIGGERS[kind]
    return " ".join(toks)


def adversarial_example(label, rng, spec):
    n = int(rng.integers(spec.adv_min_len, spec.adv_max_len + 1))
    toks = [f"f{i}" for i in rng.integers(0, spec.adv_fillers, size=n)]
    # first event at p, second at q >= p + 2 + gap, both within [0, n-2]
    p = int(rng.integers(0, n - 3 - spec.event_gap))
    q = int(rng.integers(p + 2 + spec.event_gap, n - 1))
    if label == 0:
        o1 = o2 = int(rng.random() >= spec.same_ab_frac)
    else:
        o1 = int(rng.integers(0, 2))
        o2 = 1 - o1
    for pos, o in ((p, o1), (q, o2)):
        toks[pos], toks[pos + 1] = (MARKERS if o == 0 else MARKERS[::-1])
    return " ".join(toks)


def _dataset(n, make, names, rng, spec, split, name, exclude=None):
    """``n`` examples with balanced labels; texts in ``exclude`` are redrawn."""
    exclude = exclude or set()
    examples = []
    for y in _balanced_labels(n, len(names), rng):
        for _ in range(1000):
            text = make(int(y), rng, spec)
            if text not in exclude:
                break
        else:
            raise ValueError("spec too small to draw a test split disjoint from train")
        examples.append((text, int(y)))
    return Dataset(examples, list(names), split, name)


def gen_synthetic_pair(spec=None, seed=0):
    """Return ``(original Task, adversarial Task)`` drawn with ``seed``."""
    spec = (spec or SynthSpec()).validate()
    rng = np.random.default_rng(seed)
    meta = {"generator": "synthetic", "seed": seed, "spec": asdict(spec)}
    tasks = []
    for name, make, names, n_train, n_test in (
        ("synth-triggers", original_example, ORIG_LABELS, spec.orig_train, spec.orig_test),
        ("synth-bigrams", adversarial_example, ADV_LABELS, spec.adv_train, spec.adv_test),
    ):
        train = _dataset(n_train, make, names, rng, spec, "train", name)
        test = _dataset(n_test, make, names, rng, spec, "test", name, set(train.texts))
        tasks.append(Task(name, "word", train, test, dict(meta)))
    return tasks[0], tasks[1]


def default_label_map():
    """Adversarial "same" reads victim "single", "mixed" reads "mixed"."""
    return LabelMap(((1, 0), (2, 1)), len(ORIG_LABELS), len(ADV_LABELS))


def trigger_rule(tokens):
    """Ground-truth original-task label: how many trigger kinds occur."""
    return len({t for t in tokens if t in TRIGGERS})


def bigram_rule(tokens):
    """Ground-truth adversarial-task label, None if the structure is absent."""
    events = []
    for i in range(len(tokens) - 1):
        pair = (tokens[i], tokens[i + 1])
        if pair == MARKERS:
            events.append(0)
        elif pair == MARKERS[::-1]:
            events.append(1)
    if len(events) != 2:
        return None
    return 0 if events[0] == events[1] else 1
