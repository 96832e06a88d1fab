"""Hand-built victim and task small enough to reason about exactly."""

import numpy as np

from textreprog.advprog import AdversarialProgram, LabelMap
from textreprog.autodiff import Tensor
from textreprog.textdata import Dataset, Vocab
from textreprog.victims import VictimConfig, VictimModel

TOKENS = Vocab("word", ["<pad>", "<unk>", "p", "q"], [0, 0, 1, 1])


def toy_victim():
    """Mean-pooled width-1 CNN: class 0 when 'x' (id 2) dominates, class 1 for 'y' (id 3)."""
    cfg = VictimConfig("cnn1", 4, 2, embed_dim=2, n_filters=2, cnn1_width=1)
    params = {
        "embed": np.array([[0, 0], [0, 0], [1, 0], [0, 1]], dtype=np.float32),
        "conv.W": np.eye(2, dtype=np.float32)[None],
        "conv.b": np.zeros(2, dtype=np.float32),
        "out.W": 40.0 * np.array([[1, -1], [-1, 1]], dtype=np.float32),
        "out.b": np.zeros(2, dtype=np.float32),
    }
    return VictimModel(cfg, params).freeze()


def toy_task(n=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        out.append((" ".join(["pq"[label]] * int(rng.integers(2, 6))), label))
    return Dataset(out, ["p", "q"])


def solved_program():
    theta = np.zeros((1, 4, 4), dtype=np.float32)
    theta[0, 2, 2] = 50.0  # p -> x
    theta[0, 3, 3] = 50.0  # q -> y
    return AdversarialProgram(Tensor(theta, requires_grad=True))


LMAP = LabelMap.identity(2, 2)
