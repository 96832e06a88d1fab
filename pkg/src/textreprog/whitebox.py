"""White-box training of a program through a frozen victim.

Discrete samples from the program are replaced by Gumbel-Softmax
relaxations, which the victim consumes as expected embeddings; the
cross-entropy against the victim label each adversarial label is read from
is then backpropagated into ``theta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .advprog import argmax_sequence, program_log_dist, sample_sequence
from .autodiff import Adam, Graph, NonFiniteError, ops
from .textdata import encode, iter_batches

log = logging.getLogger(__name__)


class AttackDiverged(RuntimeError):
    pass


@dataclass
class GumbelSchedule:
    """Exponential temperature decay from ``t_max`` to ``t_min``.

    The floor is reached after ``anneal_frac`` of ``total_steps``.
    """

    t_max: float = 5.0
    t_min: float = 0.1
    total_steps: int = 1000
    anneal_frac: float = 0.8
    mode: str = "exponential"

    def __post_init__(self):
        if not self.t_max >= self.t_min > 0:
            raise ValueError("need t_max >= t_min > 0")
        if self.mode != "exponential":
            raise ValueError(f"unsupported annealing mode {self.mode!r}")
        span = max(1.0, self.anneal_frac * self.total_steps)
        self.decay = math.log(self.t_max / self.t_min) / span

    def temperature(self, step):
        return max(self.t_min, self.t_max * math.exp(-self.decay * step))


@dataclass
class WhiteboxConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    t_max: float = 5.0
    t_min: float = 0.1
    anneal_frac: float = 0.8
    weight_decay: float = 0.0
    max_len: int = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def gumbel_noise(shape, rng):
    """Standard Gumbel draws ``-log(-log(u))``, u ~ U(0, 1) open at both ends."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_relax(prog, t, temp, rng=None, lengths=None, noise=None):
    """Relaxed one-hot sample ``g = softmax((log pi + r) / temp)`` per position.

    Pass ``noise`` to reuse fixed Gumbel draws (for gradient checks).
    """
    if temp <= 0:
        raise ValueError("temperature must be positive")
    log_pi = program_log_dist(prog, t, lengths)
    if noise is None:
        noise = gumbel_noise(log_pi.shape, rng)
    noise = np.asarray(noise, dtype=log_pi.dtype)
    return ops.softmax(ops.scale(ops.add(log_pi, noise), 1.0 / temp))


def whitebox_loss(prog, t, lengths, labels, victim, lmap, temp, rng=None, noise=None):
    g = gumbel_relax(prog, t, temp, rng, lengths, noise)
    logits = victim.forward_soft(g, lengths, check=False)
    return ops.cross_entropy(logits, lmap.to_orig(labels))


def whitebox_step(prog, batch, victim, lmap, temp, opt, rng):
    """One Adam step on ``theta``; returns the batch loss."""
    try:
        with Graph() as g:
            loss = whitebox_loss(prog, batch.ids, batch.lengths, batch.labels, victim, lmap, temp, rng)
            g.backward(loss)
    except NonFiniteError as err:
        raise AttackDiverged(f"{err} at temperature {temp:.4g}; try a higher t_min") from err
    opt.step()
    return loss.item()


def evaluate(prog, predict, lmap, batch, decode="argmax", rng=None, chunk=512):
    """Adversarial-task accuracy of ``f_L(C(f_theta(t)))``.

    ``predict(ids, lengths)`` returns victim labels; ``decode`` is "argmax"
    or "sample". Victim labels outside the map count as wrong.
    """
    correct = 0
    for start in range(0, len(batch), chunk):
        lengths = batch.lengths[start:start + chunk]
        width = int(lengths.max())
        t = batch.ids[start:start + chunk, :width]
        if decode == "argmax":
            s = argmax_sequence(prog, t, lengths)
        elif decode == "sample":
            s = sample_sequence(prog, t, rng, lengths)
        else:
            raise ValueError(f"unknown decode {decode!r}")
        pred = lmap.to_adv(predict(s, lengths))
        correct += int((pred == batch.labels[start:start + chunk]).sum())
    return correct / max(len(batch), 1)


@dataclass
class AttackResult:
    program: object
    rows: list = field(default_factory=list)
    argmax_acc: float = 0.0
    sampled_acc: float = 0.0
    queries: int = 0
    train_queries: int = 0


def train_whitebox(cfg, prog, victim, lmap, train, test, vocab):
    """Train ``prog`` against ``victim`` on ``train``; evaluate on ``test``.

    ``vocab`` is the adversarial-task (input) vocabulary. Returns an
    :class:`AttackResult` whose rows hold one dict per epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng(cfg.seed + 1)
    train_b = encode(train, vocab, cfg.max_len)
    test_b = encode(test, vocab, cfg.max_len)
    steps_per_epoch = math.ceil(len(train_b) / cfg.batch_size)
    schedule = GumbelSchedule(cfg.t_max, cfg.t_min, cfg.epochs * steps_per_epoch, cfg.anneal_frac)
    opt = Adam([prog.theta], lr=cfg.lr, weight_decay=cfg.weight_decay)
    rows = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in iter_batches(train_b, cfg.batch_size, rng):
            temp = schedule.temperature(step)
            losses.append(whitebox_step(prog, batch, victim, lmap, temp, opt, rng))
            step += 1
        row = {
            "epoch": epoch,
            "temp": temp,
            "loss": float(np.mean(losses)),
            "sampled_acc": evaluate(prog, victim.predict_label, lmap, test_b, "sample", eval_rng),
            "argmax_acc": evaluate(prog, victim.predict_label, lmap, test_b, "argmax"),
        }
        rows.append(row)
        log.info("whitebox epoch %d temp %.3f loss %.4f argmax acc %.4f",
                 epoch, temp, row["loss"], row["argmax_acc"])
    last = rows[-1]
    return AttackResult(prog, rows, last["argmax_acc"], last["sampled_acc"])
