"""Black-box training of a program with REINFORCE.

The program is treated as a stochastic policy over output sequences. Each
sampled sequence is sent to a label-only oracle and scored +1 if the
mapped label is correct and -1 otherwise; ``theta`` then follows the
score-function estimate of the expected-reward gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .advprog import UNMAPPED, program_log_dist, sample_from
from .autodiff import Adam, Graph, ops
from .textdata import encode, iter_batches
from .whitebox import AttackResult, evaluate

log = logging.getLogger(__name__)


@dataclass
class ReinforceConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    samples_per_input: int = 1
    baseline: bool = False
    baseline_decay: float = 0.9
    top_k: int = 1000
    max_len: int = None
    eval_every: int = 0  # steps; 0 means once per epoch
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.samples_per_input) < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size, samples_per_input and lr must be positive")
        if self.top_k < 2:
            raise ValueError("top_k must be at least 2")


def reward(predicted, target, lmap):
    """+1 where the victim's label maps onto ``target``, else -1."""
    mapped = lmap.to_adv(predicted)
    ok = (mapped != UNMAPPED) & (mapped == np.asarray(target))
    return np.where(ok, 1.0, -1.0)


def _gather_logprob(log_pi, s):
    s = np.asarray(s)
    onehot = np.zeros(log_pi.shape, dtype=log_pi.dtype)
    np.put_along_axis(onehot, s[..., None], 1.0, axis=-1)
    return ops.mul(log_pi, onehot)


def logprob_of_sample(prog, t, s, lengths=None):
    """``sum_i log pi_i[s_i]`` per sequence, differentiable in ``theta``.

    Returns a scalar Tensor for a single sequence, shape ``(B,)`` otherwise.
    Positions beyond ``lengths`` are excluded.
    """
    t = np.asarray(t)
    s = np.asarray(s, dtype=np.int64)
    if s.shape != t.shape:
        raise ValueError(f"sample shape {s.shape} does not match input shape {t.shape}")
    if prog.mask is not None and not prog.mask[s].all():
        raise ValueError("sample contains a masked output token (probability zero)")
    log_pi = program_log_dist(prog, t, lengths)
    picked = _gather_logprob(log_pi, s)
    if t.ndim == 1:
        return ops.sum(picked)
    if lengths is not None:
        valid = np.arange(t.shape[1])[None, :] < np.asarray(lengths)[:, None]
        picked = ops.mul(picked, valid[..., None].astype(log_pi.dtype))
    return ops.sum(ops.reshape(picked, (t.shape[0], -1)), axis=1)


def policy_gradient(prog, t, lengths, targets, oracle, lmap, rng, samples_per_input=1, baseline=0.0):
    """Sample-average REINFORCE estimate of the expected-reward gradient.

    Draws ``samples_per_input`` sequences per input, queries the oracle once
    for each, and returns ``(grad_theta, rewards)`` where ``grad_theta`` is
    the mean over samples of ``(r - baseline) * grad log pi(s | t)``.
    """
    t = np.asarray(t)
    lengths = np.full(len(t), t.shape[1]) if lengths is None else np.asarray(lengths)
    rep = samples_per_input
    t_r = np.repeat(t, rep, axis=0)
    len_r = np.repeat(lengths, rep)
    tgt_r = np.repeat(np.asarray(targets), rep)
    prog.theta.grad = None
    with Graph() as g:
        log_pi = program_log_dist(prog, t_r, len_r)
        s = sample_from(np.exp(log_pi.data.astype(np.float64)), rng)
        preds = oracle.query_many([row[:n] for row, n in zip(s, len_r)])
        r = reward(preds, tgt_r, lmap)
        weight = (r - baseline) / len(r)
        valid = (np.arange(t.shape[1])[None, :] < len_r[:, None]).astype(log_pi.dtype)
        coef = (valid * weight[:, None].astype(log_pi.dtype))[..., None]
        objective = ops.sum(ops.mul(_gather_logprob(log_pi, s), coef))
        g.backward(objective)
    grad = np.zeros_like(prog.theta.data) if prog.theta.grad is None else prog.theta.grad
    prog.theta.grad = None
    return grad, r


class _Baseline:
    def __init__(self, decay):
        self.decay = decay
        self.value = 0.0
        self.started = False

    def update(self, rewards):
        m = float(np.mean(rewards))
        self.value = m if not self.started else self.decay * self.value + (1 - self.decay) * m
        self.started = True


def reinforce_step(prog, batch, oracle, lmap, cfg, opt, rng, baseline=None):
    """One ascent step on ``theta``; returns the batch's mean reward."""
    b = baseline.value if baseline is not None and baseline.started else 0.0
    grad, r = policy_gradient(prog, batch.ids, batch.lengths, batch.labels, oracle, lmap, rng,
                              cfg.samples_per_input, b)
    # Adam minimises, so hand it the negated ascent direction
    prog.theta.grad = -grad
    opt.step()
    prog.theta.grad = None
    if baseline is not None:
        baseline.update(r)
    return float(np.mean(r))


def topk_mask(vocab, top_k):
    """Boolean mask allowing the ``top_k`` most frequent non-reserved tokens.

    Returns None when ``top_k`` covers the whole vocabulary.
    """
    if top_k < 2:
        raise ValueError("top_k must be at least 2")
    n = len(vocab)
    if top_k >= n:
        return None
    freqs = np.asarray(vocab.freqs, dtype=np.int64)
    candidates = np.arange(2, n)
    order = candidates[np.lexsort((candidates, -freqs[2:]))]
    mask = np.zeros(n, dtype=bool)
    mask[order[:top_k]] = True
    return mask


def apply_topk_mask(prog, vocab, top_k):
    """Copy of ``prog`` (same ``theta``) restricted to the top-k output tokens."""
    if len(vocab) != prog.n_output_vocab:
        raise ValueError("vocab size does not match the program's output vocabulary")
    return prog.with_mask(topk_mask(vocab, top_k))


def train_blackbox(cfg, prog, oracle, lmap, train, test, vocab):
    """REINFORCE training against ``oracle``; evaluation decodes by argmax.

    ``rows`` has one dict per evaluation with the training step, the mean
    reward since the last evaluation, the test accuracy and cumulative
    training queries. ``result.queries`` includes evaluation queries.
    """
    rng = np.random.default_rng(cfg.seed)
    train_b = encode(train, vocab, cfg.max_len)
    test_b = encode(test, vocab, cfg.max_len)
    opt = Adam([prog.theta], lr=cfg.lr)
    baseline = _Baseline(cfg.baseline_decay) if cfg.baseline else None
    steps_per_epoch = math.ceil(len(train_b) / cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch

    def predict(ids, lengths):
        return oracle.query_many([row[:n] for row, n in zip(ids, lengths)])

    rows = []
    train_queries = 0
    recent = []
    step = 0
    for _ in range(cfg.epochs):
        for batch in iter_batches(train_b, cfg.batch_size, rng):
            before = oracle.queries
            recent.append(reinforce_step(prog, batch, oracle, lmap, cfg, opt, rng, baseline))
            train_queries += oracle.queries - before
            step += 1
            if step % eval_every == 0:
                acc = evaluate(prog, predict, lmap, test_b, "argmax")
                rows.append({"step": step, "mean_reward": float(np.mean(recent)),
                             "eval_acc": acc, "queries": train_queries})
                log.info("blackbox step %d reward %.3f acc %.4f queries %d",
                         step, rows[-1]["mean_reward"], acc, train_queries)
                recent = []
    if not rows or rows[-1]["step"] != step:
        acc = evaluate(prog, predict, lmap, test_b, "argmax")
        rows.append({"step": step, "mean_reward": float(np.mean(recent)) if recent else 0.0,
                     "eval_acc": acc, "queries": train_queries})
    final = rows[-1]["eval_acc"]
    return AttackResult(prog, rows, argmax_acc=final, queries=oracle.queries,
                        train_queries=train_queries)
