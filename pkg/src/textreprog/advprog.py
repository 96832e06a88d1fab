"""Context-based vocabulary remapping programs.

A program is a tensor ``theta`` of shape ``(k, |V_T|, |V_S|)``. For an input
sequence ``t`` of length ``N`` the logits at position ``i`` are

    h_i = sum_{j=0}^{k-1} theta[j, t[i + k//2 - j]]

with positions outside ``[0, N)`` contributing nothing. ``softmax(h_i)`` is
the distribution the output token ``s_i`` is drawn from, so the transform
is length preserving.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, load_tensors, ops, save_tensors

# Finite stand-in for -inf on masked vocabulary entries: exp() of it
# underflows to exactly 0 in both float32 and float64.
MASK_LOGIT = -1e9

UNMAPPED = -1


class AdversarialProgram:
    def __init__(self, theta, mask=None):
        theta = theta if isinstance(theta, Tensor) else Tensor(theta, requires_grad=True)
        if theta.ndim != 3:
            raise ValueError(f"theta must be (k, |V_T|, |V_S|), got {theta.shape}")
        k = theta.shape[0]
        if k < 1 or k % 2 == 0:
            raise ValueError(f"context size must be odd and >= 1, got {k}")
        self.theta = theta
        self.mask = None
        self.set_mask(mask)

    @classmethod
    def init(cls, k, n_input_vocab, n_output_vocab, seed=0, std=0.1):
        if k < 1 or k % 2 == 0:
            raise ValueError(f"context size must be odd and >= 1, got {k}")
        rng = np.random.default_rng(seed)
        theta = rng.normal(0.0, std, size=(k, n_input_vocab, n_output_vocab)).astype(np.float32)
        return cls(Tensor(theta, requires_grad=True))

    @property
    def k(self):
        return self.theta.shape[0]

    @property
    def n_input_vocab(self):
        return self.theta.shape[1]

    @property
    def n_output_vocab(self):
        return self.theta.shape[2]

    def set_mask(self, mask):
        if mask is None:
            self.mask = None
            self._bias = None
            return
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_output_vocab,):
            raise ValueError(f"mask must have shape ({self.n_output_vocab},)")
        if not mask.any():
            raise ValueError("mask disallows every output token")
        self.mask = mask
        self._bias = np.where(mask, 0.0, MASK_LOGIT).astype(self.theta.dtype)

    @property
    def mask_bias(self):
        return self._bias

    def with_mask(self, mask):
        """A program sharing this ``theta`` but with a different mask."""
        return AdversarialProgram(self.theta, mask)

    def save(self, directory, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        desc = {
            "k": self.k,
            "input_vocab_size": self.n_input_vocab,
            "output_vocab_size": self.n_output_vocab,
            "mask": None if self.mask is None else np.flatnonzero(self.mask).tolist(),
        }
        desc.update(extra or {})
        (directory / "program.json").write_text(json.dumps(desc, indent=2))
        save_tensors(directory / "theta", {"theta": self.theta.data})

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        desc = json.loads((directory / "program.json").read_text())
        tensors, _ = load_tensors(directory / "theta")
        mask = None
        if desc.get("mask") is not None:
            mask = np.zeros(desc["output_vocab_size"], dtype=bool)
            mask[desc["mask"]] = True
        return cls(Tensor(tensors["theta"], requires_grad=True), mask), desc


def reserved_mask(n_output_vocab, n_reserved=2):
    """Mask that forbids the reserved ids (padding, unknown) as outputs.

    Their embeddings get little or no training signal in the victim, so a
    program free to emit them tends to exploit arbitrary directions.
    """
    if n_output_vocab <= n_reserved:
        raise ValueError("output vocabulary has no non-reserved tokens")
    mask = np.ones(n_output_vocab, dtype=bool)
    mask[:n_reserved] = False
    return mask


def _as_batch(t, lengths):
    t = np.asarray(t, dtype=np.int64)
    single = t.ndim == 1
    if single:
        t = t[None]
    B, N = t.shape
    if lengths is None:
        lengths = np.full(B, N, dtype=np.int64)
    return t, np.asarray(lengths, dtype=np.int64), single


def context_index(t, lengths, k, n_input_vocab):
    """Rows of ``theta.reshape(k * |V_T|, |V_S|)`` read at each position.

    Returns ``(B, N, k)`` ints, ``-1`` where the context position falls
    outside the (unpadded) sequence.
    """
    B, N = t.shape
    half = k // 2
    pos = np.arange(N)[:, None] + half - np.arange(k)[None, :]  # N,k
    inside = (pos[None] >= 0) & (pos[None] < lengths[:, None, None])
    tok = t[:, np.clip(pos, 0, N - 1)]  # B,N,k
    idx = np.arange(k)[None, None, :] * n_input_vocab + tok
    return np.where(inside, idx, -1)


def program_logits(prog, t, lengths=None):
    """``(B, N, |V_S|)`` logits (``(N, |V_S|)`` for a single sequence)."""
    t, lengths, single = _as_batch(t, lengths)
    if t.size and (t.min() < 0 or t.max() >= prog.n_input_vocab):
        raise ValueError(f"token id out of range for input vocab of {prog.n_input_vocab}")
    idx = context_index(t, lengths, prog.k, prog.n_input_vocab)
    flat = ops.reshape(prog.theta, (prog.k * prog.n_input_vocab, prog.n_output_vocab))
    h = ops.sum(ops.embedding(flat, idx), axis=2)
    if prog.mask_bias is not None:
        h = ops.add(h, prog.mask_bias)
    return ops.slice(h, 0) if single else h


def program_dist(prog, t, lengths=None):
    return ops.softmax(program_logits(prog, t, lengths))


def program_log_dist(prog, t, lengths=None):
    return ops.log_softmax(program_logits(prog, t, lengths))


def sample_from(probs, rng):
    """Categorical draw along the last axis by inverse CDF.

    Zero-probability entries can never be returned.
    """
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[..., -1:]
    u = 1.0 - rng.random(p.shape[:-1] + (1,))  # (0, 1]
    return (cdf < u).sum(axis=-1).astype(np.int64)


def sample_sequence(prog, t, rng, lengths=None):
    """Draw ``s_i ~ pi_i`` independently at every position."""
    return sample_from(program_dist(prog, t, lengths).data, rng)


def argmax_sequence(prog, t, lengths=None):
    """Most likely output token at every position (lowest id on ties)."""
    return np.argmax(program_logits(prog, t, lengths).data, axis=-1)


class LookupTransform:
    """A trained program compiled to a k-gram -> token table.

    Entries are filled on first use, so only contexts that actually occur
    are ever materialised; each position of a query is then one dict hit.
    """

    def __init__(self, theta, k, mask_bias=None):
        self.theta = np.asarray(theta)
        self.k = k
        self.half = k // 2
        self.bias = mask_bias
        self.table = {}
        self.misses = 0

    def lookup(self, context):
        """Output token for a context tuple (``-1`` marks out-of-range)."""
        out = self.table.get(context)
        if out is None:
            self.misses += 1
            rows = [self.theta[j, tok] for j, tok in enumerate(context) if tok >= 0]
            h = np.sum(rows, axis=0) if rows else np.zeros(self.theta.shape[2], self.theta.dtype)
            if self.bias is not None:
                h = h + self.bias
            out = int(np.argmax(h))
            self.table[context] = out
        return out

    def __call__(self, t):
        return apply_lookup(self, t)

    def to_dict(self):
        return {"k": self.k, "entries": [[list(ctx), tok] for ctx, tok in self.table.items()]}


def compile_lookup(prog):
    return LookupTransform(prog.theta.data.copy(), prog.k,
                           None if prog.mask_bias is None else prog.mask_bias.copy())


def apply_lookup(table, t):
    """Transform one sequence with a compiled program, O(len(t)) table hits."""
    t = [int(x) for x in t]
    n = len(t)
    k, half = table.k, table.half
    out = []
    for i in range(n):
        ctx = tuple(t[p] if 0 <= p < n else -1 for p in (i + half - j for j in range(k)))
        out.append(table.lookup(ctx))
    return out


@dataclass(frozen=True)
class LabelMap:
    """One-to-one map between victim labels and adversarial-task labels.

    ``pairs`` holds ``(orig_label, adv_label)`` tuples.
    """

    pairs: tuple
    n_orig: int
    n_adv: int

    def __post_init__(self):
        if self.n_adv > self.n_orig:
            raise ValueError(
                f"adversarial task has {self.n_adv} classes but the victim only {self.n_orig}"
            )
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        origs = [a for a, _ in pairs]
        advs = [b for _, b in pairs]
        if len(set(origs)) != len(origs) or len(set(advs)) != len(advs):
            raise ValueError("label map must be one-to-one")
        if any(not 0 <= a < self.n_orig for a in origs) or any(not 0 <= b < self.n_adv for b in advs):
            raise ValueError("label map entry out of range")
        fwd = np.full(self.n_orig, UNMAPPED, dtype=np.int64)
        inv = np.full(self.n_adv, UNMAPPED, dtype=np.int64)
        for a, b in pairs:
            fwd[a] = b
            inv[b] = a
        object.__setattr__(self, "_fwd", fwd)
        object.__setattr__(self, "_inv", inv)

    @classmethod
    def identity(cls, n_orig, n_adv):
        return cls(tuple((i, i) for i in range(n_adv)), n_orig, n_adv)

    def to_adv(self, orig):
        """Victim label(s) -> adversarial label(s); UNMAPPED where not in the map."""
        return self._fwd[np.asarray(orig)]

    def to_orig(self, adv):
        adv = np.asarray(adv)
        out = self._inv[adv]
        if np.any(out == UNMAPPED):
            raise KeyError(f"adversarial label(s) without a mapping: {np.unique(adv[out == UNMAPPED])}")
        return out

    def to_dict(self):
        return {"pairs": [list(p) for p in self.pairs], "n_orig": self.n_orig, "n_adv": self.n_adv}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(p) for p in d["pairs"]), d["n_orig"], d["n_adv"])


def map_label(lmap, orig):
    """Victim label -> adversarial label (``UNMAPPED`` if the label is unused)."""
    return int(lmap.to_adv(orig))


def unmap_label(lmap, adv):
    """Adversarial label -> the victim label it is read from."""
    return int(lmap.to_orig(adv))
