"""Victim sequence classifiers: LSTM, Bi-LSTM, Kim-style CNN and a 1-layer CNN.

All four share the same front end (an embedding matrix) so that a batch of
token ids and a batch of per-step distributions over the vocabulary go
through identical code after the first layer: ids index the embedding,
distributions multiply it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Graph, NonFiniteError, Tensor, load_tensors, ops, save_tensors
from .textdata import Vocab, encode, iter_batches

log = logging.getLogger(__name__)

ARCHS = ("lstm", "bilstm", "cnn", "cnn1")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VictimConfig:
    arch: str
    vocab_size: int
    n_classes: int
    embed_dim: int = 32
    hidden: int = 64
    n_filters: int = 32
    widths: tuple = (3, 4, 5)
    cnn1_width: int = 5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        self.widths = tuple(self.widths)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 3e-3
    batch_size: int = 32
    max_len: int = None
    seed: int = 0


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(cfg, rng):
    """Fresh parameters for ``cfg``; recurrent weights ~ U(-0.08, 0.08)."""
    d, H = cfg.embed_dim, cfg.hidden
    p = {"embed": rng.normal(0.0, 0.3, size=(cfg.vocab_size, d)).astype(np.float32)}

    def lstm(prefix):
        p[f"{prefix}.W"] = rng.uniform(-0.08, 0.08, size=(d, 4 * H)).astype(np.float32)
        p[f"{prefix}.U"] = rng.uniform(-0.08, 0.08, size=(H, 4 * H)).astype(np.float32)
        b = np.zeros(4 * H, dtype=np.float32)
        b[H:2 * H] = 1.0  # forget gate
        p[f"{prefix}.b"] = b

    if cfg.arch == "lstm":
        lstm("fwd")
        feat = H
    elif cfg.arch == "bilstm":
        lstm("fwd")
        lstm("bwd")
        feat = 2 * H
    elif cfg.arch == "cnn":
        for w in cfg.widths:
            p[f"conv{w}.W"] = _glorot(rng, (w, d, cfg.n_filters), w * d, cfg.n_filters)
            p[f"conv{w}.b"] = np.zeros(cfg.n_filters, dtype=np.float32)
        feat = cfg.n_filters * len(cfg.widths)
    else:
        w = cfg.cnn1_width
        p["conv.W"] = _glorot(rng, (w, d, cfg.n_filters), w * d, cfg.n_filters)
        p["conv.b"] = np.zeros(cfg.n_filters, dtype=np.float32)
        feat = cfg.n_filters
    p["out.W"] = _glorot(rng, (feat, cfg.n_classes), feat, cfg.n_classes)
    p["out.b"] = np.zeros(cfg.n_classes, dtype=np.float32)
    return p


def _lengths_for(ids_shape, lengths):
    B, T = ids_shape[:2]
    if lengths is None:
        return np.full(B, T, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,):
        raise ValueError(f"lengths shape {lengths.shape} does not match batch of {B}")
    if (lengths < 1).any():
        raise ValueError("empty sequence")
    if (lengths > T).any():
        raise ValueError("length exceeds padded width")
    return lengths


class VictimModel:
    """A classifier ``C: s -> l_S`` with a soft-input path.

    ``forward_hard`` takes token ids ``(B, T)`` (or one sequence ``(T,)``),
    ``forward_soft`` takes per-step distributions ``(B, T, |V_S|)``. Both
    return logits. Padded steps beyond ``lengths`` are ignored.
    """

    def __init__(self, cfg, params, frozen=False):
        self.cfg = cfg
        self.params = {k: Tensor(v, requires_grad=not frozen) for k, v in params.items()}
        self.frozen = frozen

    @classmethod
    def init(cls, cfg, seed=0):
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    @property
    def arch(self):
        return self.cfg.arch

    def parameters(self):
        return list(self.params.values())

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)
        return self

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- forward paths -------------------------------------------------------

    def forward_hard(self, ids, lengths=None):
        ids = np.asarray(ids)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.shape[1] == 0:
            raise ValueError("empty sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range for vocab of {self.cfg.vocab_size}")
        lengths = _lengths_for(ids.shape, lengths)
        emb = ops.embedding(self.params["embed"], ids)
        logits = self._encode(emb, lengths)
        return logits[0] if single else logits

    def forward_soft(self, g, lengths=None, check=True):
        g = g if isinstance(g, Tensor) else Tensor(g)
        single = g.ndim == 2
        if single:
            g = ops.reshape(g, (1,) + g.shape)
        if g.ndim != 3 or g.shape[2] != self.cfg.vocab_size:
            raise ValueError(f"soft sequence must be (B, T, {self.cfg.vocab_size}), got {g.shape}")
        if g.shape[1] == 0:
            raise ValueError("empty sequence")
        lengths = _lengths_for(g.shape, lengths)
        if check:
            mask = np.arange(g.shape[1])[None, :] < lengths[:, None]
            sums = g.data.sum(axis=-1, dtype=np.float64)
            if (np.abs(sums - 1.0)[mask] > 1e-4).any() or (g.data[mask] < 0).any():
                raise ValueError("soft sequence rows must be probability distributions")
        emb = ops.matmul(g, self.params["embed"])
        logits = self._encode(emb, lengths)
        return logits[0] if single else logits

    def predict_label(self, ids, lengths=None):
        """Argmax label(s); ties go to the lowest label id."""
        logits = self.forward_hard(ids, lengths).data
        return np.argmax(logits, axis=-1)

    def _encode(self, emb, lengths):
        p = self.params
        T = emb.shape[1]
        mask = np.arange(T)[None, :] < lengths[:, None]
        arch = self.cfg.arch
        if arch in ("cnn", "cnn1") and not mask.all():
            # zero the padded tail so windows at the true end see the same
            # zero padding an unpadded sequence would
            emb = ops.mul(emb, mask[..., None].astype(emb.dtype))
        if arch == "lstm":
            feat = self._lstm(emb, "fwd", mask, reverse=False)
        elif arch == "bilstm":
            feat = ops.concat([
                self._lstm(emb, "fwd", mask, reverse=False),
                self._lstm(emb, "bwd", mask, reverse=True),
            ], axis=-1)
        elif arch == "cnn":
            pooled = [
                ops.max_over_time(ops.relu(ops.conv1d_same(emb, p[f"conv{w}.W"], p[f"conv{w}.b"])), mask)
                for w in self.cfg.widths
            ]
            feat = ops.concat(pooled, axis=-1)
        else:
            conv = ops.relu(ops.conv1d_same(emb, p["conv.W"], p["conv.b"]))
            feat = ops.mean_over_time(conv, mask)
        return ops.add(ops.matmul(feat, p["out.W"]), p["out.b"])

    def _lstm(self, emb, prefix, mask, reverse):
        """Final hidden state of one direction.

        Forward: the state after the last valid step. Reverse: the state after
        consuming the sequence right-to-left, i.e. the output at step 0.
        Padded steps carry the state through unchanged.
        """
        p = self.params
        H = self.cfg.hidden
        B, T = emb.shape[:2]
        xw = ops.add(ops.matmul(emb, p[f"{prefix}.W"]), p[f"{prefix}.b"])
        U = p[f"{prefix}.U"]
        zeros = np.zeros((B, H), dtype=emb.dtype)
        h, c = Tensor._wrap(zeros, False), Tensor._wrap(zeros, False)
        full = mask.all()
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            z = ops.slice(xw, (np.s_[:], t))
            if t != steps[0]:
                z = ops.add(z, ops.matmul(h, U))
            i = ops.sigmoid(ops.slice(z, np.s_[:, :H]))
            f = ops.sigmoid(ops.slice(z, np.s_[:, H:2 * H]))
            o = ops.sigmoid(ops.slice(z, np.s_[:, 2 * H:3 * H]))
            cand = ops.tanh(ops.slice(z, np.s_[:, 3 * H:]))
            c_new = ops.add(ops.mul(f, c), ops.mul(i, cand))
            h_new = ops.mul(o, ops.tanh(c_new))
            if full:
                h, c = h_new, c_new
            else:
                m = mask[:, t:t + 1].astype(emb.dtype)
                keep = 1.0 - m
                c = ops.add(ops.mul(c_new, m), ops.mul(c, keep))
                h = ops.add(ops.mul(h_new, m), ops.mul(h, keep))
        return h

    # -- persistence ---------------------------------------------------------

    def save(self, directory, vocab=None, label_names=None, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        desc = {"config": asdict(self.cfg), "frozen": self.frozen}
        if extra:
            desc.update(extra)
        (directory / "victim.json").write_text(json.dumps(desc, indent=2))
        save_tensors(directory / "weights", {k: v.data for k, v in self.params.items()})
        if vocab is not None:
            payload = {"vocab": vocab.to_dict(), "labels": list(label_names or [])}
            (directory / "vocab.json").write_text(json.dumps(payload))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        desc = json.loads((directory / "victim.json").read_text())
        cfg = VictimConfig(**desc["config"])
        params, _ = load_tensors(directory / "weights")
        model = cls(cfg, params)
        if desc.get("frozen", True):
            model.freeze()
        return model


def load_victim_vocab(directory):
    payload = json.loads((Path(directory) / "vocab.json").read_text())
    return Vocab.from_dict(payload["vocab"]), payload["labels"]


def random_network(cfg, seed=0):
    """Untrained, frozen victim."""
    return VictimModel.init(cfg, seed).freeze()


def onehot(ids, size, dtype=np.float32):
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (size,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def accuracy(model, batch, chunk=512):
    correct = 0
    for start in range(0, len(batch), chunk):
        ids = batch.ids[start:start + chunk]
        lengths = batch.lengths[start:start + chunk]
        width = int(lengths.max())
        pred = model.predict_label(ids[:, :width], lengths)
        correct += int((pred == batch.labels[start:start + chunk]).sum())
    return correct / max(len(batch), 1)


@dataclass
class TrainResult:
    model: VictimModel
    test_accuracy: float
    history: list = field(default_factory=list)


def train_victim(train, test, vocab, cfg, tcfg=None):
    """Train a victim from scratch, freeze it, and report test accuracy."""
    tcfg = tcfg or TrainConfig()
    rng = np.random.default_rng(tcfg.seed)
    model = VictimModel.init(cfg, seed=tcfg.seed)
    opt = Adam(model.parameters(), lr=tcfg.lr)
    train_b = encode(train, vocab, tcfg.max_len)
    test_b = encode(test, vocab, tcfg.max_len)
    history = []
    for epoch in range(tcfg.epochs):
        losses = []
        try:
            for batch in iter_batches(train_b, tcfg.batch_size, rng):
                with Graph() as g:
                    loss = ops.cross_entropy(model.forward_hard(batch.ids, batch.lengths), batch.labels)
                    g.backward(loss)
                opt.step()
                losses.append(loss.item())
            acc = accuracy(model, test_b)
        except NonFiniteError as err:
            raise TrainingDiverged(f"{cfg.arch}: {err} at epoch {epoch + 1}") from err
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "test_acc": acc})
        log.info("victim %s epoch %d loss %.4f test acc %.4f", cfg.arch, epoch + 1, np.mean(losses), acc)
    model.freeze()
    return TrainResult(model, accuracy(model, test_b), history)
