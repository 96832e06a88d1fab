"""Label-only access to a victim, in process or over TCP.

Wire protocol: newline-delimited JSON. Each request line is
``{"id": n, "tokens": [ints]}`` and is answered by ``{"id": n, "label": int}``
(or ``{"id": n, "error": "..."}``). One request per prediction.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

import numpy as np

from .textdata import pad_sequences


class OracleError(RuntimeError):
    pass


class QueryOracle:
    """Base class: counts queries, reveals labels only."""

    def __init__(self):
        self.queries = 0
        self._lock = threading.Lock()

    def _count(self, n):
        with self._lock:
            self.queries += n

    def query(self, tokens):
        return int(self.query_many([tokens])[0])

    def query_many(self, seqs):
        raise NotImplementedError


class LocalOracle(QueryOracle):
    """Wraps a frozen victim; predictions are made in padded batches."""

    def __init__(self, victim, chunk=1024):
        super().__init__()
        self._predict = victim.predict_label
        self.vocab_size = victim.cfg.vocab_size
        self.n_labels = victim.cfg.n_classes
        self.chunk = chunk

    def query_many(self, seqs):
        seqs = [list(map(int, s)) for s in seqs]
        out = np.empty(len(seqs), dtype=np.int64)
        for start in range(0, len(seqs), self.chunk):
            part = seqs[start:start + self.chunk]
            ids, lengths = pad_sequences(part)
            out[start:start + len(part)] = self._predict(ids, lengths)
        self._count(len(seqs))
        return out


class FunctionOracle(QueryOracle):
    """Oracle backed by a plain ``tokens -> label`` function (used in tests)."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def query_many(self, seqs):
        out = np.array([int(self.fn(tuple(int(x) for x in s))) for s in seqs], dtype=np.int64)
        self._count(len(seqs))
        return out


class TCPOracle(QueryOracle):
    """Client for a remote oracle speaking the wire protocol.

    Requests for a batch are pipelined on one connection and matched back by id.
    """

    def __init__(self, host, port, timeout=30.0):
        super().__init__()
        self.addr = (host, int(port))
        self.timeout = timeout
        self._sock = None
        self._file = None
        self._next_id = 0

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.addr, timeout=self.timeout)
            except OSError as err:
                raise OracleError(f"cannot reach oracle at {self.addr[0]}:{self.addr[1]}: {err}") from err
            self._file = self._sock.makefile("rwb")

    def close(self):
        if self._sock is not None:
            self._file.close()
            self._sock.close()
            self._sock = self._file = None

    def query_many(self, seqs):
        self._connect()
        ids = []
        try:
            for s in seqs:
                rid = self._next_id
                self._next_id += 1
                ids.append(rid)
                msg = {"id": rid, "tokens": [int(x) for x in s]}
                self._file.write(json.dumps(msg).encode() + b"\n")
            self._file.flush()
            answers = {}
            for _ in ids:
                line = self._file.readline()
                if not line:
                    raise OracleError("oracle closed the connection")
                resp = json.loads(line)
                if "error" in resp:
                    raise OracleError(f"oracle error for request {resp.get('id')}: {resp['error']}")
                answers[resp["id"]] = int(resp["label"])
        except (OSError, ValueError) as err:
            self.close()
            raise OracleError(f"oracle transport failure: {err}") from err
        self._count(len(seqs))
        return np.array([answers[i] for i in ids], dtype=np.int64)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        oracle = self.server.oracle
        for line in self.rfile:
            if not line.strip():
                continue
            rid = None
            try:
                req = json.loads(line)
                rid = req["id"]
                tokens = req["tokens"]
                if not tokens:
                    raise ValueError("empty token list")
                resp = {"id": rid, "label": oracle.query(tokens)}
            except Exception as err:  # report to the client, keep serving
                resp = {"id": rid, "error": str(err)}
            self.wfile.write(json.dumps(resp).encode() + b"\n")
            self.wfile.flush()


class OracleServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, victim, host="127.0.0.1", port=0):
        super().__init__((host, port), _Handler)
        self.oracle = LocalOracle(victim)

    @property
    def port(self):
        return self.server_address[1]


def serve_in_thread(victim, host="127.0.0.1", port=0):
    """Start an :class:`OracleServer` on a daemon thread; caller shuts it down."""
    server = OracleServer(victim, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
