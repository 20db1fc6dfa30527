"""Feature-correlation matrices: extraction, round averaging, trace score, distances.

A ``CorrelationRecord`` is the only object a client ever hands to the memory
bank. Its binary form packs the upper triangle of ``r_bar`` row by row after a
fixed 28-byte little-endian header::

    magic   4s   b"FOAR"
    client  u32
    round   u32
    n       u32
    batches u32
    trace   f64
    entries f64 * n(n+1)/2
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import LinalgError, as_matrix, frobenius_distance, qr_decompose

MAGIC = b"FOAR"
HEADER = struct.Struct("<4sIIIId")
HEADER_BYTES = HEADER.size
ENTRY_BYTES = 8


def extract_correlation(z) -> np.ndarray:
    """R factor of the (sign-normalized) QR decomposition of ``z``."""
    return qr_decompose(z).r


def round_average(rs) -> np.ndarray:
    rs = [as_matrix(r, "r") for r in rs]
    if not rs:
        raise ValueError("round_average needs at least one matrix")
    shape = rs[0].shape
    for r in rs[1:]:
        if r.shape != shape:
            raise LinalgError(f"shape mismatch in round_average: {shape} vs {r.shape}")
    return np.sum(rs, axis=0) / len(rs)


def independence_trace(r) -> float:
    r = as_matrix(r, "r")
    if r.shape[0] != r.shape[1]:
        raise LinalgError(f"trace needs a square matrix, got {r.shape}")
    return float(np.trace(r))


def packed_size(n: int) -> int:
    """Serialized byte size of one record with an n x n correlation matrix."""
    return HEADER_BYTES + ENTRY_BYTES * (n * (n + 1) // 2)


@dataclass(frozen=True)
class CorrelationRecord:
    client_id: int
    round: int
    r_bar: np.ndarray = field(repr=False)
    batches_averaged: int = 1
    trace: float = field(init=False)

    def __post_init__(self):
        r = as_matrix(self.r_bar, "r_bar")
        n = r.shape[0]
        if r.shape != (n, n):
            raise LinalgError(f"r_bar must be square, got {r.shape}")
        if np.any(np.tril(r, -1) != 0.0):
            raise ValueError("r_bar must be upper triangular")
        if np.any(np.diag(r) < 0):
            raise ValueError("r_bar diagonal must be non-negative")
        if self.batches_averaged < 1:
            raise ValueError("batches_averaged must be >= 1")
        r = r.copy()
        r.setflags(write=False)
        object.__setattr__(self, "r_bar", r)
        object.__setattr__(self, "trace", float(np.trace(r)))

    @property
    def n(self) -> int:
        return self.r_bar.shape[0]

    @classmethod
    def from_batches(cls, client_id: int, round: int, rs) -> "CorrelationRecord":
        rs = list(rs)
        return cls(client_id, round, round_average(rs), batches_averaged=len(rs))

    def to_bytes(self) -> bytes:
        iu = np.triu_indices(self.n)
        head = HEADER.pack(MAGIC, self.client_id, self.round, self.n,
                           self.batches_averaged, self.trace)
        return head + self.r_bar[iu].astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "CorrelationRecord":
        if len(payload) < HEADER_BYTES:
            raise ValueError(f"record truncated: {len(payload)} bytes < header")
        magic, client_id, rnd, n, batches, _trace = HEADER.unpack_from(payload)
        if magic != MAGIC:
            raise ValueError(f"bad record magic {magic!r}")
        if len(payload) != packed_size(n):
            raise ValueError(f"record for n={n} must be {packed_size(n)} bytes, got {len(payload)}")
        packed = np.frombuffer(payload, dtype="<f8", offset=HEADER_BYTES)
        r = np.zeros((n, n))
        r[np.triu_indices(n)] = packed
        return cls(client_id, rnd, r, batches_averaged=batches)

    def to_json(self) -> str:
        iu = np.triu_indices(self.n)
        return json.dumps({
            "client_id": self.client_id,
            "round": self.round,
            "n": self.n,
            "batches_averaged": self.batches_averaged,
            "trace": self.trace,
            "r_bar_upper": self.r_bar[iu].tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "CorrelationRecord":
        obj = json.loads(text)
        n = obj["n"]
        r = np.zeros((n, n))
        r[np.triu_indices(n)] = obj["r_bar_upper"]
        return cls(obj["client_id"], obj["round"], r, batches_averaged=obj["batches_averaged"])

    def __eq__(self, other):
        if not isinstance(other, CorrelationRecord):
            return NotImplemented
        return (self.client_id, self.round, self.batches_averaged) == (
            other.client_id, other.round, other.batches_averaged
        ) and np.array_equal(self.r_bar, other.r_bar)

    __hash__ = None


def pairwise_distance_map(records) -> np.ndarray:
    """Symmetric matrix of Frobenius distances between the records' ``r_bar``."""
    records = list(records)
    k = len(records)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = frobenius_distance(records[i].r_bar, records[j].r_bar)
    return out


def mean_pairwise_distance(records) -> float:
    d = pairwise_distance_map(records)
    k = d.shape[0]
    if k < 2:
        return 0.0
    return float(d[np.triu_indices(k, 1)].mean())
