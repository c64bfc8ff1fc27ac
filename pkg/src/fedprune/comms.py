"""Sparse model wire format and communication-cost accounting.

Blob layout, little-endian::

    magic     b"FPSB"
    version   u16
    layers    u16                      number of parameterised layers
    params    u32                      total parameter count
    per layer offset u32, count u32    first flat index, prunable weights (0 if none)
    bitmap    ceil(n/8) bytes          1 bit per prunable weight, LSB first
    values    f32 * popcount           surviving weights, ascending index
    rest      f32 * (params - n)       non-prunable params, ascending index

Sizes are reported in KB = 1024 bytes and MB = 1000 KB, the units under which
a 162,468-parameter float32 model is 634.64 KB and 80 transfers of it 50.77 MB.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, IntegrityError
from .nn import DenseModel
from .pruning import Mask, check_closure

MAGIC = b"FPSB"
VERSION = 1
BYTES_PER_VALUE = 4
KB = 1024
MB = 1000 * KB
COST_MODELS = ("idealized", "wire")

_HEAD = struct.Struct("<4sHHI")
_ENTRY = struct.Struct("<II")


def _layer_table(model: DenseModel) -> list[tuple[int, int]]:
    return [(s.offset, s.spec.n_weight if s.spec.prunable else 0)
            for s in model.arch.slots if s.size]


def encode_sparse(model: DenseModel, mask: Mask) -> bytes:
    """Serialise a masked model; raises IntegrityError if a pruned weight is nonzero."""
    mask.check(model)
    if not check_closure(model, mask):
        raise IntegrityError("model has nonzero weights at pruned positions")
    params = model.params.astype("<f4", copy=False)
    table = _layer_table(model)
    prunable = model.arch.prunable_index
    rest = np.ones(params.size, dtype=bool)
    rest[prunable] = False

    out = [_HEAD.pack(MAGIC, VERSION, len(table), params.size)]
    out += [_ENTRY.pack(off, cnt) for off, cnt in table]
    out.append(np.packbits(mask.bits, bitorder="little").tobytes())
    out.append(params[prunable[mask.bits]].tobytes())
    out.append(params[rest].tobytes())
    return b"".join(out)


def decode_sparse(blob: bytes) -> tuple[np.ndarray, Mask]:
    """Inverse of :func:`encode_sparse`: returns ``(float32 params, mask)``.

    Any malformed input raises CodecError.
    """
    if not isinstance(blob, (bytes, bytearray, memoryview)):
        raise CodecError("blob must be bytes")
    blob = bytes(blob)
    if len(blob) < _HEAD.size:
        raise CodecError("truncated header")
    magic, version, n_layers, n_params = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CodecError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    pos = _HEAD.size
    if len(blob) < pos + n_layers * _ENTRY.size:
        raise CodecError("truncated layer table")
    table = [_ENTRY.unpack_from(blob, pos + i * _ENTRY.size) for i in range(n_layers)]
    pos += n_layers * _ENTRY.size

    end = 0
    for off, cnt in table:
        if off < end or off + cnt > n_params:
            raise CodecError("layer table out of order or out of range")
        end = off + cnt
    sizes = tuple(cnt for _, cnt in table if cnt)
    n_prunable = sum(sizes)
    n_rest = n_params - n_prunable

    nbits = (n_prunable + 7) // 8
    if len(blob) < pos + nbits:
        raise CodecError("truncated bitmap")
    raw = np.frombuffer(blob, dtype=np.uint8, count=nbits, offset=pos)
    bits = np.unpackbits(raw, bitorder="little")
    if bits[n_prunable:].any():
        raise CodecError("nonzero padding bits in bitmap")
    bits = bits[:n_prunable].astype(bool)
    pos += nbits

    n_values = int(bits.sum())
    expected = pos + BYTES_PER_VALUE * (n_values + n_rest)
    if len(blob) != expected:
        raise CodecError(f"blob is {len(blob)} bytes, layout needs {expected} (popcount {n_values})")
    values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=pos)
    rest_vals = np.frombuffer(blob, dtype="<f4", count=n_rest, offset=pos + BYTES_PER_VALUE * n_values)

    prunable = np.concatenate([np.arange(off, off + cnt) for off, cnt in table if cnt]) \
        if sizes else np.zeros(0, dtype=np.int64)
    params = np.zeros(n_params, dtype=np.float32)
    params[prunable[bits]] = values
    rest = np.ones(n_params, dtype=bool)
    rest[prunable] = False
    params[rest] = rest_vals
    return params, Mask(bits, sizes)


def idealized_bytes(surviving: int, non_prunable: int) -> int:
    return BYTES_PER_VALUE * (int(surviving) + int(non_prunable))


def cost_of(model: DenseModel, mask: Mask, cost_model: str = "idealized") -> int:
    """Bytes needed to ship ``model`` under ``mask``.

    ``idealized`` counts 4 bytes per surviving weight and per non-prunable
    parameter; ``wire`` is the exact encoded blob length.
    """
    if cost_model == "idealized":
        arch = model.arch
        return idealized_bytes(int(mask.bits.sum()), arch.n_params - arch.n_prunable)
    if cost_model == "wire":
        return len(encode_sparse(model, mask))
    raise ValueError(f"unknown cost model {cost_model!r}")


def to_kb(nbytes: float) -> float:
    return nbytes / KB


def to_mb(nbytes: float) -> float:
    return nbytes / MB


def trace_total(sizes) -> float:
    """Total traffic of a per-round size trace: every round is one download and one upload."""
    return float(sum(2 * s for s in sizes))


def saved_pct(method_bytes: float, fedavg_bytes: float) -> float:
    if fedavg_bytes <= 0:
        return 0.0
    return 100.0 * (1.0 - method_bytes / fedavg_bytes)


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client: int
    direction: str  # "up" | "down"
    cost_model: str
    nbytes: int


@dataclass(frozen=True)
class LedgerTotals:
    upload: int
    download: int
    n_clients: int

    @property
    def total(self) -> int:
        return self.upload + self.download

    @property
    def per_client(self) -> float:
        return self.total / self.n_clients if self.n_clients else 0.0


@dataclass
class CostLedger:
    """Append-only log of transfers; written only by the coordinator."""

    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, round: int, client: int, direction: str, nbytes: int,
               cost_model: str = "idealized") -> None:
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        if cost_model not in COST_MODELS:
            raise ValueError(f"unknown cost model {cost_model!r}")
        if nbytes < 0:
            raise ValueError("byte counts are non-negative")
        self.entries.append(LedgerEntry(int(round), int(client), direction, cost_model, int(nbytes)))

    def totals(self, cost_model: str = "idealized") -> LedgerTotals:
        up = down = 0
        clients = set()
        for e in self.entries:
            if e.cost_model != cost_model:
                continue
            clients.add(e.client)
            if e.direction == "up":
                up += e.nbytes
            else:
                down += e.nbytes
        return LedgerTotals(up, down, len(clients))

    def per_round(self, cost_model: str = "idealized", direction: str = "up") -> dict[int, int]:
        """Bytes per round summed over clients."""
        out: dict[int, int] = defaultdict(int)
        for e in self.entries:
            if e.cost_model == cost_model and e.direction == direction:
                out[e.round] += e.nbytes
        return dict(sorted(out.items()))
