"""Binary checkpoints for float and quantized networks.

Layout (all little-endian)::

    magic        8 bytes  b"MERGEQCK"
    version      u16
    source_hash  u64      content hash of the source checkpoint (0 for a source)
    n_records    u32
    records, each:
        name     u32 length + UTF-8 bytes
        kind     u8       0 = float (f64 payload), 1 = int (i32 payload)
        bits     u8       0 for unquantized float tensors
        step     f64      0.0 for unquantized float tensors
        ndim     u32, then ndim x u32 dims
        payload  prod(dims) values

Record names are ``layers.{k}.weight``, ``layers.{k}.bias`` and, for layers
whose input is fake-quantized, ``layers.{k}.act`` (a scalar holding the step).
Hidden layers use relu and the last layer is the identity.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnet import InputHook, Layer, Network
from .quant import QuantizedTensor, QuantScheme, dequantize, fake_quant, ste_mask

MAGIC = b"MERGEQCK"
VERSION = 1
KIND_FLOAT, KIND_INT = 0, 1


class CheckpointError(ValueError):
    pass


@dataclass
class QuantizedCheckpoint:
    """Per-layer weights (integer or float), float biases and activation schemes."""

    weights: list  # QuantizedTensor | np.ndarray per layer
    biases: list[np.ndarray]
    act_schemes: list[QuantScheme | None] = field(default_factory=list)
    source_hash: int = 0

    def __post_init__(self):
        if not self.act_schemes:
            self.act_schemes = [None] * len(self.weights)
        if not (len(self.weights) == len(self.biases) == len(self.act_schemes)):
            raise CheckpointError("weights, biases and activation schemes must align")

    @classmethod
    def from_network(cls, net: Network, source_hash: int = 0) -> "QuantizedCheckpoint":
        return cls([l.weight.copy() for l in net.layers], [l.bias.copy() for l in net.layers],
                   source_hash=source_hash)

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(w, QuantizedTensor) for w in self.weights)

    @property
    def weight_bits(self) -> int | None:
        bits = {w.scheme.bits for w in self.weights if isinstance(w, QuantizedTensor)}
        return bits.pop() if len(bits) == 1 else None

    def to_network(self) -> Network:
        n = len(self.weights)
        layers = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            wf = dequantize(w) if isinstance(w, QuantizedTensor) else np.asarray(w, dtype=np.float64)
            layers.append(Layer(wf, b, "identity" if k == n - 1 else "relu"))
        return Network(layers)

    def act_hook(self) -> InputHook | None:
        return act_hook(self.act_schemes)


def act_hook(schemes: list[QuantScheme | None], keep_fp: list[bool] | None = None) -> InputHook | None:
    """Deterministic activation fake-quant on layer inputs, STE mask for backward."""
    if all(s is None for s in schemes):
        return None

    def hook(k, x):
        s = schemes[k]
        if s is None or (keep_fp is not None and keep_fp[k]):
            return x, None
        return fake_quant(x, s), ste_mask(x, s)

    return hook


def _records(ck: QuantizedCheckpoint):
    for k, (w, b, a) in enumerate(zip(ck.weights, ck.biases, ck.act_schemes)):
        if isinstance(w, QuantizedTensor):
            yield f"layers.{k}.weight", KIND_INT, w.scheme.bits, w.scheme.step, w.ints
        else:
            yield f"layers.{k}.weight", KIND_FLOAT, 0, 0.0, np.asarray(w, dtype=np.float64)
        yield f"layers.{k}.bias", KIND_FLOAT, 0, 0.0, np.asarray(b, dtype=np.float64)
        if a is not None:
            yield f"layers.{k}.act", KIND_FLOAT, a.bits, a.step, np.array(a.step)


def to_bytes(ck: QuantizedCheckpoint) -> bytes:
    recs = list(_records(ck))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HQI", VERSION, ck.source_hash, len(recs)))
    for name, kind, bits, step, arr in recs:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BBd", kind, bits, step))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        dtype = "<i4" if kind == KIND_INT else "<f8"
        buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> QuantizedCheckpoint:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    try:
        version, source_hash, n_rec = struct.unpack_from("<HQI", view, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        off = 8 + struct.calcsize("<HQI")
        recs = {}
        for _ in range(n_rec):
            (nlen,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off:off + nlen]).decode("utf-8")
            off += nlen
            kind, bits, step = struct.unpack_from("<BBd", view, off)
            off += struct.calcsize("<BBd")
            (ndim,) = struct.unpack_from("<I", view, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            dtype = np.dtype("<i4") if kind == KIND_INT else np.dtype("<f8")
            nbytes = count * dtype.itemsize
            if off + nbytes > len(view):
                raise CheckpointError(f"truncated payload in record {name!r}")
            arr = np.frombuffer(view[off:off + nbytes], dtype=dtype).reshape(shape)
            off += nbytes
            recs[name] = (kind, bits, step, arr)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(view):
        raise CheckpointError("trailing bytes after last record")

    n_layers = len([n for n in recs if n.endswith(".weight")])
    weights, biases, acts = [], [], []
    for k in range(n_layers):
        try:
            kind, bits, step, arr = recs[f"layers.{k}.weight"]
            _, _, _, bias = recs[f"layers.{k}.bias"]
        except KeyError as exc:
            raise CheckpointError(f"missing record {exc}") from exc
        if kind == KIND_INT:
            try:
                weights.append(QuantizedTensor(arr.astype(np.int64), QuantScheme(bits, step)))
            except ValueError as exc:
                raise CheckpointError(f"layers.{k}.weight: {exc}") from exc
        else:
            weights.append(arr.astype(np.float64))
        biases.append(bias.astype(np.float64))
        act = recs.get(f"layers.{k}.act")
        acts.append(QuantScheme(act[1], act[2], "activation") if act else None)
    return QuantizedCheckpoint(weights, biases, acts, source_hash)


def content_hash(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ck: QuantizedCheckpoint | Network, path: str | Path, source_hash: int | None = None) -> int:
    """Write a checkpoint atomically and return its content hash."""
    if isinstance(ck, Network):
        ck = QuantizedCheckpoint.from_network(ck, source_hash or 0)
    elif source_hash is not None:
        ck = QuantizedCheckpoint(ck.weights, ck.biases, ck.act_schemes, source_hash)
    data = to_bytes(ck)
    atomic_write(path, data)
    return content_hash(data)


def load(path: str | Path) -> QuantizedCheckpoint:
    return from_bytes(Path(path).read_bytes())


def file_hash(path: str | Path) -> int:
    return content_hash(Path(path).read_bytes())
