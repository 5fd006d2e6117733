"""Binary checkpoint format (``.caspkpt``), little-endian throughout.

    magic   b"CASP"
    u32     format version
    u32 x6  d, n_layers, n_heads, vocab_size, max_seq_len, d_ff
    u32     record count
    records
    u32     CRC32 of every preceding byte

Record: ``u16`` name length, UTF-8 name, ``u8`` representation (0 dense,
1 grid-quantized, 2 vector-quantized), ``u8`` slot (0 whole tensor, 1 low-rank
left factor, 2 low-rank right factor), ``u8`` ndim, ``u32`` per dim, payload.

Payloads:
    dense  float32 row-major
    grid   u8 scheme (0 rtn, 1 greedy), u8 bits, u32 group size, u32 group count,
           float16 scales, float16 offsets, u32 byte count, packed indices
    vq     u8 bits, u32 vector dim, u32 codebook rows, float16 codebook,
           u32 byte count, packed indices

Indices are packed little-endian, ``index_width`` bits each.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import (
    FORMAT_VERSION,
    LAYER_TENSORS,
    LayerWeights,
    LowRank,
    ModelCheckpoint,
    TransformerConfig,
)
from .quantize import Codebook, QuantizedTensor, pack_indices, unpack_indices

MAGIC = b"CASP"
MAX_ELEMENTS = 2**31

DENSE, GRID, VQ = 0, 1, 2
WHOLE, FACTOR_A, FACTOR_B = 0, 1, 2
_GRID_SCHEMES = ("rtn", "greedy")

_CONFIG = struct.Struct("<6I")


class ChecksumError(ValueError):
    pass


# --------------------------------------------------------------------------- writing


def _write_record(out: io.BytesIO, name: str, slot: int, t) -> None:
    shape = tuple(int(n) for n in t.shape)
    if int(np.prod(shape)) > MAX_ELEMENTS:
        raise ValueError(f"{name}: tensor with {int(np.prod(shape))} elements exceeds 2^31")
    raw = name.encode()
    if isinstance(t, QuantizedTensor):
        tag = VQ if t.scheme == "vq" else GRID
    else:
        tag = DENSE
    out.write(struct.pack("<H", len(raw)) + raw)
    out.write(struct.pack("<BBB", tag, slot, len(shape)))
    out.write(struct.pack(f"<{len(shape)}I", *shape))
    if tag == DENSE:
        out.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return
    packed = pack_indices(np.asarray(t.indices).ravel(), t.index_width)
    if tag == GRID:
        out.write(struct.pack("<BBII", _GRID_SCHEMES.index(t.scheme), t.n_bits, t.group_size, t.n_groups))
        out.write(np.asarray(t.scales, dtype="<f2").tobytes())
        out.write(np.asarray(t.zeros, dtype="<f2").tobytes())
    else:
        cb = t.codebook
        out.write(struct.pack("<BII", t.n_bits, t.group_size, cb.size))
        out.write(np.ascontiguousarray(cb.entries, dtype="<f2").tobytes())
    out.write(struct.pack("<I", len(packed)) + packed)


def _records(model: ModelCheckpoint):
    yield "tok_emb", WHOLE, model.tok_emb
    yield "pos_emb", WHOLE, model.pos_emb
    for i, layer in enumerate(model.layers):
        for name, t in layer.tensors().items():
            key = f"layers.{i}.{name}"
            if isinstance(t, LowRank):
                yield key, FACTOR_A, t.a
                yield key, FACTOR_B, t.b
            else:
                yield key, WHOLE, t


def checkpoint_bytes(model: ModelCheckpoint) -> bytes:
    """Serialized form of ``model``; dense tensors are stored as float32."""
    if model.config.n_layers == 0 or not model.layers:
        raise ValueError("empty model")
    cfg = model.config
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", model.format_version))
    out.write(_CONFIG.pack(cfg.d, cfg.n_layers, cfg.n_heads, cfg.vocab_size, cfg.max_seq_len, cfg.d_ff))
    records = list(_records(model))
    out.write(struct.pack("<I", len(records)))
    for name, slot, t in records:
        _write_record(out, name, slot, t)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)


# --------------------------------------------------------------------------- reading


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype).copy()


def _read_record(rd: _Reader):
    (n,) = rd.unpack("H")
    name = rd.take(n).decode()
    tag, slot, ndim = rd.unpack("BBB")
    shape = rd.unpack(f"{ndim}I")
    numel = int(np.prod(shape))
    if numel > MAX_ELEMENTS:
        raise ValueError(f"{name}: tensor with {numel} elements exceeds 2^31")
    if tag == DENSE:
        return name, slot, rd.array("<f4", numel).astype(np.float32).reshape(shape)
    if tag == GRID:
        scheme, bits, group, n_groups = rd.unpack("BBII")
        if scheme >= len(_GRID_SCHEMES) or group < 1 or n_groups != -(-numel // group):
            raise ValueError(f"{name}: inconsistent grid header")
        scales = rd.array("<f2", n_groups).astype(np.float16)
        zeros = rd.array("<f2", n_groups).astype(np.float16)
        (nbytes,) = rd.unpack("I")
        if nbytes * 8 < numel * bits:
            raise ValueError(f"{name}: index payload shorter than declared dims")
        idx = unpack_indices(rd.take(nbytes), numel, bits)
        qt = QuantizedTensor(_GRID_SCHEMES[scheme], bits, group, shape, idx, scales, zeros)
        return name, slot, qt
    if tag == VQ:
        bits, vec, rows = rd.unpack("BII")
        if vec < 1 or rows != 2 ** (bits * vec):
            raise ValueError(f"{name}: inconsistent codebook header")
        entries = rd.array("<f2", rows * vec).astype(np.float16).reshape(rows, vec)
        count = -(-numel // vec)
        (nbytes,) = rd.unpack("I")
        if nbytes * 8 < count * bits * vec:
            raise ValueError(f"{name}: index payload shorter than declared dims")
        idx = unpack_indices(rd.take(nbytes), count, bits * vec)
        qt = QuantizedTensor("vq", bits, vec, shape, idx, codebook=Codebook(entries, bits, vec))
        return name, slot, qt
    raise ValueError(f"{name}: unknown representation tag {tag}")


def checkpoint_from_bytes(data: bytes) -> ModelCheckpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ValueError("not a CASP checkpoint")
    if len(data) < 12:
        raise ValueError("truncated checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch: checkpoint is corrupt")
    rd = _Reader(body)
    rd.take(8)
    cfg = TransformerConfig(*rd.unpack("6I"))
    (count,) = rd.unpack("I")
    tensors = {}
    for _ in range(count):
        name, slot, t = _read_record(rd)
        tensors[(name, slot)] = t
    if rd.pos != len(body):
        raise ValueError("trailing bytes after the last record")
    if cfg.n_layers == 0:
        raise ValueError("empty model")

    def get(name):
        if (name, WHOLE) in tensors:
            return tensors.pop((name, WHOLE))
        if (name, FACTOR_A) in tensors and (name, FACTOR_B) in tensors:
            return LowRank(tensors.pop((name, FACTOR_A)), tensors.pop((name, FACTOR_B)))
        raise ValueError(f"missing tensor {name}")

    tok, pos = get("tok_emb"), get("pos_emb")
    layers = tuple(
        LayerWeights(**{n: get(f"layers.{i}.{n}") for n in LAYER_TENSORS}) for i in range(cfg.n_layers)
    )
    if tensors:
        raise ValueError(f"unexpected records: {sorted(k[0] for k in tensors)}")
    return ModelCheckpoint(cfg, tok, pos, layers, version)


def load_checkpoint(path) -> ModelCheckpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
