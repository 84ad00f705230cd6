"""Binary checkpoint and dataset containers.

Checkpoint layout (all integers little-endian u32 unless noted)::

    b"TPRL" | version | n_sections
    per section:  name | n_tensors
    per tensor:   name | rank | dims[rank] | float64 values, row-major
    crc32 of every preceding byte

Strings are a u32 byte length followed by UTF-8.  The dataset container uses
the same conventions under the magic ``b"TPRLDATA"``.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .environment import Sample
from .errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, VersionMismatchError

CHECKPOINT_MAGIC = b"TPRL"
DATA_MAGIC = b"TPRLDATA"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def atomic_write(path, payload: bytes):
    """Write via a temp file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Writer:
    def __init__(self, magic):
        self.parts = [magic, _U32.pack(FORMAT_VERSION)]

    def u32(self, v):
        if not 0 <= v < 2**32:
            raise FormatError(f"value {v} does not fit in u32")
        self.parts.append(_U32.pack(v))

    def u64(self, v):
        self.parts.append(_U64.pack(int(v)))

    def string(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def f64(self, arr):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def raw(self, b):
        self.parts.append(b)

    def finish(self):
        body = b"".join(self.parts)
        return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, magic: bytes, kind: str):
        self.data, self.pos, self.kind = data, 0, kind
        head = data[: len(magic)]
        if head != magic[: len(head)]:
            raise BadMagicError(f"{kind}: bad magic {head!r}")
        if len(head) < len(magic):
            raise TruncatedFileError(f"{kind}: file ends inside the magic")
        self.pos = len(magic)
        version = self.u32()
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"{kind}: format version {version}, expected {FORMAT_VERSION}")

    def take(self, n):
        # the last 4 bytes are the checksum, never payload
        if self.pos + n > len(self.data) - 4:
            raise TruncatedFileError(f"{self.kind}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        (v,) = _U32.unpack(self.take(4))
        return v

    def u64(self):
        (v,) = _U64.unpack(self.take(8))
        return v

    def string(self):
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.kind}: invalid UTF-8 name at byte {self.pos}") from None

    def f64(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def finish(self):
        if len(self.data) - self.pos != 4:
            raise FormatError(f"{self.kind}: {len(self.data) - self.pos - 4} unexpected trailing bytes")
        (stored,) = _U32.unpack_from(self.data, self.pos)
        if stored != zlib.crc32(self.data[: self.pos]):
            raise ChecksumError(f"{self.kind}: CRC32 mismatch")


# -- checkpoints ------------------------------------------------------------------


def encode_checkpoint(sections):
    """``sections`` maps section name -> {tensor name: array}."""
    w = _Writer(CHECKPOINT_MAGIC)
    w.u32(len(sections))
    for sec_name, tensors in sections.items():
        w.string(sec_name)
        w.u32(len(tensors))
        for name, value in tensors.items():
            arr = np.asarray(value, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"tensor {sec_name}/{name} has non-finite values")
            w.string(name)
            w.u32(arr.ndim)
            for d in arr.shape:
                w.u32(d)
            w.f64(arr)
    return w.finish()


def decode_checkpoint(data: bytes):
    r = _Reader(data, CHECKPOINT_MAGIC, "checkpoint")
    sections = {}
    for _ in range(r.u32()):
        sec_name = r.string()
        if sec_name in sections:
            raise FormatError(f"checkpoint: duplicate section {sec_name!r}")
        tensors = {}
        for _ in range(r.u32()):
            name = r.string()
            if name in tensors:
                raise FormatError(f"checkpoint: duplicate tensor {sec_name}/{name}")
            shape = tuple(r.u32() for _ in range(r.u32()))
            tensors[name] = r.f64(shape)
        sections[sec_name] = tensors
    r.finish()
    return sections


def save_checkpoint(sections, path):
    atomic_write(path, encode_checkpoint(sections))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# -- dataset container ------------------------------------------------------------


def pack_bits(bits):
    """Bool vector -> bytes, least significant bit first."""
    return np.packbits(np.asarray(bits, dtype=bool), bitorder="little").tobytes()


def unpack_bits(raw, count):
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count, bitorder="little").astype(bool)


def encode_dataset(n_tokens, d_v, d_q, samples=None, demos=None):
    """Container with an optional ``samples`` and an optional ``demos`` section."""
    w = _Writer(DATA_MAGIC)
    for v in (n_tokens, d_v, d_q):
        w.u32(v)
    sections = [(name, items) for name, items in (("samples", samples), ("demos", demos)) if items is not None]
    w.u32(len(sections))
    for name, items in sections:
        w.string(name)
        w.u32(len(items))
        if name == "samples":
            for s in items:
                if s.tokens.shape != (n_tokens, d_v) or s.query.shape != (d_q,):
                    raise FormatError(f"sample {s.seed} does not match header dimensions")
                rel = np.sort(np.asarray(s.relevant, dtype=np.int64))
                w.u64(s.seed)
                w.u32(len(rel))
                for i in rel:
                    w.u32(int(i))
                w.f64(s.tokens)
                w.f64(s.query)
        else:
            for d in items:
                w.u64(d.sample_seed)
                w.u32(len(d.steps))
                for step in d.steps:
                    w.u32(len(step.labels))
                    for i in step.index_map:
                        w.u32(int(i))
                    w.raw(pack_bits(step.labels))
    return w.finish()


def decode_dataset(data: bytes):
    """Returns ``(header, samples or None, demos or None)``.

    Demo entries are ``(sample_seed, index_maps, labels)``; codes are not stored
    and are recomputed from the frozen encoder by the consumer.
    """
    r = _Reader(data, DATA_MAGIC, "dataset")
    n_tokens, d_v, d_q = r.u32(), r.u32(), r.u32()
    samples = demos = None
    for _ in range(r.u32()):
        name = r.string()
        count = r.u32()
        if name == "samples" and samples is None:
            samples = []
            for _ in range(count):
                seed = r.u64()
                rel = np.array([r.u32() for _ in range(r.u32())], dtype=np.int64)
                if rel.size and (rel.max() >= n_tokens or np.any(np.diff(rel) <= 0)):
                    raise FormatError(f"dataset: bad relevant set for sample {seed}")
                tokens = r.f64((n_tokens, d_v))
                query = r.f64((d_q,))
                samples.append(Sample(tokens, query, rel, seed))
        elif name == "demos" and demos is None:
            demos = []
            for _ in range(count):
                seed = r.u64()
                maps, labels = [], []
                for _ in range(r.u32()):
                    k = r.u32()
                    maps.append(np.array([r.u32() for _ in range(k)], dtype=np.int64))
                    labels.append(unpack_bits(r.take((k + 7) // 8), k))
                demos.append((seed, maps, labels))
        else:
            raise FormatError(f"dataset: unexpected section {name!r}")
    r.finish()
    return {"n_tokens": n_tokens, "d_v": d_v, "d_q": d_q}, samples, demos


def save_dataset(path, n_tokens, d_v, d_q, samples=None, demos=None):
    atomic_write(path, encode_dataset(n_tokens, d_v, d_q, samples, demos))


def load_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
