"""Little-endian binary formats and the line-oriented text formats.

Binary layouts (all little-endian, every file starts with 4 magic bytes and
a u32 format version):

* ``THBT`` parameter sets: u32 entry count, then per entry u32 name length,
  UTF-8 name, u32 rank, rank x u32 dims, f64 data.
* ``FMAT`` feature matrices: u32 T, u32 D, f64 row-major data.
* ``KMNS`` codebooks: u32 K, u32 D, f64 centroids.
"""
from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _open(path, magic):
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return r


def _f64_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode_params(params) -> bytes:
    parts = [b"THBT", struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_f64_bytes(arr))
    return b"".join(parts)


def save_params(path, params):
    atomic_write_bytes(path, encode_params(params))


def load_params(path):
    r = _open(path, b"THBT")
    out = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        out[name] = r.f64(count).reshape(dims)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes")
    return out


def save_fmat(path, frames):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {frames.shape}")
    t, d = frames.shape
    atomic_write_bytes(path, b"FMAT" + struct.pack("<III", FORMAT_VERSION, t, d) + _f64_bytes(frames))


def load_fmat(path):
    r = _open(path, b"FMAT")
    t, d = r.u32(), r.u32()
    return r.f64(t * d).reshape(t, d)


def save_codebook(path, centroids):
    c = np.asarray(centroids, dtype=np.float64)
    k, d = c.shape
    atomic_write_bytes(path, b"KMNS" + struct.pack("<III", FORMAT_VERSION, k, d) + _f64_bytes(c))


def load_codebook_array(path):
    r = _open(path, b"KMNS")
    k, d = r.u32(), r.u32()
    return r.f64(k * d).reshape(k, d)


# ------------------------------------------------------------------ text formats


def write_codes(path, codes):
    """``utt_id<TAB>space-separated ints`` per line; ``codes`` maps id -> ints."""
    lines = [f"{uid}\t{' '.join(str(int(c)) for c in seq)}" for uid, seq in codes.items()]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_codes(path):
    out = OrderedDict()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        uid, _, rest = line.partition("\t")
        try:
            out[uid] = np.array([int(x) for x in rest.split()], dtype=np.int64)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer code") from None
    return out


def write_index_corpus(path, seqs):
    """One utterance per line, space-separated integer indices."""
    atomic_write_text(path, "".join(" ".join(str(int(i)) for i in s) + "\n" for s in seqs))


def read_index_corpus(path):
    return [np.array([int(x) for x in line.split()], dtype=np.int64)
            for line in Path(path).read_text().splitlines() if line.strip()]


def read_tsv(path, ncols):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != ncols:
            raise FormatError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(cols)}")
        rows.append(cols)
    return rows


def write_tsv(path, rows):
    atomic_write_text(path, "".join("\t".join(str(c) for c in r) + "\n" for r in rows))
