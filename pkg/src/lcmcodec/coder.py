"""Byte-oriented range coder over 16-bit CDF tables, plus varint primitives.

The coder follows the carry-propagating low/range design used by LZMA, widened
to a 48-bit ``range``: renormalization whenever range drops below 2**40 and a
seven-byte flush.  Kernels are compiled with numba and
run windows in parallel; a chunk only ever depends on its own window, so the
bytes are identical for any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import prange

from .probability import PRECISION, CdfTable, rate_bits

# 48-bit range register: the truncation in range // 2**16 then costs at most
# 2**-24 relative per symbol, so near-certain symbols do not pile up overhead
RANGE_BITS = 48
TOP = 1 << (RANGE_BITS - 8)
MASK = (1 << RANGE_BITS) - 1
FLUSH_BYTES = RANGE_BITS // 8 + 1

OK = 0
ERR_RANGE = 1
ERR_EOF = 2
ERR_HEAD = 3


class CorruptStreamError(ValueError):
    pass


_MESSAGES = {
    ERR_RANGE: "range coder state violation (decoded value outside table)",
    ERR_EOF: "read past end of chunk",
    ERR_HEAD: "bad chunk lead byte",
}


@dataclass
class EncodedChunk:
    data: bytes
    count: int
    target_bits: float = 0.0

    def __len__(self):
        return len(self.data)


# ------------------------------------------------------------- kernels


@numba.njit(cache=True, inline="always")
def _shift_low(low, cache, cache_size, out, pos):
    if low < (0xFF << (RANGE_BITS - 8)) or low > MASK:
        carry = low >> RANGE_BITS
        temp = cache
        while True:
            out[pos] = (temp + carry) & 0xFF
            pos += 1
            temp = 0xFF
            cache_size -= 1
            if cache_size == 0:
                break
        cache = (low >> (RANGE_BITS - 8)) & 0xFF
    cache_size += 1
    low = (low & (TOP - 1)) << 8
    return low, cache, cache_size, pos


@numba.njit(cache=True)
def _encode_one(starts, freqs, lo_i, hi_i, out, base):
    low = np.int64(0)
    rng = np.int64(MASK)
    cache = np.int64(0)
    cache_size = np.int64(1)
    pos = base
    for i in range(lo_i, hi_i):
        r = rng >> PRECISION
        low += r * starts[i]
        rng = r * freqs[i]
        while rng < TOP:
            rng <<= 8
            low, cache, cache_size, pos = _shift_low(low, cache, cache_size, out, pos)
    for _ in range(FLUSH_BYTES):
        low, cache, cache_size, pos = _shift_low(low, cache, cache_size, out, pos)
    return pos - base


@numba.njit(cache=True, parallel=True)
def _encode_windows(starts, freqs, offsets, out, out_offsets, lengths):
    for w in prange(len(offsets) - 1):
        if offsets[w] == offsets[w + 1]:
            lengths[w] = 0
            continue
        lengths[w] = _encode_one(starts, freqs, offsets[w], offsets[w + 1], out, out_offsets[w])


@numba.njit(cache=True)
def _init_state(data, begin, end, code, rng, pos, w):
    if end - begin < FLUSH_BYTES:
        return ERR_EOF
    if data[begin] != 0:
        return ERR_HEAD
    c = np.int64(0)
    for k in range(1, FLUSH_BYTES):
        c = (c << 8) | data[begin + k]
    code[w] = c
    rng[w] = MASK
    pos[w] = begin + FLUSH_BYTES
    return OK


@numba.njit(cache=True)
def _decode_rows(data, end, cum, lo, row_begin, row_end, code, rng, pos, w, out):
    c = code[w]
    r_ = rng[w]
    p = pos[w]
    S = cum.shape[1] - 1
    for i in range(row_begin, row_end):
        r = r_ >> PRECISION
        v = c // r
        if v >= (1 << PRECISION):
            return ERR_RANGE
        # largest k with cum[i, k] <= v
        a = 0
        b = S
        while b - a > 1:
            m = (a + b) >> 1
            if cum[i, m] <= v:
                a = m
            else:
                b = m
        start = cum[i, a]
        freq = cum[i, a + 1] - start
        if freq <= 0:
            return ERR_RANGE
        c -= r * start
        r_ = r * freq
        while r_ < TOP:
            if p >= end:
                return ERR_EOF
            c = ((c << 8) | data[p]) & MASK
            r_ <<= 8
            p += 1
        out[i] = lo[i] + a
    code[w] = c
    rng[w] = r_
    pos[w] = p
    return OK


@numba.njit(cache=True, parallel=True)
def _decode_phase(data, ends, cum, lo, row_offsets, windows, code, rng, pos, out, status):
    for t in prange(len(windows)):
        w = windows[t]
        status[t] = _decode_rows(
            data, ends[w], cum, lo, row_offsets[t], row_offsets[t + 1], code, rng, pos, w, out
        )


# ----------------------------------------------------------- interfaces


def encode_windows(starts, freqs, window_ids, n_windows: int) -> list[bytes]:
    """One chunk per window; symbols of a window are coded in their given order.

    ``window_ids`` tags each (start, freq) pair; the relative order of a
    window's own pairs is preserved.
    """
    starts = np.asarray(starts, dtype=np.int64)
    freqs = np.asarray(freqs, dtype=np.int64)
    window_ids = np.asarray(window_ids, dtype=np.int64)
    order = np.argsort(window_ids, kind="stable")
    counts = np.bincount(window_ids, minlength=n_windows)
    offsets = np.zeros(n_windows + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    capacity = 2 * counts + 16
    out_offsets = np.zeros(n_windows + 1, dtype=np.int64)
    np.cumsum(capacity, out=out_offsets[1:])
    out = np.zeros(int(out_offsets[-1]), dtype=np.uint8)
    lengths = np.zeros(n_windows, dtype=np.int64)
    _encode_windows(starts[order], freqs[order], offsets, out, out_offsets, lengths)
    return [out[out_offsets[w] : out_offsets[w] + lengths[w]].tobytes() for w in range(n_windows)]


class WindowDecoder:
    """Range decoders for a set of chunks, advanced phase by phase."""

    def __init__(self, chunks: list[bytes]):
        lens = np.array([len(c) for c in chunks], dtype=np.int64)
        self.begins = np.zeros(len(chunks), dtype=np.int64)
        if len(chunks) > 1:
            np.cumsum(lens[:-1], out=self.begins[1:])
        self.ends = self.begins + lens
        self.data = np.frombuffer(b"".join(chunks), dtype=np.uint8) if chunks else np.zeros(0, np.uint8)
        n = len(chunks)
        self.code = np.zeros(n, dtype=np.int64)
        self.rng = np.zeros(n, dtype=np.int64)
        self.pos = np.zeros(n, dtype=np.int64)
        self.started = np.zeros(n, dtype=bool)

    def _start(self, w):
        status = _init_state(self.data, self.begins[w], self.ends[w], self.code, self.rng, self.pos, w)
        if status != OK:
            raise CorruptStreamError(f"window {w}: {_MESSAGES[status]}")
        self.started[w] = True

    def decode(self, table: CdfTable, window_ids) -> np.ndarray:
        """Decode one symbol per table row; rows must be grouped by window."""
        window_ids = np.asarray(window_ids, dtype=np.int64)
        n = len(window_ids)
        out = np.zeros(n, dtype=np.int64)
        if n == 0:
            return out
        change = np.flatnonzero(np.diff(window_ids)) + 1
        row_offsets = np.concatenate([[0], change, [n]]).astype(np.int64)
        windows = window_ids[row_offsets[:-1]]
        if len(np.unique(windows)) != len(windows):
            raise ValueError("rows must be grouped by window")
        for w in windows[~self.started[windows]]:
            self._start(int(w))
        status = np.zeros(len(windows), dtype=np.int64)
        _decode_phase(
            self.data, self.ends, np.ascontiguousarray(table.cum), table.lo, row_offsets,
            windows, self.code, self.rng, self.pos, out, status,
        )
        bad = np.flatnonzero(status)
        if len(bad):
            t = int(bad[0])
            raise CorruptStreamError(f"window {int(windows[t])}: {_MESSAGES[int(status[t])]}")
        return out

    def finish(self):
        """Every started chunk must be consumed exactly."""
        for w in np.flatnonzero(self.started):
            if self.pos[w] != self.ends[w]:
                raise CorruptStreamError(f"window {int(w)}: {int(self.ends[w] - self.pos[w])} unread bytes")


def encode_sequence(symbols, table: CdfTable, rows=None) -> EncodedChunk:
    """Code ``symbols[i]`` under table row ``rows[i]`` (default: row i)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return EncodedChunk(encode_windows([], [], [], 1)[0], 0, 0.0)
    start, freq = table.start_freq(symbols, rows)
    data = encode_windows(start, freq, np.zeros(len(symbols), dtype=np.int64), 1)[0]
    return EncodedChunk(data, len(symbols), rate_bits(symbols, table, rows))


def decode_sequence(chunk: EncodedChunk | bytes, table: CdfTable, n: int, rows=None) -> np.ndarray:
    data = chunk.data if isinstance(chunk, EncodedChunk) else bytes(chunk)
    dec = WindowDecoder([data])
    if n == 0:
        if data:
            raise CorruptStreamError(f"{len(data)} bytes in a chunk declared empty")
        return np.zeros(0, dtype=np.int64)
    if rows is not None:
        table = table.rows(np.asarray(rows))
    if len(table) != n:
        raise ValueError(f"need {n} table rows, got {len(table)}")
    out = dec.decode(table, np.zeros(n, dtype=np.int64))
    dec.finish()
    return out


# --------------------------------------------------------------- varints


@numba.njit(cache=True)
def _varint_encode(deltas, out):
    p = 0
    for v in deltas:
        while v >= 0x80:
            out[p] = (v & 0x7F) | 0x80
            v >>= 7
            p += 1
        out[p] = v
        p += 1
    return p


@numba.njit(cache=True)
def _varint_decode(data, n, out):
    p = 0
    acc = np.uint64(0)
    for i in range(n):
        v = np.uint64(0)
        shift = 0
        while True:
            if p >= len(data):
                return -1
            b = np.uint64(data[p])
            p += 1
            if shift > 56:
                return -2
            v |= (b & np.uint64(0x7F)) << np.uint64(shift)
            shift += 7
            if b < 0x80:
                break
        acc += v
        out[i] = acc
    return p


def varint_encode_deltas(values) -> bytes:
    """Base-128 varints of successive differences of a non-decreasing sequence."""
    values = np.asarray(values)
    if values.size == 0:
        return b""
    if values.dtype.kind == "i" and (values < 0).any():
        raise ValueError("values must be unsigned")
    values = values.astype(np.uint64)
    if int(values.max()) >= 1 << 63:
        raise OverflowError("value exceeds 63 bits")
    deltas = np.diff(values, prepend=np.uint64(0))
    if (values[1:] < values[:-1]).any():
        raise ValueError("values must be non-decreasing")
    out = np.zeros(len(values) * 9, dtype=np.uint8)
    return out[: _varint_encode(deltas, out)].tobytes()


def varint_decode_deltas(data: bytes, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.uint64)
    p = _varint_decode(np.frombuffer(data, dtype=np.uint8), n, out)
    if p == -1:
        raise CorruptStreamError("varint stream truncated")
    if p == -2 or (n and int(out[-1]) >= 1 << 63):
        raise OverflowError("varint exceeds 63 bits")
    if p != len(data):
        raise CorruptStreamError(f"{len(data) - p} trailing bytes after varint stream")
    return out
