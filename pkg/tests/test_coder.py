import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcmcodec.coder import (
    CorruptStreamError,
    WindowDecoder,
    decode_sequence,
    encode_sequence,
    encode_windows,
    varint_decode_deltas,
    varint_encode_deltas,
)
from lcmcodec.probability import TOTAL, build_cdf_table


def bigint_range_encode(starts, freqs) -> bytes:
    """Reference encoder: the low register is an unbounded integer, so carries
    resolve themselves and the output is just its leading bytes."""
    low, rng, shifts = 0, (1 << 48) - 1, 0
    for s, f in zip(map(int, starts), map(int, freqs)):
        r = rng >> 16
        low += r * s
        rng = r * f
        while rng < 1 << 40:
            rng <<= 8
            low <<= 8
            shifts += 1
    # the seven flush bytes expose the whole register; the first byte is the carry slot
    return low.to_bytes(shifts + 7, "big")


def random_table(rng, rows, S, alpha=0.5):
    return build_cdf_table(rng.dirichlet(np.full(S, alpha), size=rows))


def sample(rng, table, rows):
    pmf = table.counts[rows] / TOTAL
    return (rng.random(len(rows))[:, None] > np.cumsum(pmf, axis=1)).sum(1).clip(0, table.cum.shape[1] - 2)


# ------------------------------------------------------------- coder


def test_empty_sequence():
    chunk = encode_sequence([], build_cdf_table(np.ones((1, 2)) / 2))
    assert len(chunk) == 0
    assert decode_sequence(chunk, None, 0).size == 0
    with pytest.raises(CorruptStreamError):
        decode_sequence(b"\x00\x00", None, 0)


def test_single_symbol_is_flush_only():
    table = build_cdf_table(np.array([[0.5, 0.5]]))
    chunk = encode_sequence([1], table)
    assert len(chunk) == 7
    assert chunk.data == bigint_range_encode(*table.start_freq([1]))
    assert decode_sequence(chunk, table, 1).tolist() == [1]


@given(st.integers(1, 400), st.integers(2, 50), st.integers(0, 10_000))
def test_matches_bigint_reference_and_roundtrips(n, S, seed):
    rng = np.random.default_rng(seed)
    table = random_table(rng, 8, S, float(rng.choice([0.05, 1.0])))
    rows = rng.integers(0, 8, n)
    sym = sample(rng, table, rows)
    chunk = encode_sequence(sym, table, rows)
    assert chunk.data == bigint_range_encode(*table.start_freq(sym, rows))
    assert np.array_equal(decode_sequence(chunk, table, n, rows), sym)


def test_carry_propagation_through_ff_runs():
    # symbols at the very top of the range push low toward 0xFF.. runs
    table = build_cdf_table(np.array([[1e-6, 1 - 1e-6]]))
    sym = np.ones(5000, dtype=np.int64)
    sym[::997] = 0
    chunk = encode_sequence(sym, table, np.zeros(5000, dtype=np.int64))
    assert chunk.data == bigint_range_encode(*table.start_freq(sym, np.zeros(5000, dtype=np.int64)))
    assert np.array_equal(decode_sequence(chunk, table, 5000, np.zeros(5000, dtype=np.int64)), sym)


def test_lopsided_tables_roundtrip(rng):
    pmf = np.zeros((4, 300))
    pmf[:, 0] = 1.0
    table = build_cdf_table(pmf)
    sym = rng.integers(0, 300, 2000)
    rows = rng.integers(0, 4, 2000)
    assert np.array_equal(decode_sequence(encode_sequence(sym, table, rows), table, 2000, rows), sym)


@pytest.mark.parametrize("n", [10, 1000, 100_000])
def test_length_bound(rng, n):
    table = random_table(rng, 32, 40)
    rows = rng.integers(0, 32, n)
    sym = sample(rng, table, rows)
    chunk = encode_sequence(sym, table, rows)
    ideal = sum(16 - math.log2(f) for f in table.start_freq(sym, rows)[1]) / 8
    assert chunk.target_bits / 8 == pytest.approx(ideal)
    assert len(chunk) <= math.ceil(ideal) + 32
    if n >= 100_000:
        assert len(chunk) < 1.01 * ideal


def test_near_certain_symbols_cost_almost_nothing():
    pmf = np.zeros((1, 4))
    pmf[0, 1] = 1.0
    table = build_cdf_table(pmf)
    n = 200_000
    rows = np.zeros(n, dtype=np.int64)
    chunk = encode_sequence(np.ones(n, dtype=np.int64), table, rows)
    assert len(chunk) <= math.ceil(chunk.target_bits / 8) + 8


def test_symbol_outside_support(rng):
    table = build_cdf_table(np.array([[0.5, 0.5, 0.0]]), sizes=[2])
    with pytest.raises(ValueError, match="outside table support"):
        encode_sequence([2], table, [0])


def test_truncated_chunk_detected(rng):
    table = random_table(rng, 1, 30)
    rows = np.zeros(500, dtype=np.int64)
    sym = sample(rng, table, rows)
    data = encode_sequence(sym, table, rows).data
    with pytest.raises(CorruptStreamError):
        decode_sequence(data[: len(data) // 2], table, 500, rows)


def test_bad_lead_byte():
    table = build_cdf_table(np.array([[0.5, 0.5]]))
    data = bytearray(encode_sequence([0, 1, 1], table, [0, 0, 0]).data)
    data[0] = 1
    with pytest.raises(CorruptStreamError, match="lead byte"):
        decode_sequence(bytes(data), table, 3, [0, 0, 0])


def test_trailing_bytes_detected():
    table = build_cdf_table(np.array([[0.5, 0.5]]))
    data = encode_sequence([0, 1, 1], table, [0, 0, 0]).data + b"\x00"
    with pytest.raises(CorruptStreamError, match="unread"):
        decode_sequence(data, table, 3, [0, 0, 0])


def test_windows_are_independent(rng):
    table = random_table(rng, 1, 12)
    ids = rng.integers(0, 5, 600)
    sym = sample(rng, table, np.zeros(600, dtype=np.int64))
    start, freq = table.start_freq(sym, np.zeros(600, dtype=np.int64))
    chunks = encode_windows(start, freq, ids, 6)
    assert chunks[5] == b""  # no symbols in window 5
    for w in range(5):
        sel = ids == w
        assert chunks[w] == bigint_range_encode(start[sel], freq[sel])
    dec = WindowDecoder(chunks)
    order = np.argsort(ids, kind="stable")
    out = dec.decode(table.rows(np.zeros(600, dtype=np.int64)), ids[order])
    dec.finish()
    assert np.array_equal(out, sym[order])


def test_decoder_requires_grouped_rows(rng):
    table = build_cdf_table(np.array([[0.5, 0.5]]))
    chunks = encode_windows(*table.start_freq([0, 1], [0, 0]), [0, 1], 2)
    with pytest.raises(ValueError, match="grouped"):
        WindowDecoder(chunks).decode(table.rows([0, 0, 0]), [0, 1, 0])


# ------------------------------------------------------------ varints


def test_varint_layout():
    assert varint_encode_deltas([0, 1, 128, 128 + 300]) == bytes([0, 1, 0x7F, 0xAC, 0x02])


@given(st.lists(st.integers(0, (1 << 63) - 1), max_size=50))
def test_varint_roundtrip(values):
    values = np.array(sorted(values), dtype=np.uint64)
    data = varint_encode_deltas(values)
    assert np.array_equal(varint_decode_deltas(data, len(values)), values)


def test_varint_errors():
    with pytest.raises(ValueError, match="non-decreasing"):
        varint_encode_deltas([3, 2])
    with pytest.raises(OverflowError):
        varint_encode_deltas(np.array([1 << 63], dtype=np.uint64))
    with pytest.raises(CorruptStreamError, match="truncated"):
        varint_decode_deltas(bytes([0x80]), 1)
    with pytest.raises(CorruptStreamError, match="trailing"):
        varint_decode_deltas(bytes([1, 2]), 1)
    with pytest.raises(OverflowError):
        varint_decode_deltas(bytes([0xFF] * 9 + [0x01]), 1)
