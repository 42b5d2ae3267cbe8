import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lcmcodec.context import (
    GAUSSIAN,
    MIXTURE,
    CodingTables,
    SectionInputs,
    SectionModel,
    Support,
    make_batch,
    normalize_positions,
    phases,
    predict_window,
    section_rate,
    window_batches,
)
from lcmcodec.networks import ModelConfig
from lcmcodec.pipeline import decode_section, encode_section
from lcmcodec.selftest import perturbation_violations, phase_tables
from lcmcodec.serialization import ANCHOR, NONANCHOR, serialize_order

TOY = ModelConfig(width=16, heads=2, dgcnn_width=16, knn=4)


def toy_section(seed=0, head=MIXTURE, **overrides):
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**TOY.to_dict(), **overrides})
    return SectionModel(cfg, 4, (2, 2), 4, head).eval()


def toy_inputs(rng, n, coded_frac=1.0):
    cells = rng.integers(0, 64, (n, 3))
    cells = cells[serialize_order(cells, 6).permutation]
    sym = rng.integers(-5, 6, (n, 4))
    coded = rng.random(n) < coded_frac
    coded[0] = True
    return SectionInputs(cells, coded, sym * 0.1, sym)


def toy_tables():
    return CodingTables(np.full(4, 0.1), Support(np.full(4, -6), np.full(4, 6)),
                        Support(np.full(4, -8), np.full(4, 8)))


# ------------------------------------------------------------ batching


@given(st.integers(0, 3000), st.integers(1, 600), st.integers(1, 4000))
def test_window_batches_cover_sequence(n, length, max_tokens):
    seen = []
    for first, wins in window_batches(n, length, max_tokens):
        assert len({w.len for w in wins}) == 1
        assert wins[0].start == first * length
        for w in wins:
            seen.extend(range(w.start, w.stop))
    assert seen == list(range(n))
    short = [w for _, ws in window_batches(n, length, max_tokens) for w in ws if w.len != length]
    assert len(short) <= 1


def test_anchor_alternates_over_coded_tokens(rng):
    inputs = toy_inputs(rng, 12, coded_frac=0.6)
    (first, wins), = window_batches(12, 12)
    b = make_batch(inputs, first, wins)
    coded_idx = np.flatnonzero(inputs.coded)
    assert b.anchor[0].numpy()[coded_idx].tolist() == [i % 2 == 0 for i in range(len(coded_idx))]
    assert torch.equal(b.anchor | b.nonanchor, b.coded)
    assert not bool((b.anchor & b.nonanchor).any())
    assert torch.equal(b.known, ~b.coded)


def test_normalize_positions(rng):
    cells = rng.integers(100, 200, (2, 50, 3))
    pos = normalize_positions(cells)
    assert pos.min() >= 0 and pos.max() <= 1
    for w in range(2):
        assert np.isclose(pos[w].max(axis=0).max(), 1.0)
        assert np.all(np.isclose(pos[w].min(axis=0), 0.0))
    assert np.all(normalize_positions(np.full((1, 3, 3), 7)) == 0)


def test_support_helpers():
    s = Support.of(np.array([[0, -3], [4, 2]]), 2)
    assert s.lo.tolist() == [0, -3] and s.sizes.tolist() == [5, 6]
    center, spread = s.normalizer([0.5, 1.0])
    assert center.tolist() == [1.0, -0.5] and spread.tolist() == [1.0, 2.5]
    with pytest.raises(ValueError, match="16-bit"):
        Support([0], [1 << 16]).check()
    with pytest.raises(ValueError):
        Support([1], [0])


def test_phase_order():
    m = toy_section()
    assert phases(m) == [(0, ANCHOR), (0, NONANCHOR), (1, ANCHOR), (1, NONANCHOR)]


# ----------------------------------------------------------- causality


@settings(max_examples=30)
@given(st.integers(1, 24), st.floats(0.3, 1.0), st.integers(0, 10_000), st.sampled_from([MIXTURE, GAUSSIAN]))
def test_encoder_and_decoder_tables_identical(n, frac, seed, head):
    rng = np.random.default_rng(seed)
    model = toy_section(seed % 3, head)
    inputs = toy_inputs(rng, n, frac)
    enc, dec = [], []
    predict_window(model, inputs, toy_tables(), 24, mode="encode", trace=enc)
    predict_window(model, inputs, toy_tables(), 24, mode="decode", trace=dec)
    assert enc == dec
    assert [label for label, _ in enc][0] == ("hyper",)


def test_predict_window_mode_checked(rng):
    with pytest.raises(ValueError, match="mode"):
        predict_window(toy_section(), toy_inputs(rng, 4), toy_tables(), 4, mode="sideways")


def test_single_symbol_perturbation_only_moves_later_phases(rng):
    assert perturbation_violations(toy_section(1), rng, trials=3) == 0


def _changed_labels(model, rng, token, group):
    inputs = toy_inputs(rng, 8)
    tables = toy_tables()
    latent = torch.zeros(1, 8, 4)
    base = phase_tables(model, inputs, tables, latent)
    sym = inputs.symbols.copy()
    a, b = model.groups[group]
    sym[token, a:b] += 1
    got = phase_tables(model, SectionInputs(inputs.cells, inputs.coded, sym * 0.1, sym), tables, latent)
    return {label for label in base if not np.array_equal(base[label], got[label])}


def test_full_context_reaches_nonanchors_and_later_groups(rng):
    changed = _changed_labels(toy_section(2), rng, token=0, group=0)
    assert (0, NONANCHOR) in changed and (1, ANCHOR) in changed


def test_no_space_context_ignores_anchor_values(rng):
    changed = _changed_labels(toy_section(2, space_context=False), rng, token=0, group=0)
    assert (0, NONANCHOR) not in changed
    assert (1, ANCHOR) in changed


def test_no_channel_context_ignores_earlier_groups(rng):
    changed = _changed_labels(toy_section(2, channel_context=False), rng, token=0, group=0)
    assert (1, ANCHOR) not in changed and (1, NONANCHOR) not in changed
    assert (0, NONANCHOR) in changed


# ------------------------------------------------------------ sections


@pytest.mark.parametrize("head", [MIXTURE, GAUSSIAN])
@pytest.mark.parametrize("n,length,frac", [(1, 16, 1.0), (50, 16, 1.0), (70, 32, 0.5), (33, 1024, 0.8)])
def test_section_roundtrip(rng, head, n, length, frac):
    model = toy_section(3, head)
    inputs = toy_inputs(rng, n, frac)
    bins = np.full(4, 0.1)
    res = encode_section(model, inputs, bins, length)
    assert len(res.symbol_chunks) == -(-n // length)
    # the decoder only knows values at context-only tokens
    known = np.where(inputs.coded[:, None], 0.0, inputs.values)
    blind = SectionInputs(inputs.cells, inputs.coded, known)
    out = decode_section(model, blind, bins, length, res.support, res.hyper_support,
                         res.hyper_chunks, res.symbol_chunks)
    assert np.array_equal(out[inputs.coded], inputs.symbols[inputs.coded])
    coded_bytes = sum(map(len, res.symbol_chunks))
    assert coded_bytes <= np.ceil(res.rate_bits[1] / 8) + 32 * len(res.symbol_chunks)


def test_section_rate_masks_known_tokens_and_has_gradients(rng):
    model = toy_section(4).train()
    inputs = toy_inputs(rng, 16, 0.6)
    (first, wins), = window_batches(16, 16)
    b = make_batch(inputs, first, wins)
    tables = toy_tables()
    values = torch.tensor(inputs.values[b.tokens], dtype=torch.float32)
    targets = torch.tensor(inputs.symbols[b.tokens], dtype=torch.float32)
    bits, hyper = section_rate(model, b, values, targets, torch.tensor(tables.bins, dtype=torch.float32),
                               tables.center, tables.spread, gen=torch.Generator().manual_seed(0))
    assert torch.all(bits[b.known] == 0) and torch.all(hyper[b.known] == 0)
    assert torch.all(bits[b.coded] > 0)
    (bits.sum() + hyper.sum()).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not torch.isfinite(p.grad).all()]
    assert dead == []
