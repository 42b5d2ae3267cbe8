"""Space-channel autoregressive entropy model.

A :class:`SectionModel` codes one (tokens x channels) symbol array that has been
split into context windows.  Per window it codes a per-token hyper latent
under a factorized density, derives a latent prior from it, and then walks the
channel subgroups in order; within each subgroup the anchor half of the tokens
is coded first and the other half conditions on it through masked attention.

Training, encoding and decoding call the same per-phase functions; during
coding, values enter the networks only after they have been revealed, so the
encoder and decoder see bit-identical activations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .coder import WindowDecoder, encode_windows
from .nn import DGCNN, MLP, Block, Linear
from .probability import (
    LIKELIHOOD_MIN,
    SIGMA_MIN,
    CdfTable,
    FactorizedDensity,
    GaussianParams,
    LogisticMixtureParams,
    build_cdf_table,
    discretized_gaussian_pmf,
    factorized_grid,
    gaussian_table,
    logistic_mixture_pmf,
    mixture_table,
)
from .serialization import ANCHOR, NONANCHOR, ContextWindow, channel_split, partition_windows

MIXTURE = "mixture"
GAUSSIAN = "gaussian"
# upper bound on tokens evaluated together; encoder and decoder batch identically
BATCH_TOKENS = 16384
LOG_SCALE_OFFSET = -2.0


# ------------------------------------------------------------- supports


@dataclass
class Support:
    """Closed per-channel symbol range ``lo .. hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.int64)
        self.hi = np.asarray(self.hi, dtype=np.int64)
        if np.any(self.hi < self.lo):
            raise ValueError("support with hi < lo")

    @classmethod
    def of(cls, symbols, channels: int) -> "Support":
        symbols = np.asarray(symbols).reshape(-1, channels)
        if len(symbols) == 0:
            return cls(np.zeros(channels, np.int64), np.zeros(channels, np.int64))
        return cls(symbols.min(axis=0), symbols.max(axis=0))

    @property
    def sizes(self) -> np.ndarray:
        return self.hi - self.lo + 1

    def check(self, what: str = "section"):
        big = np.flatnonzero(self.sizes > 1 << 16)
        if len(big):
            c = int(big[0])
            raise ValueError(f"{what}: support of {int(self.sizes[c])} symbols in channel {c} exceeds 16-bit tables")

    def normalizer(self, bins) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel (center, spread) in value units, known to both coder sides."""
        bins = np.asarray(bins, dtype=np.float64)
        center = (self.lo + self.hi) / 2.0 * bins
        spread = np.maximum((self.hi - self.lo) / 2.0, 1.0) * bins
        return torch.tensor(center, dtype=torch.float32), torch.tensor(spread, dtype=torch.float32)


# ----------------------------------------------------------- token input


@dataclass
class SectionInputs:
    """Per-token arrays of one section, in serialized order."""

    cells: np.ndarray  # (M, 3) quantized positions
    coded: np.ndarray  # (M,) bool; False marks known context tokens
    values: np.ndarray | None = None  # (M, C) values at coded (encode) and known tokens
    symbols: np.ndarray | None = None  # (M, C) integer symbols at coded tokens (encode)
    analysis_extra: np.ndarray | None = None
    synthesis_extra: np.ndarray | None = None

    def __len__(self):
        return len(self.coded)


@dataclass
class WindowBatch:
    window_ids: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, n) section token indices
    pos: torch.Tensor  # (B, n, 3) per-window normalized positions
    coded: torch.Tensor  # (B, n)
    anchor: torch.Tensor  # coded tokens of even rank among the window's coded tokens
    nonanchor: torch.Tensor
    known: torch.Tensor  # context-only tokens

    @property
    def context(self) -> torch.Tensor:
        return self.anchor | self.known


def window_batches(n_tokens: int, length: int, max_tokens: int = BATCH_TOKENS):
    """Group consecutive windows into batches of equal length.

    Yields (first window index, windows).  Only the last window can be short,
    so it always forms its own batch.
    """
    if n_tokens == 0:
        return []
    windows = partition_windows(n_tokens, length)
    per = max(1, max_tokens // length)
    out = []
    full = [w for w in windows if w.len == length]
    for i in range(0, len(full), per):
        out.append((i, full[i : i + per]))
    if windows[-1].len != length:
        out.append((len(windows) - 1, [windows[-1]]))
    return out


def normalize_positions(cells: np.ndarray) -> np.ndarray:
    """Map each window's cells into [0, 1] by its own min corner and largest extent."""
    c = cells.astype(np.float64)
    lo = c.min(axis=-2, keepdims=True)
    span = np.maximum((c.max(axis=-2, keepdims=True) - lo).max(axis=-1, keepdims=True), 1.0)
    return ((c - lo) / span).astype(np.float32)


def make_batch(inputs: SectionInputs, first: int, windows: list[ContextWindow]) -> WindowBatch:
    tokens = np.stack([np.arange(w.start, w.stop) for w in windows])
    coded = torch.from_numpy(inputs.coded[tokens].astype(bool))
    rank = torch.cumsum(coded.long(), dim=1) - 1
    anchor = coded & (rank % 2 == 0)
    return WindowBatch(
        window_ids=np.arange(first, first + len(windows)),
        tokens=tokens,
        pos=torch.from_numpy(normalize_positions(inputs.cells[tokens])),
        coded=coded,
        anchor=anchor,
        nonanchor=coded & ~anchor,
        known=~coded,
    )


# -------------------------------------------------------------- networks


class SectionModel(nn.Module):
    """Hyper path plus space-channel context for one symbol section."""

    def __init__(self, cfg, channels: int, groups, hyper_dim: int, head: str = MIXTURE,
                 analysis_extra: int = 0, synthesis_extra: int = 0):
        super().__init__()
        if head not in (MIXTURE, GAUSSIAN):
            raise ValueError(f"unknown head {head!r}")
        D = cfg.width
        self.cfg = cfg
        self.channels = channels
        self.groups = channel_split(channels, groups)
        self.hyper_dim = hyper_dim
        self.head = head
        self.n_params = 3 * cfg.n_mix if head == MIXTURE else 2
        attention = cfg.backbone == "attention"
        pe_dim = D if attention else None

        def block():
            return Block(D, cfg.heads, cfg.layers, cfg.ffn_mult, pe_dim=pe_dim, backbone=cfg.backbone)

        self.dgcnn = DGCNN(cfg.dgcnn_width, D, cfg.knn) if attention else None
        self.analysis_in = MLP(channels + analysis_extra, D, D)
        self.analysis_block = block()
        self.analysis_out = MLP(D, D, hyper_dim)
        self.density = FactorizedDensity(hyper_dim)
        self.synthesis_in = MLP(hyper_dim + synthesis_extra, D, D)
        self.synthesis_block = block()
        self.synthesis_out = MLP(D, D, D)
        self.null_context = nn.Parameter(0.02 * torch.randn(len(self.groups), D))
        self.channel_embed = nn.ModuleList(Linear(a, D) for a, _ in self.groups[1:])
        self.channel_block = block()
        self.anchor_embed = nn.ModuleList(Linear(2 * D + b - a, D) for a, b in self.groups)
        self.nonanchor_embed = nn.ModuleList(Linear(2 * D, D) for _ in self.groups)
        self.space_block = block()
        self.heads = nn.ModuleList(MLP(3 * D, D, (b - a) * self.n_params) for a, b in self.groups)

    # -- features

    def positional(self, pos):
        return self.dgcnn(pos) if self.dgcnn is not None else None

    def hyper_analysis(self, values, extra, pe):
        x = values if extra is None else torch.cat([values, extra], dim=-1)
        return self.analysis_out(self.analysis_block(self.analysis_in(x), pe))

    def latent_prior(self, latent, extra, pe):
        x = latent if extra is None else torch.cat([latent, extra], dim=-1)
        return self.synthesis_out(self.synthesis_block(self.synthesis_in(x), pe))

    def channel_context(self, j: int, values, pe):
        B, n, _ = values.shape
        if j == 0 or not self.cfg.channel_context:
            return self.null_context[j].expand(B, n, -1)
        prefix = values[..., : self.groups[j][0]]
        return self.channel_block(self.channel_embed[j - 1](prefix), pe)

    def space_context(self, j: int, values, psi, phi_ch, context, pe):
        """Features for non-anchor queries; only context tokens expose group-j values."""
        a, b = self.groups[j]
        base = torch.cat([psi, phi_ch], dim=-1)
        shown = values[..., a:b] * context.unsqueeze(-1).to(values.dtype)
        h = torch.where(
            context.unsqueeze(-1),
            self.anchor_embed[j](torch.cat([base, shown], dim=-1)),
            self.nonanchor_embed[j](base),
        )
        n = values.shape[1]
        allowed = context.unsqueeze(1) | torch.eye(n, dtype=torch.bool)
        return self.space_block(h, pe, allowed)

    def entropy_params(self, j: int, psi, phi_ch, phi_sp):
        raw = self.heads[j](torch.cat([psi, phi_ch, phi_sp], dim=-1))
        a, b = self.groups[j]
        return raw.view(*raw.shape[:-1], b - a, self.n_params)

    def distribution(self, j: int, raw, center, spread):
        a, b = self.groups[j]
        c, s = center[a:b], spread[a:b]
        if self.head == MIXTURE:
            K = self.cfg.n_mix
            logits, mu, log_s = raw.split(K, dim=-1)
            return LogisticMixtureParams(
                torch.softmax(logits, dim=-1),
                c.unsqueeze(-1) + s.unsqueeze(-1) * mu,
                torch.log(s).unsqueeze(-1) + log_s + LOG_SCALE_OFFSET,
            )
        mu, log_s = raw.unbind(-1)
        scale = (s * torch.exp((log_s + LOG_SCALE_OFFSET).clamp(max=10.0))).clamp_min(SIGMA_MIN)
        return GaussianParams(c + s * mu, scale)

    def phase_params(self, j: int, phase: int, state: "PhaseState"):
        phi_ch = state.channel(self, j)
        if phase == ANCHOR or not self.cfg.space_context:
            phi_sp = torch.zeros_like(phi_ch)
        else:
            phi_sp = self.space_context(j, state.values, state.psi, phi_ch, state.batch.context, state.pe)
        raw = self.entropy_params(j, state.psi, phi_ch, phi_sp)
        return self.distribution(j, raw, state.center, state.spread)


@dataclass
class PhaseState:
    batch: WindowBatch
    pe: torch.Tensor | None
    psi: torch.Tensor
    values: torch.Tensor  # normalized, zero where unrevealed
    center: torch.Tensor
    spread: torch.Tensor
    _channel: dict = field(default_factory=dict)

    def channel(self, model: SectionModel, j: int):
        if j not in self._channel:
            self._channel[j] = model.channel_context(j, self.values, self.pe)
        return self._channel[j]


def _select(params, mask):
    if isinstance(params, LogisticMixtureParams):
        return LogisticMixtureParams(params.weights[mask], params.means[mask], params.log_scales[mask])
    return GaussianParams(params.mean[mask], params.scale[mask])


def _flatten(params):
    if isinstance(params, LogisticMixtureParams):
        K = params.weights.shape[-1]
        return LogisticMixtureParams(*(t.reshape(-1, K) for t in (params.weights, params.means, params.log_scales)))
    return GaussianParams(params.mean.reshape(-1), params.scale.reshape(-1))


def _pmf(params, x, bins, lo=None, hi=None):
    if isinstance(params, LogisticMixtureParams):
        return logistic_mixture_pmf(x, params, bins, lo, hi)
    return discretized_gaussian_pmf(x, params.mean, params.scale, bins, lo, hi)


def _select_params(mask, p_anchor, p_other):
    m = mask.unsqueeze(-1)
    if isinstance(p_anchor, LogisticMixtureParams):
        m = m.unsqueeze(-1)
        return LogisticMixtureParams(*(torch.where(m, a, b) for a, b in zip(
            (p_anchor.weights, p_anchor.means, p_anchor.log_scales),
            (p_other.weights, p_other.means, p_other.log_scales))))
    return GaussianParams(torch.where(m, p_anchor.mean, p_other.mean), torch.where(m, p_anchor.scale, p_other.scale))


# ------------------------------------------------------- phase schedule


def phases(model: SectionModel):
    return [(j, ph) for j in range(len(model.groups)) for ph in (ANCHOR, NONANCHOR)]


def _gather(arr, tokens):
    return None if arr is None else torch.from_numpy(np.ascontiguousarray(arr[tokens], dtype=np.float32))


@dataclass
class CodingTables:
    """Everything about a section both coder sides agree on before coding starts."""

    bins: np.ndarray  # (C,)
    support: Support
    hyper_support: Support

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        self.center, self.spread = self.support.normalizer(self.bins)

    def hyper_table(self, model: SectionModel) -> CdfTable:
        hs = self.hyper_support
        return build_cdf_table(factorized_grid(model.density, hs.lo, hs.sizes), hs.lo, hs.sizes)

    def normalize(self, values, a: int = 0, b: int | None = None):
        """Value units -> network units for channels ``a:b``."""
        return (torch.as_tensor(values, dtype=torch.float32) - self.center[a:b]) / self.spread[a:b]


class _Side:
    """Symbol exchange between the phase walker and an encoder or decoder."""

    def __init__(self, trace=None, keep: bool = False):
        self.trace = trace
        self.tables = [] if keep else None

    def record(self, label, table: CdfTable, window_ids):
        if self.tables is not None:
            self.tables.append((label, table))
        if self.trace is not None:
            h = hashlib.sha1(table.cum.tobytes())
            h.update(np.asarray(window_ids, dtype=np.int64).tobytes())
            self.trace.append((label, h.hexdigest()))


class EncodeSide(_Side):
    def __init__(self, trace=None, keep: bool = False):
        super().__init__(trace, keep)
        self.streams = {"hyper": ([], [], []), "symbols": ([], [], [])}

    def exchange(self, stream, table, window_ids, true):
        start, freq = table.start_freq(true)
        for lst, arr in zip(self.streams[stream], (start, freq, window_ids)):
            lst.append(np.asarray(arr, dtype=np.int64))
        return true

    def chunks(self, stream, n_windows) -> list[bytes]:
        starts, freqs, wids = self.streams[stream]
        if not starts:
            return [b""] * n_windows
        return encode_windows(np.concatenate(starts), np.concatenate(freqs), np.concatenate(wids), n_windows)


class DecodeSide(_Side):
    def __init__(self, hyper_chunks, symbol_chunks, trace=None, keep: bool = False):
        super().__init__(trace, keep)
        self.decoders = {"hyper": WindowDecoder(hyper_chunks), "symbols": WindowDecoder(symbol_chunks)}

    def exchange(self, stream, table, window_ids, true=None):
        return self.decoders[stream].decode(table, window_ids)

    def finish(self):
        for d in self.decoders.values():
            d.finish()


@torch.no_grad()
def hyper_encode(model: SectionModel, inputs: SectionInputs, batch: WindowBatch, normalizer, pe=None):
    """Quantized hyper latent at coded tokens (zeros elsewhere), shape (B, n, hyper_dim)."""
    center, spread = normalizer
    if pe is None:
        pe = model.positional(batch.pos)
    values = (_gather(inputs.values, batch.tokens) - center) / spread
    values = values * (batch.coded | batch.known).unsqueeze(-1)
    u = torch.round(model.hyper_analysis(values, _gather(inputs.analysis_extra, batch.tokens), pe))
    return u * batch.coded.unsqueeze(-1)


@torch.no_grad()
def code_batch(model: SectionModel, inputs: SectionInputs, batch: WindowBatch, tables: CodingTables,
               side: _Side, hyper_table: CdfTable, latent=None, pe=None):
    """Walk one batch of windows through the coding schedule.

    ``latent`` is the encoder's quantized hyper latent; the decoder passes
    None and receives it from the stream.  Returns decoded symbols (B, n, C)
    (zeros at known tokens) and the hyper latent.
    """
    B, n = batch.coded.shape
    C = model.channels
    if pe is None:
        pe = model.positional(batch.pos)
    # hyper latent: one row per (coded token, channel), tokens in window order
    sel = batch.coded.numpy()
    b_idx, t_idx = np.nonzero(sel)
    H = model.hyper_dim
    rows = np.tile(np.arange(H), len(b_idx))
    wids = np.repeat(batch.window_ids[b_idx], H)
    table = hyper_table.rows(rows)
    side.record(("hyper",), table, wids)
    true = None if latent is None else latent.numpy()[b_idx, t_idx].reshape(-1).astype(np.int64)
    got = side.exchange("hyper", table, wids, true)
    u = torch.zeros(B, n, H)
    u[b_idx, t_idx] = torch.from_numpy(np.asarray(got, dtype=np.float32).reshape(-1, H))
    psi = model.latent_prior(u, _gather(inputs.synthesis_extra, batch.tokens), pe)

    values = torch.zeros(B, n, C)
    if inputs.values is not None and bool(batch.known.any()):
        known_vals = tables.normalize(_gather(inputs.values, batch.tokens))
        values = torch.where(batch.known.unsqueeze(-1), known_vals, values)
    symbols = np.zeros((B, n, C), dtype=np.int64)
    state = PhaseState(batch, pe, psi, values, tables.center, tables.spread)
    lo, sizes, bins = tables.support.lo, tables.support.sizes, tables.bins
    for j, phase in phases(model):
        mask = batch.anchor if phase == ANCHOR else batch.nonanchor
        if not bool(mask.any()):
            continue
        a, b = model.groups[j]
        params = _flatten(_select(model.phase_params(j, phase, state), mask))
        ch = np.tile(np.arange(a, b), int(mask.sum()))
        mb, mt = np.nonzero(mask.numpy())
        wids = np.repeat(batch.window_ids[mb], b - a)
        if model.head == MIXTURE:
            table = mixture_table(params, lo[ch], sizes[ch], bins[ch])
        else:
            table = gaussian_table(params, lo[ch], sizes[ch], bins[ch])
        side.record((j, phase), table, wids)
        true = None if inputs.symbols is None else inputs.symbols[batch.tokens[mb, mt], a:b].reshape(-1)
        got = np.asarray(side.exchange("symbols", table, wids, true), dtype=np.int64).reshape(-1, b - a)
        symbols[mb, mt, a:b] = got
        revealed = tables.normalize(got * bins[a:b], a, b)
        state.values[mb, mt, a:b] = revealed
    return symbols, u


def predict_window(model: SectionModel, inputs: SectionInputs, tables: CodingTables, length: int,
                   window: int = 0, mode: str = "encode", trace=None):
    """Ordered list of (stream, phase label, table) for one window.

    ``mode='encode'`` records the tables the encoder codes against.
    ``mode='decode'`` first encodes the window, then decodes its bytes and
    records the tables the decoder computed before each phase's symbols were
    read back.
    """
    if mode not in ("encode", "decode"):
        raise ValueError(f"mode must be 'encode' or 'decode', not {mode!r}")
    first, wins = window_batches(len(inputs), length, max_tokens=length)[window]
    batch = make_batch(inputs, first, wins)
    with torch.no_grad():
        pe = model.positional(batch.pos)
        latent = hyper_encode(model, inputs, batch, (tables.center, tables.spread), pe)
    hyper_table = tables.hyper_table(model)
    enc = EncodeSide(trace if mode == "encode" else None, keep=True)
    code_batch(model, inputs, batch, tables, enc, hyper_table, latent, pe)
    if mode == "encode":
        return enc.tables
    n_windows = int(batch.window_ids.max()) + 1
    dec = DecodeSide(enc.chunks("hyper", n_windows), enc.chunks("symbols", n_windows), trace, keep=True)
    blind = SectionInputs(inputs.cells, inputs.coded, _known_only(inputs), None, None, inputs.synthesis_extra)
    code_batch(model, blind, batch, tables, dec, hyper_table, None, pe)
    dec.finish()
    return dec.tables


def _known_only(inputs: SectionInputs):
    if inputs.values is None:
        return None
    v = np.array(inputs.values, dtype=np.float32, copy=True)
    v[inputs.coded] = 0.0
    return v


# ------------------------------------------------------------- training


def uniform_noise(shape, gen: torch.Generator | None, dtype=torch.float32):
    if gen is None:
        return torch.zeros(shape, dtype=dtype)
    return torch.rand(shape, generator=gen, dtype=dtype) - 0.5


def section_rate(model: SectionModel, batch: WindowBatch, values, targets, bins, center, spread,
                 lo=None, hi=None, analysis_extra=None, synthesis_extra=None, gen=None, pe=None):
    """Per-token (symbol bits, hyper bits), each (B, n), zero at known tokens.

    ``values`` (B, n, C) feed the context networks in value units; ``targets``
    are the points whose likelihood is measured, in symbol units.  The hyper
    latent is relaxed with additive uniform noise drawn from ``gen``.
    """
    dtype = values.dtype
    coded = batch.coded.to(dtype)
    if pe is None:
        pe = model.positional(batch.pos.to(dtype))
    norm = (values - center) / spread
    h = model.hyper_analysis(norm, analysis_extra, pe)
    u = (h + uniform_noise(h.shape, gen, dtype)) * coded.unsqueeze(-1)
    hyper_bits = -torch.log2(model.density.likelihood(u)).sum(-1) * coded
    psi = model.latent_prior(u, synthesis_extra, pe)
    state = PhaseState(batch, pe, psi, norm, center, spread)
    bits = torch.zeros(values.shape[:2], dtype=dtype)
    for j in range(len(model.groups)):
        a, b = model.groups[j]
        p_anchor = model.phase_params(j, ANCHOR, state)
        p_other = model.phase_params(j, NONANCHOR, state)
        params = _select_params(batch.anchor, p_anchor, p_other)
        gl = None if lo is None else lo[a:b]
        gh = None if hi is None else hi[a:b]
        p = _pmf(params, targets[..., a:b], bins[a:b], gl, gh)
        bits = bits - torch.log2(p.clamp_min(LIKELIHOOD_MIN)).sum(-1)
    return bits * coded, hyper_bits
