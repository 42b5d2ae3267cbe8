"""Hybrid codec: lossless geometry, division, lossy and lossless colors, container.

The cloud is canonicalized to Morton order of its quantized positions; every
section is coded along that order, so the decoder reproduces the same
sequence without an explicit permutation.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field

import numba
import numpy as np
import torch

from .coder import CorruptStreamError, varint_decode_deltas, varint_encode_deltas
from .context import (
    CodingTables,
    DecodeSide,
    EncodeSide,
    SectionInputs,
    SectionModel,
    Support,
    code_batch,
    hyper_encode,
    make_batch,
    window_batches,
)
from .gaussian import (
    GEOM_DIM,
    SH_DIM,
    GaussianCloud,
    QuantizationSpec,
    default_color_steps,
    default_geometry_steps,
    dequantize_attributes,
    dequantize_positions,
    quantize_attributes,
    quantize_positions,
)
from .networks import CodecModel
from .serialization import morton_decode, serialize_order

logger = logging.getLogger(__name__)

MAGIC = b"LCM1"
VERSION = 1

POSITIONS = 1
GEOM_HYPER = 2
GEOM_SYMBOLS = 3
DIV_MASK = 4
CLR_LOSSY_HYPER = 5
CLR_LOSSY_LATENT = 6
CLR_LOSSLESS_HYPER = 7
CLR_LOSSLESS_SYMBOLS = 8
SECTION_NAMES = {
    POSITIONS: "POSITIONS",
    GEOM_HYPER: "GEOM_HYPER",
    GEOM_SYMBOLS: "GEOM_SYMBOLS",
    DIV_MASK: "DIV_MASK",
    CLR_LOSSY_HYPER: "CLR_LOSSY_HYPER",
    CLR_LOSSY_LATENT: "CLR_LOSSY_LATENT",
    CLR_LOSSLESS_HYPER: "CLR_LOSSLESS_HYPER",
    CLR_LOSSLESS_SYMBOLS: "CLR_LOSSLESS_SYMBOLS",
}
CODED_SECTIONS = (GEOM_HYPER, GEOM_SYMBOLS, CLR_LOSSY_HYPER, CLR_LOSSY_LATENT, CLR_LOSSLESS_HYPER, CLR_LOSSLESS_SYMBOLS)

_HEAD = struct.Struct("<4sHBBQI6d8f48f")
_TAIL = struct.Struct("<IB")
_ENTRY = struct.Struct("<BQQI")


class ContainerError(CorruptStreamError):
    pass


class VersionError(ContainerError):
    pass


def set_threads(n: int | None):
    """Cap window-level parallelism of the coding kernels."""
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class CodecConfig:
    window: int = 1024
    bit_depth: int = 16
    profile: int = 0
    tau: float = 0.5
    geometry_steps: np.ndarray = field(default_factory=default_geometry_steps)
    color_steps: np.ndarray = field(default_factory=default_color_steps)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window length must be >= 1")
        if not 0 <= self.profile < 256:
            raise ValueError("profile id must fit in one byte")


# ------------------------------------------------------------ container


@dataclass
class Container:
    profile: int
    bit_depth: int
    n: int
    window: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    geometry_steps: np.ndarray
    color_steps: np.ndarray
    supports: dict  # coded section id -> Support
    architecture_id: int
    sections: dict  # section id -> payload bytes
    version: int = VERSION
    rate_bits: dict = field(default_factory=dict)  # section id -> ideal bits per chunk, not serialized

    def header_bytes(self) -> bytes:
        out = bytearray(_HEAD.pack(
            MAGIC, self.version, self.profile, self.bit_depth, self.n, self.window,
            *np.asarray(self.bbox_min, np.float64), *np.asarray(self.bbox_max, np.float64),
            *np.asarray(self.geometry_steps, np.float32), *np.asarray(self.color_steps, np.float32),
        ))
        for sid in CODED_SECTIONS:
            s = self.supports[sid]
            out += struct.pack("<H", len(s.lo))
            out += np.stack([s.lo, s.hi], axis=1).astype("<i4").tobytes()
        out += _TAIL.pack(self.architecture_id, len(self.sections))
        return bytes(out)

    def to_bytes(self) -> bytes:
        head = self.header_bytes()
        offset = len(head) + _ENTRY.size * len(self.sections)
        table = bytearray()
        for sid in sorted(self.sections):
            payload = self.sections[sid]
            table += _ENTRY.pack(sid, offset, len(payload), zlib.crc32(payload))
            offset += len(payload)
        return head + bytes(table) + b"".join(self.sections[s] for s in sorted(self.sections))

    @property
    def size(self) -> int:
        return len(self.header_bytes()) + _ENTRY.size * len(self.sections) + sum(map(len, self.sections.values()))

    @classmethod
    def from_bytes(cls, data: bytes, verify: bool = True) -> "Container":
        data = bytes(data)
        if len(data) < 6 or data[:4] != MAGIC:
            raise ContainerError("bad magic: not a codec container")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise VersionError(f"unsupported container version {version} (this build reads {VERSION})")
        try:
            head = _HEAD.unpack_from(data, 0)
            pos = _HEAD.size
            supports = {}
            for sid in CODED_SECTIONS:
                (count,) = struct.unpack_from("<H", data, pos)
                pos += 2
                pairs = np.frombuffer(data, dtype="<i4", count=2 * count, offset=pos).reshape(count, 2)
                pos += 8 * count
                supports[sid] = Support(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64))
            arch, count = _TAIL.unpack_from(data, pos)
            pos += _TAIL.size
            entries = [_ENTRY.unpack_from(data, pos + i * _ENTRY.size) for i in range(count)]
        except (struct.error, ValueError) as e:
            raise ContainerError(f"truncated or malformed header: {e}") from None
        expected = pos + _ENTRY.size * count
        sections = {}
        for sid, off, length, crc in entries:
            if sid not in SECTION_NAMES or sid in sections:
                raise ContainerError(f"bad section id {sid}")
            if off != expected or off + length > len(data):
                raise ContainerError(f"section {SECTION_NAMES[sid]} offset/length out of bounds")
            payload = data[off : off + length]
            if verify and zlib.crc32(payload) != crc:
                raise ContainerError(f"checksum mismatch in section {SECTION_NAMES[sid]}")
            sections[sid] = payload
            expected = off + length
        if expected != len(data):
            raise ContainerError(f"{len(data) - expected} trailing bytes after last section")
        return cls(
            profile=head[2], bit_depth=head[3], n=head[4], window=head[5],
            bbox_min=np.array(head[6:9]), bbox_max=np.array(head[9:12]),
            geometry_steps=np.array(head[12:20], dtype=np.float32),
            color_steps=np.array(head[20:68], dtype=np.float32),
            supports=supports, architecture_id=arch, sections=sections, version=version,
        )

    @property
    def spec(self) -> QuantizationSpec:
        return QuantizationSpec(self.bit_depth, self.bbox_min, self.bbox_max, self.geometry_steps, self.color_steps)


def pack_chunks(chunks: list[bytes]) -> bytes:
    return struct.pack(f"<I{len(chunks)}I", len(chunks), *map(len, chunks)) + b"".join(chunks)


def unpack_chunks(payload: bytes, expected: int | None = None) -> list[bytes]:
    if len(payload) < 4:
        raise ContainerError("section too short for its chunk index")
    (count,) = struct.unpack_from("<I", payload, 0)
    if expected is not None and count != expected:
        raise ContainerError(f"chunk index lists {count} windows, expected {expected}")
    if len(payload) < 4 + 4 * count:
        raise ContainerError("chunk index truncated")
    lengths = struct.unpack_from(f"<{count}I", payload, 4)
    pos = 4 + 4 * count
    if pos + sum(lengths) != len(payload):
        raise ContainerError("chunk lengths disagree with section length")
    out = []
    for n in lengths:
        out.append(payload[pos : pos + n])
        pos += n
    return out


# ------------------------------------------------------------ positions


def encode_positions(cells, bit_depth: int) -> tuple[bytes, np.ndarray]:
    """Morton-delta varint stream and the serialization permutation it implies."""
    seq = serialize_order(cells, bit_depth)
    return varint_encode_deltas(seq.morton_codes), seq.permutation


def decode_positions(data: bytes, n: int, bit_depth: int) -> np.ndarray:
    codes = varint_decode_deltas(data, n)
    if n and int(codes[-1]) >= 1 << (3 * bit_depth):
        raise ContainerError("position code exceeds bit depth")
    return morton_decode(codes)


# ------------------------------------------------------------- sections


@dataclass
class SectionResult:
    symbols: np.ndarray
    hyper_chunks: list
    symbol_chunks: list
    support: Support
    hyper_support: Support
    rate_bits: tuple = (0.0, 0.0)  # ideal (hyper, symbol) bits under the quantized tables
    window_bits: tuple = (None, None)  # the same split per window


def _n_windows(n_tokens: int, length: int) -> int:
    return -(-n_tokens // length) if n_tokens else 0


def encode_section(model: SectionModel, inputs: SectionInputs, bins, length: int, trace=None,
                   pes=None) -> SectionResult:
    support = Support.of(inputs.symbols[inputs.coded], model.channels)
    support.check()
    normalizer = support.normalizer(bins)
    batches = [make_batch(inputs, f, w) for f, w in window_batches(len(inputs), length)]
    with torch.no_grad():
        pes = pes or [model.positional(b.pos) for b in batches]
        latents = [hyper_encode(model, inputs, b, normalizer, pe) for b, pe in zip(batches, pes)]
    coded_latents = [u[b.coded].numpy() for u, b in zip(latents, batches)]
    hyper_support = Support.of(np.concatenate(coded_latents) if coded_latents else np.zeros((0, model.hyper_dim)),
                               model.hyper_dim)
    hyper_support.check("hyper latent")
    tables = CodingTables(bins, support, hyper_support)
    hyper_table = tables.hyper_table(model)
    side = EncodeSide(trace)
    for b, pe, u in zip(batches, pes, latents):
        code_batch(model, inputs, b, tables, side, hyper_table, u, pe)
    nw = _n_windows(len(inputs), length)
    window_bits = []
    for s in ("hyper", "symbols"):
        _, freqs, wids = side.streams[s]
        if freqs:
            bits = 16 - np.log2(np.concatenate(freqs))
            window_bits.append(np.bincount(np.concatenate(wids), weights=bits, minlength=nw))
        else:
            window_bits.append(np.zeros(nw))
    return SectionResult(inputs.symbols, side.chunks("hyper", nw), side.chunks("symbols", nw),
                         support, hyper_support, tuple(float(w.sum()) for w in window_bits), tuple(window_bits))


def decode_section(model: SectionModel, inputs: SectionInputs, bins, length: int, support: Support,
                   hyper_support: Support, hyper_chunks, symbol_chunks, trace=None, pes=None) -> np.ndarray:
    tables = CodingTables(bins, support, hyper_support)
    hyper_table = tables.hyper_table(model)
    side = DecodeSide(hyper_chunks, symbol_chunks, trace)
    out = np.zeros((len(inputs), model.channels), dtype=np.int64)
    for k, (f, w) in enumerate(window_batches(len(inputs), length)):
        b = make_batch(inputs, f, w)
        pe = pes[k] if pes else None
        symbols, _ = code_batch(model, inputs, b, tables, side, hyper_table, None, pe)
        out[b.tokens[b.coded.numpy()]] = symbols[b.coded.numpy()]
    side.finish()
    return out


def _check_support(s: Support, channels: int, name: str):
    if len(s.lo) != channels:
        raise ContainerError(f"{name}: support table has {len(s.lo)} channels, architecture needs {channels}")


# -------------------------------------------------------------- division


@torch.no_grad()
def divide_colors(model: CodecModel, colors, cells, length: int, tau: float = 0.5) -> np.ndarray:
    """Boolean mask over the serialized sequence; True routes to the lossless path."""
    n = len(colors)
    inputs = SectionInputs(cells, np.ones(n, dtype=bool))
    mask = np.zeros(n, dtype=bool)
    for f, w in window_batches(n, length):
        b = make_batch(inputs, f, w)
        logits = model.division(torch.from_numpy(np.ascontiguousarray(colors[b.tokens], dtype=np.float32)), b.pos)
        mask[b.tokens] = (torch.sigmoid(logits) >= tau).numpy()
    return mask


def _lossy_batches(cells, length):
    inputs = SectionInputs(cells, np.ones(len(cells), dtype=bool))
    return [make_batch(inputs, f, w) for f, w in window_batches(len(cells), length)]


@torch.no_grad()
def _lossy_pes(model: CodecModel, cells, length):
    batches = _lossy_batches(cells, length)
    return batches, [model.lossy.section.positional(b.pos) for b in batches]


@torch.no_grad()
def lossy_analysis(model: CodecModel, colors, cells, length: int):
    """Quantized latent of the lossy colors plus the per-batch positional encodings."""
    batches, pes = _lossy_pes(model, cells, length)
    y = np.zeros((len(cells), model.cfg.lossy_latent), dtype=np.int64)
    for b, pe in zip(batches, pes):
        c = torch.from_numpy(np.ascontiguousarray(colors[b.tokens], dtype=np.float32))
        y[b.tokens] = torch.round(model.lossy.analysis(c, pe)).numpy().astype(np.int64)
    return y, pes


@torch.no_grad()
def lossy_synthesis(model: CodecModel, latent, cells, length: int, pes=None) -> np.ndarray:
    batches = _lossy_batches(cells, length)
    if pes is None:
        pes = [model.lossy.section.positional(b.pos) for b in batches]
    out = np.zeros((len(cells), SH_DIM), dtype=np.float32)
    for b, pe in zip(batches, pes):
        yb = torch.from_numpy(latent[b.tokens].astype(np.float32))
        out[b.tokens] = model.lossy.synthesis(yb, pe).numpy()
    return out


def lossless_color_inputs(cells, mask, lossy_colors, symbols=None, steps=None) -> SectionInputs:
    flag = mask.astype(np.float32)[:, None]
    known = np.where(mask[:, None], 0.0, lossy_colors).astype(np.float32)
    values = known.copy()
    if symbols is not None:
        values[mask] = dequantize_attributes(symbols[mask], steps)
    return SectionInputs(
        cells, mask, values, symbols,
        analysis_extra=flag,
        synthesis_extra=np.concatenate([known, flag], axis=1),
    )


# ------------------------------------------------------------ top level


@dataclass
class CodecTrace:
    """Per-phase table hashes, keyed by section."""

    sections: dict = field(default_factory=dict)

    def __call__(self, name):
        return self.sections.setdefault(name, [])


def compress(cloud: GaussianCloud, model: CodecModel, config: CodecConfig | None = None,
             trace: CodecTrace | None = None, mask=None) -> Container:
    """Code ``cloud`` into a container.

    ``mask`` (over the input order) overrides the division network's routing.
    """
    config = config or CodecConfig()
    cloud.validate()
    spec = QuantizationSpec.for_cloud(cloud, config.bit_depth, geometry_steps=config.geometry_steps,
                                      color_steps=config.color_steps)
    L = config.window
    cells, _ = quantize_positions(cloud.positions, spec)
    pos_bytes, order = encode_positions(cells, config.bit_depth)
    cells = cells[order]
    n = len(cells)
    tr = (lambda name: trace(name)) if trace is not None else (lambda name: None)

    geom_sym = quantize_attributes(cloud.geometry[order], spec.geometry_steps)
    geom_in = SectionInputs(cells, np.ones(n, dtype=bool), dequantize_attributes(geom_sym, spec.geometry_steps), geom_sym)
    geom = encode_section(model.geometry, geom_in, spec.geometry_steps, L, tr("geometry"))

    colors = cloud.colors[order]
    if mask is None:
        mask = divide_colors(model, colors, cells, L, config.tau)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(n)[order]

    lossy_idx = np.flatnonzero(~mask)
    lossy_cells = cells[lossy_idx]
    lossy_colors = np.zeros((n, SH_DIM), dtype=np.float32)
    if len(lossy_idx):
        y, pes = lossy_analysis(model, colors[lossy_idx], lossy_cells, L)
        lossy_in = SectionInputs(lossy_cells, np.ones(len(lossy_idx), dtype=bool), y.astype(np.float32), y)
        lossy = encode_section(model.lossy.section, lossy_in, np.ones(model.cfg.lossy_latent), L, tr("lossy"), pes)
        lossy_colors[lossy_idx] = lossy_synthesis(model, y, lossy_cells, L, pes)
    else:
        lossy = _empty_result(model.lossy.section)

    color_sym = np.zeros((n, SH_DIM), dtype=np.int64)
    color_sym[mask] = quantize_attributes(colors[mask], spec.color_steps)
    color_in = lossless_color_inputs(cells, mask, lossy_colors, color_sym, spec.color_steps)
    color = encode_section(model.color, color_in, spec.color_steps, L, tr("color"))

    sections = {
        POSITIONS: pos_bytes,
        GEOM_HYPER: pack_chunks(geom.hyper_chunks),
        GEOM_SYMBOLS: pack_chunks(geom.symbol_chunks),
        DIV_MASK: np.packbits(mask).tobytes(),
        CLR_LOSSY_HYPER: pack_chunks(lossy.hyper_chunks),
        CLR_LOSSY_LATENT: pack_chunks(lossy.symbol_chunks),
        CLR_LOSSLESS_HYPER: pack_chunks(color.hyper_chunks),
        CLR_LOSSLESS_SYMBOLS: pack_chunks(color.symbol_chunks),
    }
    supports = {
        GEOM_HYPER: geom.hyper_support, GEOM_SYMBOLS: geom.support,
        CLR_LOSSY_HYPER: lossy.hyper_support, CLR_LOSSY_LATENT: lossy.support,
        CLR_LOSSLESS_HYPER: color.hyper_support, CLR_LOSSLESS_SYMBOLS: color.support,
    }
    rate = {
        GEOM_HYPER: geom.window_bits[0], GEOM_SYMBOLS: geom.window_bits[1],
        CLR_LOSSY_HYPER: lossy.window_bits[0], CLR_LOSSY_LATENT: lossy.window_bits[1],
        CLR_LOSSLESS_HYPER: color.window_bits[0], CLR_LOSSLESS_SYMBOLS: color.window_bits[1],
    }
    return Container(
        profile=config.profile, bit_depth=config.bit_depth, n=n, window=L,
        bbox_min=spec.bbox_min, bbox_max=spec.bbox_max,
        geometry_steps=spec.geometry_steps, color_steps=spec.color_steps,
        supports=supports, architecture_id=model.architecture_id, sections=sections, rate_bits=rate,
    )


def _empty_result(section: SectionModel) -> SectionResult:
    zero = Support(np.zeros(section.channels, np.int64), np.zeros(section.channels, np.int64))
    hzero = Support(np.zeros(section.hyper_dim, np.int64), np.zeros(section.hyper_dim, np.int64))
    return SectionResult(np.zeros((0, section.channels), np.int64), [], [], zero, hzero,
                         window_bits=(np.zeros(0), np.zeros(0)))


@dataclass
class DecodedStreams:
    """Symbol-level view of a decoded container, in serialized order."""

    cells: np.ndarray
    geometry: np.ndarray
    mask: np.ndarray
    lossy_latent: np.ndarray
    lossy_colors: np.ndarray
    colors: np.ndarray  # lossless color symbols (zeros at lossy tokens)


def decode_streams(container: Container | bytes, model: CodecModel, trace: CodecTrace | None = None) -> DecodedStreams:
    c = container if isinstance(container, Container) else Container.from_bytes(container)
    if c.architecture_id != model.architecture_id:
        raise ContainerError(
            f"architecture id mismatch: container {c.architecture_id:#010x}, weights {model.architecture_id:#010x}"
        )
    missing = [SECTION_NAMES[s] for s in SECTION_NAMES if s not in c.sections]
    if missing:
        raise ContainerError(f"missing section {missing[0]}")
    n, L = c.n, c.window
    if L < 1:
        raise ContainerError("window length 0 in header")
    tr = (lambda name: trace(name)) if trace is not None else (lambda name: None)
    cfg = model.cfg
    _check_support(c.supports[GEOM_SYMBOLS], model.geometry.channels, "GEOM_SYMBOLS")
    _check_support(c.supports[GEOM_HYPER], model.geometry.hyper_dim, "GEOM_HYPER")
    _check_support(c.supports[CLR_LOSSY_LATENT], model.lossy.section.channels, "CLR_LOSSY_LATENT")
    _check_support(c.supports[CLR_LOSSY_HYPER], model.lossy.section.hyper_dim, "CLR_LOSSY_HYPER")
    _check_support(c.supports[CLR_LOSSLESS_SYMBOLS], model.color.channels, "CLR_LOSSLESS_SYMBOLS")
    _check_support(c.supports[CLR_LOSSLESS_HYPER], model.color.hyper_dim, "CLR_LOSSLESS_HYPER")

    cells = decode_positions(c.sections[POSITIONS], n, c.bit_depth)
    nw = _n_windows(n, L)
    geom = decode_section(
        model.geometry, SectionInputs(cells, np.ones(n, dtype=bool)), c.geometry_steps, L,
        c.supports[GEOM_SYMBOLS], c.supports[GEOM_HYPER],
        unpack_chunks(c.sections[GEOM_HYPER], nw), unpack_chunks(c.sections[GEOM_SYMBOLS], nw), tr("geometry"),
    )
    mask_bytes = c.sections[DIV_MASK]
    if len(mask_bytes) != -(-n // 8):
        raise ContainerError("division mask length disagrees with N")
    mask = np.unpackbits(np.frombuffer(mask_bytes, dtype=np.uint8), count=n).astype(bool)

    lossy_idx = np.flatnonzero(~mask)
    lossy_cells = cells[lossy_idx]
    lossy_colors = np.zeros((n, SH_DIM), dtype=np.float32)
    latent = np.zeros((len(lossy_idx), cfg.lossy_latent), dtype=np.int64)
    nl = _n_windows(len(lossy_idx), L)
    hyper_chunks = unpack_chunks(c.sections[CLR_LOSSY_HYPER], nl)
    latent_chunks = unpack_chunks(c.sections[CLR_LOSSY_LATENT], nl)
    if len(lossy_idx):
        _, pes = _lossy_pes(model, lossy_cells, L)
        latent = decode_section(
            model.lossy.section, SectionInputs(lossy_cells, np.ones(len(lossy_idx), dtype=bool)),
            np.ones(cfg.lossy_latent), L, c.supports[CLR_LOSSY_LATENT], c.supports[CLR_LOSSY_HYPER],
            hyper_chunks, latent_chunks, tr("lossy"), pes,
        )
        lossy_colors[lossy_idx] = lossy_synthesis(model, latent, lossy_cells, L, pes)

    color_in = lossless_color_inputs(cells, mask, lossy_colors)
    colors = decode_section(
        model.color, color_in, c.color_steps, L, c.supports[CLR_LOSSLESS_SYMBOLS], c.supports[CLR_LOSSLESS_HYPER],
        unpack_chunks(c.sections[CLR_LOSSLESS_HYPER], nw), unpack_chunks(c.sections[CLR_LOSSLESS_SYMBOLS], nw),
        tr("color"),
    )
    return DecodedStreams(cells, geom, mask, latent, lossy_colors, colors)


def decompress(container: Container | bytes, model: CodecModel, trace: CodecTrace | None = None) -> GaussianCloud:
    c = container if isinstance(container, Container) else Container.from_bytes(container)
    s = decode_streams(c, model, trace)
    spec = c.spec
    geometry = dequantize_attributes(s.geometry, spec.geometry_steps)
    colors = np.where(s.mask[:, None], dequantize_attributes(s.colors, spec.color_steps), s.lossy_colors)
    return GaussianCloud(
        positions=dequantize_positions(s.cells, spec).astype(np.float32),
        rotations=geometry[:, 3:7],
        scales=geometry[:, 0:3],
        opacity=geometry[:, 7:8],
        colors=colors,
    )


def total_rate(container: Container | bytes) -> dict:
    """Bytes and bits per section plus header overhead; totals equal the file size."""
    c = container if isinstance(container, Container) else Container.from_bytes(container, verify=False)
    total = c.size
    header = len(c.header_bytes()) + _ENTRY.size * len(c.sections)
    rows = {}
    for sid in sorted(c.sections):
        b = len(c.sections[sid])
        rows[SECTION_NAMES[sid]] = {"bytes": b, "bits": 8 * b, "share": b / total}
    return {
        "n_gaussians": c.n,
        "header_bytes": header,
        "sections": rows,
        "total_bytes": total,
        "bits_per_gaussian": 8 * total / max(c.n, 1),
    }
