"""Invariant suites run by ``lcm selftest``.

Each check returns (ok, detail).  Suites are small enough to finish in well
under a minute on one core once the numba kernels are compiled.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager

import numpy as np
import torch

from . import probability
from .coder import decode_sequence, encode_sequence
from .context import (
    MIXTURE,
    CodingTables,
    EncodeSide,
    SectionInputs,
    SectionModel,
    Support,
    code_batch,
    hyper_encode,
    make_batch,
    predict_window,
    window_batches,
)
from .gaussian import parse_ply, quantize_attributes, quantize_positions, write_ply, QuantizationSpec
from .networks import CodecModel, ModelConfig
from .nn import DGCNN, MLP, AttentionLayer, LayerNorm, Linear, grad_check
from .pipeline import CodecConfig, compress, decode_streams
from .probability import FactorizedDensity, build_cdf_table, quantize_pmf
from .serialization import locality_stats, random_order, serialize_order
from .synth import SynthSceneSpec, synth_cloud


def reference_counts(pmf, total: int = 1 << 16) -> list[int]:
    """Plain-Python largest-remainder rounding with a one-count floor; ties go to the lower index."""
    pmf = [float(p) for p in pmf]
    s = 0.0
    for p in pmf:
        s += p
    spare = total - len(pmf)
    scaled = [p / s * spare if s > 0 else spare / len(pmf) for p in pmf]
    base = [int(math.floor(v)) for v in scaled]
    left = spare - sum(base)
    order = sorted(range(len(pmf)), key=lambda i: (-(scaled[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return [b + 1 for b in base]


# ------------------------------------------------------------------ checks


def check_ply(rng) -> tuple[bool, str]:
    cloud = synth_cloud(SynthSceneSpec(n=257, seed=int(rng.integers(1 << 30))))
    back = parse_ply(write_ply(cloud))
    same = all(np.array_equal(a, b) for a, b in zip(cloud.fields().values(), back.fields().values()))
    return same, "257-point PLY write/parse"


def check_codec_roundtrip(rng) -> tuple[bool, str]:
    model = CodecModel.initialized(ModelConfig(), int(rng.integers(1 << 30)))
    sizes = (1, 37, 700)
    for n in sizes:
        cloud = synth_cloud(SynthSceneSpec(n=n, seed=int(rng.integers(1 << 30))))
        mask = rng.random(n) < 0.5
        cfg = CodecConfig(window=256)
        data = compress(cloud, model, cfg, mask=mask).to_bytes()
        streams = decode_streams(data, model)
        spec = QuantizationSpec.for_cloud(cloud, cfg.bit_depth)
        cells, _ = quantize_positions(cloud.positions, spec)
        order = serialize_order(cells, cfg.bit_depth).permutation
        m = mask[order]
        ok = (
            np.array_equal(streams.cells, cells[order])
            and np.array_equal(streams.mask, m)
            and np.array_equal(streams.geometry, quantize_attributes(cloud.geometry[order], spec.geometry_steps))
            and np.array_equal(streams.colors[m], quantize_attributes(cloud.colors[order][m], spec.color_steps))
        )
        if not ok:
            return False, f"mismatch at N={n}"
    return True, f"N in {sizes}"


def check_cdf_quantization(rng) -> tuple[bool, str]:
    for trial in range(40):
        S = int(rng.integers(1, 300))
        p = rng.dirichlet(np.full(S, float(rng.choice([0.05, 1.0, 20.0]))))
        got = quantize_pmf(p[None, :])[0]
        if list(got) != reference_counts(p):
            return False, f"trial {trial}: {S}-symbol table differs from reference rounding"
        build_cdf_table(p[None, :]).check()
    return True, "40 random tables"


def check_coder_optimality(rng) -> tuple[bool, str]:
    rows, S = 64, 40
    pmf = rng.dirichlet(np.full(S, 0.3), size=rows)
    table = build_cdf_table(pmf)
    for n in (1000, 100_000):
        idx = rng.integers(0, rows, n)
        sym = (rng.random(n)[:, None] > np.cumsum(pmf[idx], axis=1)).sum(1).clip(0, S - 1)
        chunk = encode_sequence(sym, table, idx)
        if not np.array_equal(decode_sequence(chunk, table, n, idx), sym):
            return False, f"roundtrip failed for {n} symbols"
        ideal = chunk.target_bits / 8
        if len(chunk) > math.ceil(ideal) + 32:
            return False, f"{len(chunk)} bytes vs ideal {ideal:.1f} for {n} symbols"
        if n >= 100_000 and len(chunk) > 1.01 * ideal:
            return False, f"overhead {len(chunk) / ideal - 1:.3%} on {n} symbols"
    return True, "bounded overhead, <1% on 1e5 symbols"


def _toy_section(seed: int):
    torch.manual_seed(seed)
    cfg = ModelConfig(width=16, heads=2, dgcnn_width=16, knn=4)
    return SectionModel(cfg, 4, (2, 2), 4, MIXTURE).eval()


def _section_inputs(rng, n, lo=-5, hi=5):
    cells = rng.integers(0, 64, (n, 3))
    cells = cells[serialize_order(cells, 6).permutation]
    sym = rng.integers(lo, hi + 1, (n, 4))
    return SectionInputs(cells, np.ones(n, dtype=bool), sym * 0.1, sym)


def check_causality(rng, windows: int = 20) -> tuple[bool, str]:
    model = _toy_section(int(rng.integers(1 << 30)))
    bad = 0
    for _ in range(windows):
        inputs = _section_inputs(rng, int(rng.integers(1, 17)))
        inputs.coded = rng.random(len(inputs)) < 0.8
        inputs.coded[0] = True
        tables = CodingTables(np.full(4, 0.1), Support(np.full(4, -6), np.full(4, 6)),
                              Support(np.full(4, -8), np.full(4, 8)))
        enc, dec = [], []
        predict_window(model, inputs, tables, 16, mode="encode", trace=enc)
        predict_window(model, inputs, tables, 16, mode="decode", trace=dec)
        bad += enc != dec
    if bad:
        return False, f"{bad} of {windows} windows with differing encoder/decoder tables"
    return perturbation_violations(model, rng, trials=2) == 0, f"{windows} windows + perturbation sweep"


def phase_tables(model, inputs, tables, latent):
    """Tables of every phase of a single window with the hyper latent held fixed."""
    (first, wins), = window_batches(len(inputs), len(inputs))
    batch = make_batch(inputs, first, wins)
    side = EncodeSide(keep=True)
    code_batch(model, inputs, batch, tables, side, tables.hyper_table(model), latent)
    return {label: t.cum for label, t in side.tables}


def perturbation_violations(model, rng, trials: int = 4, n: int = 8) -> int:
    """Perturb one symbol at a time; count tables that change at or before its own phase."""
    tables = CodingTables(np.full(4, 0.1), Support(np.full(4, -6), np.full(4, 6)),
                          Support(np.full(4, -8), np.full(4, 8)))
    violations = 0
    for _ in range(trials):
        inputs = _section_inputs(rng, n)
        (first, wins), = window_batches(n, n)
        batch = make_batch(inputs, first, wins)
        latent = hyper_encode(model, inputs, batch, (tables.center, tables.spread))
        base = phase_tables(model, inputs, tables, latent)
        anchor = batch.anchor[0].numpy()
        for t in range(n):
            for j, (a, b) in enumerate(model.groups):
                sym = inputs.symbols.copy()
                sym[t, a:b] += np.where(sym[t, a:b] < 6, 1, -1)
                moved = SectionInputs(inputs.cells, inputs.coded, sym * 0.1, sym)
                got = phase_tables(model, moved, tables, latent)
                own = (j, 0 if anchor[t] else 1)
                for label, cum in got.items():
                    if label != ("hyper",) and label <= own and not np.array_equal(cum, base[label]):
                        violations += 1
    return violations


def check_gradients(rng) -> tuple[bool, str]:
    torch.manual_seed(int(rng.integers(1 << 30)))
    x = torch.randn(2, 6, 8, dtype=torch.float64)
    allowed = torch.rand(2, 6, 6) < 0.6
    allowed |= torch.eye(6, dtype=torch.bool)
    cases = {
        "linear": (Linear(8, 5).double(), lambda m, v: m(v)),
        "layernorm": (LayerNorm(8).double(), lambda m, v: m(v)),
        "mlp": (MLP(8, 16, 4).double(), lambda m, v: m(v)),
        "attention": (AttentionLayer(8, 2).double(), lambda m, v: m(v, None, allowed)),
        "dgcnn": (DGCNN(8, 8, k=3).double(), lambda m, v: m(v[..., :3])),
    }
    worst = {}
    for name, (module, fn) in cases.items():
        res = grad_check(lambda v: fn(module, v), [x], samples=12, h=1e-6)
        worst[name] = res.max_rel_error
        if not res.ok(1e-4) and not res.nondifferentiable:
            return False, f"{name}: relative error {res.max_rel_error:.2e}"
    density = FactorizedDensity(3).double()
    res = grad_check(lambda v: density.likelihood(v), [torch.randn(10, 3, dtype=torch.float64)], h=1e-6)
    if not res.ok(1e-4):
        return False, f"factorized density: relative error {res.max_rel_error:.2e}"
    return True, "max rel error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def check_morton_locality(rng, n: int = 20_000) -> tuple[bool, str]:
    pts = rng.random((n, 3))
    cells = np.floor(pts * (1 << 16)).astype(np.int64)
    morton = locality_stats(serialize_order(cells, 16).permutation, pts)["median"]
    rand = locality_stats(random_order(n, int(rng.integers(1 << 30))).permutation, pts)["median"]
    return morton <= 0.1 * rand, f"median ratio {morton / rand:.4f}"


SUITES = {
    "ply_roundtrip": check_ply,
    "codec_roundtrip": check_codec_roundtrip,
    "cdf_quantization": check_cdf_quantization,
    "coder_optimality": check_coder_optimality,
    "causality": check_causality,
    "gradients": check_gradients,
    "morton_locality": check_morton_locality,
}


@contextmanager
def _flipped_count(on: bool):
    old = probability.DEBUG_FLIP_COUNT
    probability.DEBUG_FLIP_COUNT = on
    try:
        yield
    finally:
        probability.DEBUG_FLIP_COUNT = old


def run_selftest(seed: int = 0, flip_cdf_count: bool = False, only=None) -> dict:
    """Run every suite; the summary is JSON-serializable."""
    results = {}
    with _flipped_count(flip_cdf_count):
        for name, check in SUITES.items():
            if only and name not in only:
                continue
            rng = np.random.default_rng([seed, len(results)])
            t = time.perf_counter()
            try:
                ok, detail = check(rng)
            except Exception as e:  # a crash is a failed invariant, reported by name
                ok, detail = False, f"{type(e).__name__}: {e}"
            results[name] = {"ok": bool(ok), "detail": detail, "seconds": round(time.perf_counter() - t, 3)}
    failed = [k for k, v in results.items() if not v["ok"]]
    return {"ok": not failed, "passed": [k for k in results if k not in failed], "failed": failed, "suites": results}
