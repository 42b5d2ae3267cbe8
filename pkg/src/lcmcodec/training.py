"""Toy-scale training: relaxed rate-distortion objective, staged recipe, ablations.

Rounding is relaxed with additive uniform noise when measuring rates and with
straight-through rounding where a value is reconstructed or used as context.
``relax='noise'`` uses the noisy value everywhere and a soft division mask,
which makes the whole objective differentiable for finite-difference checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .context import SectionInputs, Support, make_batch, section_rate, uniform_noise, window_batches
from .gaussian import (
    GaussianCloud,
    QuantizationSpec,
    default_color_steps,
    default_geometry_steps,
    dequantize_attributes,
    quantize_attributes,
    quantize_positions,
)
from .networks import CodecModel, ModelConfig
from .nn import WeightStore, save_weights
from .pipeline import encode_section
from .serialization import random_order, serialize_order
from .synth import SynthSceneSpec, synth_cloud

LAMBDAS = (1e-4, 2e-4, 4e-4, 8e-4, 16e-4)
STAGES = ("lossy_init", "lossless_init", "joint")
ABLATIONS = ("no_space_ctx", "no_channel_ctx", "random_serialization", "mlp_backbone", "context_len")
COLOR_WEIGHT = 1.0


class TrainingDivergence(RuntimeError):
    def __init__(self, stage: str, step: int, detail: str):
        super().__init__(f"training diverged in {stage} at step {step}: {detail}")
        self.stage = stage
        self.step = step


class StageOrderError(ValueError):
    pass


@dataclass
class TrainConfig:
    lam: float = 4e-4
    w: float = 0.0
    stage: str = "lossy_init"
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0
    window: int = 1024
    tau: float = 0.5
    clip: float = 1.0

    def __post_init__(self):
        if not any(math.isclose(self.lam, g) for g in LAMBDAS):
            raise ValueError(f"lambda {self.lam} not in {LAMBDAS}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 0 or self.lr <= 0 or self.w < 0:
            raise ValueError("need steps >= 0, lr > 0, w >= 0")


# ----------------------------------------------------------------- scenes


@dataclass
class Scene:
    """A cloud quantized and serialized for training; arrays are in sequence order."""

    cells: np.ndarray
    geometry: np.ndarray  # dequantized, exactly what the lossless path reproduces
    geometry_symbols: np.ndarray
    geometry_steps: np.ndarray
    colors: np.ndarray
    color_symbols: np.ndarray
    color_steps: np.ndarray
    window: int
    batches: list = field(default_factory=list)

    def __len__(self):
        return len(self.cells)


def prepare_scene(cloud: GaussianCloud, window: int = 1024, order: str = "morton", seed: int = 0,
                  bit_depth: int = 16) -> Scene:
    spec = QuantizationSpec.for_cloud(cloud, bit_depth)
    cells, _ = quantize_positions(cloud.positions, spec)
    if order == "morton":
        perm = serialize_order(cells, bit_depth).permutation
    elif order == "random":
        perm = random_order(len(cells), seed).permutation
    else:
        raise ValueError(f"unknown order {order!r}")
    cells = cells[perm]
    gsym = quantize_attributes(cloud.geometry[perm], spec.geometry_steps)
    csym = quantize_attributes(cloud.colors[perm], spec.color_steps)
    scene = Scene(
        cells=cells,
        geometry=dequantize_attributes(gsym, spec.geometry_steps),
        geometry_symbols=gsym,
        geometry_steps=spec.geometry_steps,
        colors=cloud.colors[perm].astype(np.float32),
        color_symbols=csym,
        color_steps=spec.color_steps,
        window=window,
    )
    inputs = SectionInputs(cells, np.ones(len(cells), dtype=bool))
    scene.batches = [make_batch(inputs, f, w) for f, w in window_batches(len(cells), window)]
    return scene


def toy_scenes(count: int, n: int = 2048, seed: int = 0, window: int = 1024, order: str = "morton",
               **spec_kw) -> list[Scene]:
    return [
        prepare_scene(synth_cloud(SynthSceneSpec(n=n, seed=seed + i, **spec_kw)), window, order, seed + i)
        for i in range(count)
    ]


# -------------------------------------------------------------- objective


@dataclass
class RDTerms:
    distortion: torch.Tensor
    rates: dict  # section name -> bits per Gaussian
    lossless_fraction: torch.Tensor

    @property
    def rate(self) -> torch.Tensor:
        return sum(self.rates.values(), torch.zeros(()))


def _t(arr, dtype):
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _normalizer(symbols, steps, dtype):
    s = Support.of(symbols, symbols.shape[1])
    center, spread = s.normalizer(steps)
    return center.to(dtype), spread.to(dtype), _t(s.lo, dtype), _t(s.hi, dtype)


def _dtype(model):
    return next(model.parameters()).dtype


def geometry_rate(model: CodecModel, scene: Scene, gen=None) -> torch.Tensor:
    """Relaxed bits per Gaussian of the geometry section."""
    dtype = _dtype(model)
    center, spread, lo, hi = _normalizer(scene.geometry_symbols, scene.geometry_steps, dtype)
    bins = _t(scene.geometry_steps, dtype)
    total = torch.zeros((), dtype=dtype)
    for b in scene.batches:
        bits, hbits = section_rate(
            model.geometry, b, _t(scene.geometry[b.tokens], dtype), _t(scene.geometry_symbols[b.tokens], dtype),
            bins, center, spread, lo, hi, gen=gen,
        )
        total = total + bits.sum() + hbits.sum()
    return total / len(scene)


def rd_terms(model: CodecModel, scene: Scene, gen=None, relax: str = "ste", mask_mode: str = "learned",
             tau: float = 0.5, sections=("geometry", "lossy", "lossless")) -> RDTerms:
    """Distortion and per-section relaxed rates for one scene.

    ``mask_mode``: 'learned' (division network, straight-through), 'frozen'
    (division network, no gradient), 'lossy' (every Gaussian lossy) or
    'random' (a fresh random split drawn from ``gen``).
    """
    if relax not in ("ste", "noise"):
        raise ValueError(f"unknown relaxation {relax!r}")
    dtype = _dtype(model)
    n = len(scene)
    rates = {}
    if "geometry" in sections:
        rates["geometry"] = geometry_rate(model, scene, gen)

    colors = _t(scene.colors, dtype)
    hard = torch.zeros(n, dtype=torch.bool)
    m = torch.zeros(n, dtype=dtype)
    if mask_mode == "random":
        ratio = float(torch.rand((), generator=gen)) if gen is not None else 0.5
        hard = torch.rand(n, generator=gen) < ratio
        m = hard.to(dtype)
    elif mask_mode in ("learned", "frozen"):
        soft = torch.zeros(n, dtype=dtype)
        with torch.set_grad_enabled(mask_mode == "learned" and torch.is_grad_enabled()):
            for b in scene.batches:
                logits = model.division(colors[b.tokens], b.pos.to(dtype))
                soft = soft.index_put((torch.from_numpy(b.tokens.reshape(-1)),), torch.sigmoid(logits).reshape(-1))
        hard = (soft >= tau).detach()
        if mask_mode == "frozen":
            m = hard.to(dtype)
        elif relax == "noise":
            m = soft
        else:
            m = hard.to(dtype) + soft - soft.detach()
    elif mask_mode != "lossy":
        raise ValueError(f"unknown mask mode {mask_mode!r}")

    # lossy path over the whole sequence
    lossy = model.lossy
    recon = torch.zeros(n, colors.shape[1], dtype=dtype)
    lossy_bits = torch.zeros(n, dtype=dtype)
    if "lossy" in sections or "lossless" in sections:
        pes, latents = [], []
        for b in scene.batches:
            pe = lossy.section.positional(b.pos.to(dtype))
            pes.append(pe)
            latents.append(lossy.analysis(colors[b.tokens], pe))
        rounded = torch.cat([y.detach().reshape(-1, y.shape[-1]) for y in latents]).round().numpy()
        support = Support.of(rounded, rounded.shape[1])
        center, spread = (t.to(dtype) for t in support.normalizer(np.ones(rounded.shape[1])))
        ones = torch.ones(rounded.shape[1], dtype=dtype)
        for b, pe, y in zip(scene.batches, pes, latents):
            noisy = y + uniform_noise(y.shape, gen, dtype)
            ctx = noisy if relax == "noise" else y + (torch.round(y) - y).detach()
            if "lossy" in sections:
                bits, hbits = section_rate(lossy.section, b, ctx, noisy, ones, center, spread, gen=gen, pe=pe)
                lossy_bits = lossy_bits.index_put((torch.from_numpy(b.tokens.reshape(-1)),), (bits + hbits).reshape(-1))
            out = lossy.synthesis(ctx, pe)
            recon = recon.index_put((torch.from_numpy(b.tokens.reshape(-1)),), out.reshape(-1, out.shape[-1]))
    err = ((colors - recon) ** 2).mean(-1)
    distortion = COLOR_WEIGHT * ((1 - m) * err).sum() / n
    if "lossy" in sections:
        rates["lossy"] = ((1 - m) * lossy_bits).sum() / n

    if "lossless" in sections and bool(hard.any()):
        coded = hard.numpy()
        inputs = SectionInputs(scene.cells, coded)
        center, spread, lo, hi = _normalizer(scene.color_symbols[coded], scene.color_steps, dtype)
        bins = _t(scene.color_steps, dtype)
        exact = _t(dequantize_attributes(scene.color_symbols, scene.color_steps), dtype)
        lossless_bits = torch.zeros(n, dtype=dtype)
        for f, w in window_batches(n, scene.window):
            b = make_batch(inputs, f, w)
            tok = b.tokens
            flag = b.coded.to(dtype).unsqueeze(-1)
            known = recon[tok] * (1 - flag)
            values = torch.where(b.coded.unsqueeze(-1), exact[tok], known)
            bits, hbits = section_rate(
                model.color, b, values, _t(scene.color_symbols[tok], dtype), bins, center, spread, lo, hi,
                analysis_extra=flag, synthesis_extra=torch.cat([known, flag], dim=-1), gen=gen,
            )
            lossless_bits = lossless_bits.index_put((torch.from_numpy(tok.reshape(-1)),), (bits + hbits).reshape(-1))
        rates["lossless"] = (m * lossless_bits).sum() / n
    elif "lossless" in sections:
        rates["lossless"] = torch.zeros((), dtype=dtype)
    return RDTerms(distortion, rates, m.mean())


def proxy_rd_loss(terms: RDTerms, lam: float) -> torch.Tensor:
    """Attribute-space distortion plus lambda times bits per Gaussian."""
    return terms.distortion + lam * terms.rate


def division_proxy_loss(terms: RDTerms, lam: float, w: float) -> torch.Tensor:
    """RD loss plus ``w`` times the fraction of Gaussians routed to the lossless path."""
    loss = proxy_rd_loss(terms, lam)
    return loss + w * terms.lossless_fraction if w else loss


# --------------------------------------------------------------- training

_STAGE_SETUP = {
    # stage -> (trainable modules, mask mode, sections)
    "lossy_init": (("lossy",), "lossy", ("lossy",)),
    "lossless_init": (("geometry", "color"), "random", ("geometry", "lossy", "lossless")),
    "joint": (("geometry", "lossy", "color", "division"), "learned", ("geometry", "lossy", "lossless")),
}
_PREREQUISITES = {"lossy_init": (), "lossless_init": ("lossy_init",), "joint": ("lossy_init", "lossless_init")}


def step_generator(seed: int, step: int) -> torch.Generator:
    """Noise stream for one step; a resumed run draws the same numbers."""
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (1 << 63))


def _write_log(log, record):
    if log is None:
        return
    if callable(log):
        log(record)
    else:
        with open(log, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _check_finite(model, loss, stage, step):
    if not torch.isfinite(loss):
        raise TrainingDivergence(stage, step, f"loss is {float(loss.detach())}")
    bad = [name for name, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        raise TrainingDivergence(stage, step, f"non-finite gradient in {len(bad)} tensors, first '{bad[0]}'")


def _fit(model, params, objective, scenes, steps, lr, seed, clip, stage, start=0, log=None,
         checkpoint=None, checkpoint_every=0):
    """Adam over ``params``; scene and noise at each step depend only on (seed, step)."""
    opt = torch.optim.Adam(params, lr=lr)
    history = []
    model.train()
    for step in range(start, steps):
        scene = scenes[step % len(scenes)]
        loss, record = objective(scene, step_generator(seed, step))
        opt.zero_grad()
        loss.backward()
        _check_finite(model, loss, stage, step)
        if clip:
            torch.nn.utils.clip_grad_norm_(params, clip)
        opt.step()
        record = {"step": step, "stage": stage, **record}
        history.append(record)
        _write_log(log, record)
        if checkpoint is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            checkpoint(step + 1)
    model.eval()
    return history


def _train_meta(store: WeightStore | None) -> dict:
    meta = dict((store.metadata if store is not None else {}).get("train", {}))
    meta.setdefault("completed", [])
    return meta


def train_stage(config: TrainConfig, data, init: WeightStore | None = None, model_config: ModelConfig | None = None,
                log=None, checkpoint_dir=None, checkpoint_every: int = 0):
    """Run one stage of the recipe; returns (weights, per-step log records).

    ``data`` is a list of scenes or clouds.  Resuming from a checkpoint of the
    same stage continues at its recorded step.
    """
    if init is not None:
        model = CodecModel.from_store(init)
    else:
        model = CodecModel.initialized(model_config, config.seed)
    meta = _train_meta(init)
    missing = [s for s in _PREREQUISITES[config.stage] if s not in meta["completed"]]
    if missing:
        raise StageOrderError(f"stage {config.stage} needs {', '.join(missing)} first")
    start = meta.get("step", 0) if meta.get("stage") == config.stage else 0

    scenes = [d if isinstance(d, Scene) else prepare_scene(d, config.window) for d in data]
    modules, mask_mode, sections = _STAGE_SETUP[config.stage]
    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for name in modules:
        for p in getattr(model, name).parameters():
            p.requires_grad_(True)
            params.append(p)

    def objective(scene, gen):
        terms = rd_terms(model, scene, gen, "ste", mask_mode, config.tau, sections)
        loss = division_proxy_loss(terms, config.lam, config.w if config.stage == "joint" else 0.0)
        return loss, {"loss": float(loss.detach()), "rate_bits": float(terms.rate.detach()),
                      "distortion": float(terms.distortion.detach())}

    def store_at(step, done=False):
        completed = meta["completed"] + ([config.stage] if done else [])
        return model.to_store(train={"completed": completed, "stage": config.stage, "step": step,
                                     "seed": config.seed, "lam": config.lam})

    def checkpoint(step):
        path = Path(checkpoint_dir) / f"{config.stage}_{step:06d}.lcmw"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_weights(store_at(step), path)

    history = _fit(model, params, objective, scenes, config.steps, config.lr, config.seed, config.clip,
                   config.stage, start, log, checkpoint if checkpoint_dir else None, checkpoint_every)
    for p in model.parameters():
        p.requires_grad_(True)
    return store_at(config.steps, done=True), history


def lossless_fraction(store: WeightStore, scenes, tau: float = 0.5) -> float:
    model = CodecModel.from_store(store)
    with torch.no_grad():
        fr = [float(rd_terms(model, s, None, "ste", "frozen", tau, ()).lossless_fraction) for s in scenes]
    return float(np.mean(fr))


# --------------------------------------------------------------- ablation


@dataclass
class AblationBudget:
    steps: int = 300
    lr: float = 3e-3
    # one fresh scene per step: a handful of reused scenes overfits and hides the context gains
    train_scenes: int = 300
    eval_scenes: int = 3
    n: int = 2048
    window: int = 256
    seed: int = 0
    noise: float = 0.05
    length_scale: float = 0.5


def _variant(mode: str, budget: AblationBudget, context_len: int | None):
    """(model config, window, serialization order) of one ablation variant."""
    cfg = ModelConfig()
    if mode == "full":
        return cfg, budget.window, "morton"
    if mode == "no_space_ctx":
        return replace(cfg, space_context=False), budget.window, "morton"
    if mode == "no_channel_ctx":
        return replace(cfg, channel_context=False), budget.window, "morton"
    if mode == "random_serialization":
        return cfg, budget.window, "random"
    if mode == "mlp_backbone":
        return replace(cfg, backbone="mlp"), budget.window, "morton"
    if mode == "context_len":
        if not context_len or context_len < 1:
            raise ValueError("context_len needs a positive window length")
        return cfg, context_len, "morton"
    raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")


def coded_geometry_bits(model: CodecModel, scene: Scene) -> float:
    """Actual coded bits per Gaussian (hyper + symbol chunks) of the geometry section."""
    inputs = SectionInputs(scene.cells, np.ones(len(scene), dtype=bool), scene.geometry, scene.geometry_symbols)
    res = encode_section(model.geometry, inputs, scene.geometry_steps, scene.window)
    size = sum(len(c) for c in res.hyper_chunks) + sum(len(c) for c in res.symbol_chunks)
    return 8.0 * size / len(scene)


def train_geometry(cfg: ModelConfig, scenes, budget: AblationBudget, log=None) -> CodecModel:
    model = CodecModel.initialized(cfg, budget.seed)
    params = list(model.geometry.parameters())

    def objective(scene, gen):
        rate = geometry_rate(model, scene, gen)
        return rate, {"loss": float(rate.detach()), "rate_bits": float(rate.detach()), "distortion": 0.0}

    _fit(model, params, objective, scenes, budget.steps, budget.lr, budget.seed, 1.0, "geometry", log=log)
    return model


def variant_rate(mode: str, budget: AblationBudget, context_len: int | None = None, log=None) -> float:
    """Train one variant (or 'full') under ``budget``; held-out coded geometry bits/Gaussian."""
    cfg, window, order = _variant(mode, budget, context_len)
    kw = dict(n=budget.n, window=window, order=order, noise=budget.noise, length_scale=budget.length_scale)
    train = toy_scenes(budget.train_scenes, seed=budget.seed, **kw)
    held_out = toy_scenes(budget.eval_scenes, seed=budget.seed + 10_000, **kw)
    model = train_geometry(cfg, train, budget, log)
    with torch.no_grad():
        return float(np.mean([coded_geometry_bits(model, s) for s in held_out]))


def ablate(mode: str, budget: AblationBudget | None = None, context_len: int | None = None, log=None,
           full_rate: float | None = None) -> dict:
    """Held-out geometry bits/Gaussian of the full model and of one variant, trained alike."""
    budget = budget or AblationBudget()
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")
    full = variant_rate("full", budget, log=log) if full_rate is None else full_rate
    variant = variant_rate(mode, budget, context_len, log)
    label = f"context_len({context_len})" if mode == "context_len" else mode
    return {
        "mode": label,
        "full_bits_per_gaussian": full,
        "variant_bits_per_gaussian": variant,
        "ratio": variant / full,
    }
