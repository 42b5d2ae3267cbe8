"""Synthetic Gaussian clouds with spatially and cross-channel correlated attributes.

Each attribute channel is a fixed linear mix of a few latent channels.  Latent
channels are a smooth random-Fourier field over positions plus per-Gaussian
noise shared by every attribute, so nearby Gaussians look alike and the
attributes of one Gaussian move together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import SH_DIM, GaussianCloud

FIELD_DIM = 4
SHARED_DIM = 3


@dataclass(frozen=True)
class SynthSceneSpec:
    n: int = 4096
    distribution: str = "uniform"  # or "clustered"
    length_scale: float = 0.15  # fraction of the unit bbox
    noise: float = 0.3
    seed: int = 0
    n_basis: int = 64

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one Gaussian")
        if self.length_scale <= 0:
            raise ValueError("length scale must be positive")
        if self.distribution not in ("uniform", "clustered"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.n_basis < 1 or self.noise < 0:
            raise ValueError("need n_basis >= 1 and noise >= 0")


def _positions(spec: SynthSceneSpec, rng) -> np.ndarray:
    if spec.distribution == "uniform":
        return rng.random((spec.n, 3))
    centers = rng.random((8, 3))
    which = rng.integers(0, 8, spec.n)
    return np.clip(centers[which] + 0.06 * rng.standard_normal((spec.n, 3)), 0.0, 1.0)


def fourier_field(positions, length_scale: float, n_basis: int, dims: int, rng) -> np.ndarray:
    """Approximate draw of a squared-exponential Gaussian process with unit variance."""
    omega = rng.standard_normal((n_basis, 3)) / length_scale
    phase = rng.uniform(0, 2 * np.pi, n_basis)
    weights = rng.standard_normal((n_basis, dims))
    features = np.sqrt(2.0 / n_basis) * np.cos(positions @ omega.T + phase)
    return features @ weights


def synth_cloud(spec: SynthSceneSpec) -> GaussianCloud:
    rng = np.random.default_rng(spec.seed)
    pos = _positions(spec, rng)
    field = fourier_field(pos, spec.length_scale, spec.n_basis, FIELD_DIM, rng)
    shared = spec.noise * rng.standard_normal((spec.n, SHARED_DIM))
    latent = np.concatenate([field, shared], axis=1)

    # attribute mixes are drawn from a fixed stream so all scenes share them
    mix = np.random.default_rng(12345)
    geo = latent @ mix.standard_normal((latent.shape[1], 8)) / np.sqrt(latent.shape[1])
    col = latent @ mix.standard_normal((latent.shape[1], SH_DIM)) / np.sqrt(latent.shape[1])
    geo += 0.1 * spec.noise * rng.standard_normal(geo.shape)
    col += 0.1 * spec.noise * rng.standard_normal(col.shape)

    amp = np.concatenate([np.full(3, 0.5), 0.08 * 0.97 ** np.arange(SH_DIM - 3)])
    return GaussianCloud(
        positions=pos.astype(np.float32),
        scales=(-4.5 + 0.4 * geo[:, 0:3]).astype(np.float32),
        rotations=(np.array([1.0, 0.0, 0.0, 0.0]) + 0.3 * geo[:, 3:7]).astype(np.float32),
        opacity=(0.5 + 1.2 * geo[:, 7:8]).astype(np.float32),
        colors=(col * amp).astype(np.float32),
    )


def neighbor_similarity(cloud: GaussianCloud, rng=None, pairs: int = 2000) -> tuple[float, float]:
    """Mean cosine similarity of centered attributes: nearest neighbors vs random pairs."""
    rng = rng or np.random.default_rng(0)
    attrs = np.concatenate([cloud.geometry, cloud.colors], axis=1).astype(np.float64)
    attrs = (attrs - attrs.mean(0)) / (attrs.std(0) + 1e-12)
    idx = rng.choice(len(cloud), size=min(pairs, len(cloud)), replace=False)
    d = ((cloud.positions[idx, None, :] - cloud.positions[None, :, :]) ** 2).sum(-1)
    d[np.arange(len(idx)), idx] = np.inf
    nn = d.argmin(1)
    other = rng.integers(0, len(cloud), len(idx))

    def cos(a, b):
        return np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12)

    return float(cos(attrs[idx], attrs[nn]).mean()), float(cos(attrs[idx], attrs[other]).mean())
