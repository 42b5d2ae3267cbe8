"""Probability models consumed by the entropy coder.

Every model is written against torch so the same code serves as a float32
training likelihood and as a float64 evaluator for coding tables.  Tables are
quantized to 16-bit integer CDFs with a one-count floor and largest-remainder
rounding, which makes the coder exact with respect to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import torch
from torch import nn

SIGMA_MIN = 0.11
LOGISTIC_SCALE_MIN = 1e-6
LOG_SCALE_MAX = 10.0
PRECISION = 16
TOTAL = 1 << PRECISION
LIKELIHOOD_MIN = 1e-9


# ----------------------------------------------------------- parameters


@dataclass
class LogisticMixtureParams:
    weights: torch.Tensor  # (..., K), post-softmax
    means: torch.Tensor  # (..., K)
    log_scales: torch.Tensor  # (..., K)

    @classmethod
    def from_raw(cls, raw: torch.Tensor, n_mix: int) -> "LogisticMixtureParams":
        """Split a (..., 3K) head output into mixture parameters."""
        logits, means, log_scales = raw.split(n_mix, dim=-1)
        return cls(torch.softmax(logits, dim=-1), means, log_scales)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales.clamp(max=LOG_SCALE_MAX)).clamp_min(LOGISTIC_SCALE_MIN)

    def validate(self):
        if bool((self.weights < 0).any()) or not torch.allclose(
            self.weights.sum(-1).double(), torch.ones((), dtype=torch.float64), atol=1e-6
        ):
            raise ValueError("mixture weights must be nonnegative and sum to 1")


@dataclass
class GaussianParams:
    mean: torch.Tensor
    scale: torch.Tensor

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "GaussianParams":
        mean, log_scale = raw.unbind(-1)
        return cls(mean, torch.exp(log_scale.clamp(max=LOG_SCALE_MAX)).clamp_min(SIGMA_MIN))


# ------------------------------------------------------ stable differences


def _sigmoid_diff(upper, lower):
    # sigma(u) - sigma(l), evaluated on the side of zero that avoids cancellation
    flip = (upper + lower) > 0
    return torch.where(
        flip,
        torch.sigmoid(-lower) - torch.sigmoid(-upper),
        torch.sigmoid(upper) - torch.sigmoid(lower),
    )


def _ndtr_diff(upper, lower):
    flip = (upper + lower) > 0
    return torch.where(
        flip,
        torch.special.ndtr(-lower) - torch.special.ndtr(-upper),
        torch.special.ndtr(upper) - torch.special.ndtr(lower),
    )


# standardized edge used for an open tail; sigma and Phi saturate to exactly 0 / 1
_OPEN = 1e4


def _edges(x, bin, lo, hi):
    """Bin edges of ``x`` plus masks of the end bins that absorb the open tails."""
    x = torch.as_tensor(x)
    upper = x * bin + bin / 2
    lower = x * bin - bin / 2
    open_lo = None if lo is None else x <= torch.as_tensor(lo)
    open_hi = None if hi is None else x >= torch.as_tensor(hi)
    return upper, lower, open_lo, open_hi


def _standardized(edge, center, scale, open_mask, sign):
    z = (edge - center) / scale
    # masking after the division keeps gradients finite on the open side
    return z if open_mask is None else torch.where(open_mask, torch.full_like(z, sign * _OPEN), z)


def logistic_mixture_pmf(x, params: LogisticMixtureParams, bin=1.0, lo=None, hi=None):
    """P(x) = sum_k w_k [sigma((x*bin + bin/2 - mu_k)/s_k) - sigma((x*bin - bin/2 - mu_k)/s_k)].

    ``lo``/``hi`` make the end bins absorb the open tails.  ``x`` broadcasts
    against the leading dims of the parameters.
    """
    upper, lower, open_lo, open_hi = _edges(x, bin, lo, hi)
    s = params.scales
    expand = (lambda m: None if m is None else m.unsqueeze(-1))
    u = _standardized(upper.unsqueeze(-1), params.means, s, expand(open_hi), 1.0)
    l_ = _standardized(lower.unsqueeze(-1), params.means, s, expand(open_lo), -1.0)
    return (params.weights * _sigmoid_diff(u, l_)).sum(-1)


def discretized_gaussian_pmf(x, mean, scale, bin=1.0, lo=None, hi=None):
    upper, lower, open_lo, open_hi = _edges(x, bin, lo, hi)
    scale = torch.as_tensor(scale, dtype=upper.dtype if upper.is_floating_point() else None).clamp_min(SIGMA_MIN)
    return _ndtr_diff(_standardized(upper, mean, scale, open_hi, 1.0), _standardized(lower, mean, scale, open_lo, -1.0))


# ------------------------------------------------------ factorized density


class FactorizedDensity(nn.Module):
    """Per-channel learned monotone CDF for hyper latents.

    Each channel composes four affine stages (1 -> 3 -> 3 -> 3 -> 1) whose
    matrices are kept positive by softplus, with tanh-gated nonlinearities
    between them.  The default init is close to a logistic centred at zero.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 4.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, M) -> (C, 1, M)."""
        logits = x
        for i, m in enumerate(self.matrices):
            logits = torch.matmul(nn.functional.softplus(m), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """x: (..., C) -> CDF values of the same shape."""
        flat = x.reshape(-1, self.channels).transpose(0, 1).unsqueeze(1)
        out = torch.sigmoid(self.logits_cumulative(flat))
        return out.squeeze(1).transpose(0, 1).reshape(x.shape)

    def pmf(self, x: torch.Tensor) -> torch.Tensor:
        """c(x + 1/2) - c(x - 1/2) per channel, x: (..., C)."""
        flat = x.reshape(-1, self.channels).transpose(0, 1).unsqueeze(1)
        upper = self.logits_cumulative(flat + 0.5)
        lower = self.logits_cumulative(flat - 0.5)
        p = _sigmoid_diff(upper, lower).abs()
        return p.squeeze(1).transpose(0, 1).reshape(x.shape)

    def likelihood(self, x):
        return self.pmf(x).clamp_min(LIKELIHOOD_MIN)


def factorized_pmf(x, density: FactorizedDensity):
    return density.pmf(torch.as_tensor(x, dtype=density.matrices[0].dtype))


# ---------------------------------------------------------------- tables


@dataclass
class CdfTable:
    """Rows of 16-bit cumulative counts; row i covers symbols lo[i] .. lo[i] + size[i] - 1."""

    cum: np.ndarray  # (n, S + 1) int64, cum[:, 0] == 0, cum[:, size] == 2**16
    lo: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.cum = np.atleast_2d(np.asarray(self.cum, dtype=np.int64))
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=np.int64), (self.cum.shape[0],)).copy()

    def __len__(self):
        return self.cum.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.cum, axis=1)

    @property
    def sizes(self) -> np.ndarray:
        return (self.counts > 0).sum(axis=1)

    def rows(self, idx) -> "CdfTable":
        return CdfTable(self.cum[idx], self.lo[idx])

    def start_freq(self, symbols, rows=None) -> tuple[np.ndarray, np.ndarray]:
        """Interval (start, freq) of each symbol under its row (``rows`` maps symbol -> row)."""
        symbols = np.asarray(symbols, dtype=np.int64)
        rows = np.arange(len(symbols)) if rows is None else np.asarray(rows)
        k = symbols - self.lo[rows]
        S = self.cum.shape[1] - 1
        bad = (k < 0) | (k >= S)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"symbol {int(symbols[i])} outside table support at position {i}")
        start = self.cum[rows, k]
        freq = self.cum[rows, k + 1] - start
        if (freq <= 0).any():
            i = int(np.flatnonzero(freq <= 0)[0])
            raise ValueError(f"symbol {int(symbols[i])} outside table support at position {i}")
        return start, freq

    def check(self):
        c = self.counts
        sizes = self.sizes
        ok = np.all(self.cum[:, 0] == 0) and np.all(self.cum[:, -1] == TOTAL)
        valid = np.arange(c.shape[1])[None, :] < sizes[:, None]
        ok = ok and np.all(c[valid] >= 1) and np.all(c[~valid] == 0)
        if not ok:
            raise ValueError("CDF table violates total/floor/monotonicity invariants")


_BUCKETS = 256
# set by the self-test's fault injection only
DEBUG_FLIP_COUNT = False


@numba.njit(cache=True)
def _quantize_row(pmf, size, counts):
    """Largest-remainder rounding of ``pmf[:size]`` onto 2**16 with a one-count floor."""
    total = 0.0
    for k in range(size):
        total += pmf[k]
    budget = TOTAL - size
    frac = np.empty(size)
    assigned = 0
    for k in range(size):
        p = pmf[k] / total if total > 0 else 1.0 / size
        q = p * budget
        base = np.floor(q)
        counts[k] = 1 + np.int64(base)
        assigned += np.int64(base)
        frac[k] = q - base
    rem = budget - assigned
    if rem > 0:
        # the rem largest remainders get one more count, ties going to the smaller
        # index; a histogram finds the boundary bucket so only it needs sorting
        hist = np.zeros(_BUCKETS, dtype=np.int64)
        for k in range(size):
            hist[min(int(frac[k] * _BUCKETS), _BUCKETS - 1)] += 1
        above = 0
        cut = _BUCKETS - 1
        while above + hist[cut] < rem:
            above += hist[cut]
            cut -= 1
        tied = np.empty(hist[cut], dtype=np.int64)
        t = 0
        for k in range(size):
            bk = min(int(frac[k] * _BUCKETS), _BUCKETS - 1)
            if bk > cut:
                counts[k] += 1
            elif bk == cut:
                tied[t] = k
                t += 1
        order = np.argsort(-frac[tied], kind="mergesort")
        for r in range(rem - above):
            counts[tied[order[r]]] += 1
    for k in range(size, counts.shape[0]):
        counts[k] = 0


@numba.njit(cache=True, parallel=True)
def _quantize_rows(pmf, sizes, counts):
    for i in numba.prange(pmf.shape[0]):
        _quantize_row(pmf[i], sizes[i], counts[i])


LOGISTIC, GAUSSIAN = 0, 1
# standardized distance beyond which a component's CDF is taken as exactly 0 or 1
# (tail mass below 1e-13, far under the one-count floor of 2**-16)
_SATURATION = (30.0, 8.0)


@numba.njit(cache=True)
def _component_cdf(z, kind):
    if kind == LOGISTIC:
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@numba.njit(cache=True, parallel=True)
def _parametric_cum(weights, means, scales, lo, sizes, bins, kind, cum):
    n, K = weights.shape
    S = cum.shape[1] - 1
    for i in numba.prange(n):
        size = sizes[i]
        b = bins[i]
        lo_i = lo[i]
        # edges (lo + k - 1/2) * bin for k = 1 .. size - 1; outer edges absorb the tails
        first = size
        last = 0
        t = _SATURATION[kind]
        for m in range(K):
            a_k = (means[i, m] - t * scales[i, m]) / b - lo_i + 0.5
            z_k = (means[i, m] + t * scales[i, m]) / b - lo_i + 0.5
            a_i = int(math.floor(min(max(a_k, 1.0), float(size))))
            z_i = int(math.ceil(min(max(z_k, 0.0), size - 1.0)))
            first = min(first, a_i)
            last = max(last, z_i)
        cdf = np.zeros(size + 1)
        for k in range(1, size):
            if k < first:
                cdf[k] = 0.0
            elif k > last:
                cdf[k] = 1.0
            else:
                e = (lo_i + k - 0.5) * b
                acc = 0.0
                for m in range(K):
                    acc += weights[i, m] * _component_cdf((e - means[i, m]) / scales[i, m], kind)
                cdf[k] = acc
        cdf[size] = 1.0
        pmf = np.empty(size)
        for k in range(size):
            d = cdf[k + 1] - cdf[k]
            pmf[k] = d if d > 0 else 0.0
        counts = np.empty(S, dtype=np.int64)
        _quantize_row(pmf, size, counts)
        cum[i, 0] = 0
        for k in range(S):
            cum[i, k + 1] = cum[i, k] + counts[k]


def _table(weights, means, scales, lo, sizes, bins, kind) -> CdfTable:
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    n = weights.shape[0]
    lo = np.broadcast_to(np.asarray(lo, dtype=np.int64), (n,)).copy()
    sizes = np.broadcast_to(np.asarray(sizes, dtype=np.int64), (n,)).copy()
    bins = np.broadcast_to(np.asarray(bins, dtype=np.float64), (n,)).copy()
    if n and (sizes.max() > TOTAL or sizes.min() < 1):
        raise ValueError(f"support of {int(sizes.max())} symbols too large for 16-bit tables")
    S = int(sizes.max()) if n else 1
    cum = np.zeros((n, S + 1), dtype=np.int64)
    if n:
        _parametric_cum(
            weights, np.ascontiguousarray(means, dtype=np.float64),
            np.ascontiguousarray(scales, dtype=np.float64), lo, sizes, bins, kind, cum,
        )
    return CdfTable(cum, lo)


def mixture_table(params: LogisticMixtureParams, lo, sizes, bin=1.0) -> CdfTable:
    """Quantized tables for a batch of mixture rows over per-row supports ``lo .. lo + size - 1``."""
    with torch.no_grad():
        return _table(
            params.weights.double().reshape(-1, params.weights.shape[-1]).numpy(),
            params.means.double().reshape(-1, params.means.shape[-1]).numpy(),
            params.scales.double().reshape(-1, params.means.shape[-1]).numpy(),
            lo, sizes, bin, LOGISTIC,
        )


def gaussian_table(params: GaussianParams, lo, sizes, bin=1.0) -> CdfTable:
    with torch.no_grad():
        mean = params.mean.double().reshape(-1, 1).numpy()
        return _table(np.ones_like(mean), mean, params.scale.double().reshape(-1, 1).numpy(), lo, sizes, bin, GAUSSIAN)


def quantize_pmf(pmf, sizes=None) -> np.ndarray:
    """Integer counts (n, S) summing to 2**16 per row, each valid symbol >= 1."""
    pmf = np.ascontiguousarray(np.atleast_2d(np.asarray(pmf, dtype=np.float64)))
    n, S = pmf.shape
    sizes = np.full(n, S, dtype=np.int64) if sizes is None else np.asarray(sizes, dtype=np.int64)
    if np.any(sizes > TOTAL) or np.any(sizes < 1):
        raise ValueError(f"support of {int(sizes.max())} symbols too large for 16-bit tables")
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise ValueError("pmf must be finite and nonnegative")
    if np.any(pmf.sum(axis=1) > 1 + 1e-6):
        raise ValueError("pmf sums to more than 1")
    counts = np.empty((n, S), dtype=np.int64)
    _quantize_rows(pmf, sizes, counts)
    if DEBUG_FLIP_COUNT and n and sizes[0] > 1:
        # deliberate fault for self-test: move one count between the first two symbols
        d = 1 if counts[0, 1] > 1 else -1
        counts[0, 0] += d
        counts[0, 1] -= d
    return counts


def build_cdf_table(pmf, lo=0, sizes=None) -> CdfTable:
    counts = quantize_pmf(pmf, sizes)
    cum = np.zeros((counts.shape[0], counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cum[:, 1:])
    return CdfTable(cum, lo)


def rate_bits(symbols, table: CdfTable, rows=None) -> float:
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return 0.0
    _, freq = table.start_freq(symbols, rows)
    return float(np.sum(PRECISION - np.log2(freq)))


# ---------------------------------------------- grids for coding tables


def _grid_edges(lo, sizes, bin, dtype):
    lo = torch.as_tensor(np.asarray(lo), dtype=dtype)
    sizes_t = torch.as_tensor(np.asarray(sizes))
    S = int(sizes_t.max())
    k = torch.arange(S + 1, dtype=dtype)
    edges = (lo.unsqueeze(-1) + k - 0.5) * torch.as_tensor(bin, dtype=dtype).reshape(-1, 1)
    inner = (k.unsqueeze(0) > 0) & (k.unsqueeze(0) < sizes_t.unsqueeze(-1))
    return edges, inner, k, sizes_t


def _cdf_to_pmf(cdf, inner, k, sizes):
    cdf = torch.where(inner, cdf, (k.unsqueeze(0) >= sizes.unsqueeze(-1)).to(cdf.dtype))
    return (cdf[:, 1:] - cdf[:, :-1]).clamp_min(0.0)


def logistic_mixture_grid(params: LogisticMixtureParams, lo, sizes, bin=1.0) -> np.ndarray:
    """(n, S) pmf rows over per-row supports, tails absorbed, padding zeroed."""
    dt = torch.float64
    edges, inner, k, sizes_t = _grid_edges(lo, sizes, bin, dt)
    w, mu, s = params.weights.to(dt), params.means.to(dt), params.scales.to(dt)
    cdf = (w.unsqueeze(1) * torch.sigmoid((edges.unsqueeze(-1) - mu.unsqueeze(1)) / s.unsqueeze(1))).sum(-1)
    return _cdf_to_pmf(cdf, inner, k, sizes_t).numpy()


def gaussian_grid(params: GaussianParams, lo, sizes, bin=1.0) -> np.ndarray:
    dt = torch.float64
    edges, inner, k, sizes_t = _grid_edges(lo, sizes, bin, dt)
    mu, s = params.mean.to(dt).unsqueeze(-1), params.scale.to(dt).unsqueeze(-1)
    cdf = torch.special.ndtr((edges - mu) / s)
    return _cdf_to_pmf(cdf, inner, k, sizes_t).numpy()


def factorized_grid(density: FactorizedDensity, lo, sizes) -> np.ndarray:
    """One pmf row per channel of ``density``."""
    dt = density.matrices[0].dtype
    edges, inner, k, sizes_t = _grid_edges(lo, sizes, 1.0, torch.float64)
    with torch.no_grad():
        flat = edges.to(dt).unsqueeze(1)  # (C, 1, S+1)
        cdf = torch.sigmoid(density.logits_cumulative(flat)).squeeze(1).to(torch.float64)
    return _cdf_to_pmf(cdf, inner, k, sizes_t).numpy()
