import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lcmcodec import probability
from lcmcodec.probability import (
    TOTAL,
    CdfTable,
    FactorizedDensity,
    GaussianParams,
    LogisticMixtureParams,
    build_cdf_table,
    discretized_gaussian_pmf,
    factorized_grid,
    gaussian_grid,
    gaussian_table,
    logistic_mixture_grid,
    logistic_mixture_pmf,
    mixture_table,
    quantize_pmf,
    rate_bits,
)
from lcmcodec.selftest import reference_counts


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def Phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def single(mu, s, dtype=torch.float64):
    t = lambda v: torch.tensor([[v]], dtype=dtype)
    return LogisticMixtureParams(t(1.0), t(mu), t(math.log(s)))


# ----------------------------------------------------------- point values


def test_single_logistic_at_zero():
    p = logistic_mixture_pmf(torch.tensor([0.0], dtype=torch.float64), single(0.0, 1.0))
    assert float(p) == pytest.approx(sigmoid(0.5) - sigmoid(-0.5), abs=1e-12)
    assert float(p) == pytest.approx(0.2449187, abs=1e-6)


def test_gaussian_at_mean():
    p = discretized_gaussian_pmf(torch.tensor(0.0, dtype=torch.float64), 0.0, 1.0)
    assert float(p) == pytest.approx(2 * Phi(0.5) - 1, abs=1e-12)
    assert float(p) == pytest.approx(0.3829249, abs=1e-6)


def test_gaussian_scale_floor():
    tiny = discretized_gaussian_pmf(torch.tensor(0.0, dtype=torch.float64), 0.0, 1e-6)
    assert float(tiny) == pytest.approx(2 * Phi(0.5 / probability.SIGMA_MIN) - 1, abs=1e-12)


def test_bin_width_scales_edges():
    p = logistic_mixture_pmf(torch.tensor([2.0], dtype=torch.float64), single(1.0, 0.7), bin=0.5)
    assert float(p) == pytest.approx(sigmoid((1.25 - 1) / 0.7) - sigmoid((0.75 - 1) / 0.7), abs=1e-12)


def test_far_tail_is_tiny_but_finite():
    p = logistic_mixture_pmf(torch.tensor([200.0], dtype=torch.float64), single(0.0, 1.0))
    assert 0 < float(p) < 1e-80
    g = discretized_gaussian_pmf(torch.tensor(40.0, dtype=torch.float64), 0.0, 1.0)
    assert float(g) >= 0 and math.isfinite(float(g))


def test_open_tails_sum_to_one():
    x = torch.arange(-3, 4, dtype=torch.float64)
    for mu in (-10.0, 0.3, 25.0):
        p = logistic_mixture_pmf(x, single(mu, 1.5), lo=-3, hi=3)
        assert float(p.sum()) == pytest.approx(1.0, abs=1e-12)
        g = discretized_gaussian_pmf(x, mu, 1.5, lo=-3, hi=3)
        assert float(g.sum()) == pytest.approx(1.0, abs=1e-12)


def test_open_tail_gradients_finite():
    mu = torch.tensor([[0.0]], dtype=torch.float64, requires_grad=True)
    params = LogisticMixtureParams(torch.ones(1, 1, dtype=torch.float64), mu, torch.zeros(1, 1, dtype=torch.float64))
    p = logistic_mixture_pmf(torch.tensor([3.0], dtype=torch.float64), params, lo=-3, hi=3)
    p.log().sum().backward()
    assert torch.isfinite(mu.grad).all()


def test_mixture_weights_validated():
    bad = LogisticMixtureParams(torch.tensor([[0.7, 0.7]]), torch.zeros(1, 2), torch.zeros(1, 2))
    with pytest.raises(ValueError, match="sum to 1"):
        bad.validate()


# ----------------------------------------------------------- fuzzed sums


@given(
    st.lists(st.floats(0.05, 1.0), min_size=1, max_size=4),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-3, 2), min_size=4, max_size=4),
    st.sampled_from([0.25, 1.0, 3.0]),
)
def test_mixture_sums_to_one_over_wide_grid(w, mus, log_s, bin):
    K = len(w)
    w = torch.tensor(w, dtype=torch.float64)
    params = LogisticMixtureParams((w / w.sum())[None], torch.tensor(mus[:K], dtype=torch.float64)[None],
                                   torch.tensor(log_s[:K], dtype=torch.float64)[None])
    x = torch.arange(-4000, 4001, dtype=torch.float64)
    p = logistic_mixture_pmf(x, params, bin=bin)
    assert torch.all(p >= 0)
    assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)


@given(st.floats(-50, 50), st.floats(-3, 3))
def test_gaussian_sums_to_one(mu, log_s):
    x = torch.arange(-200, 201, dtype=torch.float64)
    p = discretized_gaussian_pmf(x, mu, math.exp(log_s))
    assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)


def test_logistic_matches_closed_form(rng):
    for _ in range(50):
        mu, s, x = rng.normal() * 3, math.exp(rng.normal()), int(rng.integers(-6, 7))
        got = float(logistic_mixture_pmf(torch.tensor([float(x)], dtype=torch.float64), single(mu, s)))
        assert got == pytest.approx(sigmoid((x + 0.5 - mu) / s) - sigmoid((x - 0.5 - mu) / s), abs=1e-12)


# ---------------------------------------------------------- quantization


def test_quantize_uniform():
    counts = quantize_pmf(np.full((1, 4), 0.25))[0]
    assert counts.tolist() == [TOTAL // 4] * 4


def test_quantize_floor_on_zero_mass():
    counts = quantize_pmf(np.array([[1.0, 0.0, 0.0]]))[0]
    assert counts.tolist() == [TOTAL - 2, 1, 1]


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_pmf(np.array([[0.5, -0.1]]))
    with pytest.raises(ValueError):
        quantize_pmf(np.array([[0.5, np.nan]]))
    with pytest.raises(ValueError, match="too large"):
        quantize_pmf(np.zeros((1, TOTAL + 1)))


@given(st.integers(1, 400), st.sampled_from([0.01, 0.3, 1.0, 50.0]), st.integers(0, 10_000))
def test_quantize_matches_reference(S, alpha, seed):
    p = np.random.default_rng(seed).dirichlet(np.full(S, alpha))
    counts = quantize_pmf(p[None])[0]
    assert counts.sum() == TOTAL
    assert counts.min() >= 1
    assert counts.tolist() == reference_counts(p)


def test_quantize_reference_with_ties():
    p = np.array([1, 1, 1, 1, 1, 1, 1], dtype=float) / 7
    assert quantize_pmf(p[None])[0].tolist() == reference_counts(p)


@given(st.integers(1, 60), st.integers(0, 10_000))
def test_quantize_respects_sizes(S, seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(1, S + 1))
    p = np.zeros(S)
    p[:size] = rng.dirichlet(np.ones(size))
    table = build_cdf_table(p[None], lo=-3, sizes=[size])
    table.check()
    assert table.sizes.tolist() == [size]
    assert table.counts[0, :size].tolist() == reference_counts(p[:size])


def test_table_check_catches_violations():
    with pytest.raises(ValueError, match="invariants"):
        CdfTable(np.array([[0, 10, 10, TOTAL]]), 0).check()  # zero count inside the support
    with pytest.raises(ValueError, match="invariants"):
        CdfTable(np.array([[0, 10, TOTAL - 1]]), 0).check()


def test_start_freq_and_rate():
    table = build_cdf_table(np.array([[0.5, 0.25, 0.25]]), lo=-1)
    start, freq = table.start_freq([0], [0])
    assert (int(start[0]), int(freq[0])) == (TOTAL // 2, TOTAL // 4)
    assert rate_bits([-1, 0, 1], table, [0, 0, 0]) == pytest.approx(1 + 2 + 2)
    with pytest.raises(ValueError, match="outside table support"):
        table.start_freq([2], [0])


# -------------------------------------------------------- parametric tables


def _ref_table(cdf_fn, lo, size, bin):
    edges = [(lo + k - 0.5) * bin for k in range(1, size)]
    cdf = [0.0] + [cdf_fn(e) for e in edges] + [1.0]
    return reference_counts([max(cdf[k + 1] - cdf[k], 0.0) for k in range(size)])


def test_mixture_table_matches_reference(rng):
    K = 3
    w = torch.softmax(torch.tensor(rng.normal(size=(20, K))), -1)
    mu = torch.tensor(rng.normal(size=(20, K)) * 5)
    ls = torch.tensor(rng.normal(size=(20, K)) - 0.5)
    params = LogisticMixtureParams(w, mu, ls)
    lo = rng.integers(-12, -2, 20)
    sizes = rng.integers(1, 25, 20)
    bins = 1.0
    table = mixture_table(params, lo, sizes, bins)
    table.check()
    s = params.scales
    for i in range(20):
        fn = lambda e: sum(float(w[i, k]) * sigmoid((e - float(mu[i, k])) / float(s[i, k])) for k in range(K))
        assert table.counts[i, : sizes[i]].tolist() == _ref_table(fn, int(lo[i]), int(sizes[i]), bins)


def test_gaussian_table_matches_reference(rng):
    mean = torch.tensor(rng.normal(size=15) * 4)
    scale = torch.tensor(np.exp(rng.normal(size=15)))
    table = gaussian_table(GaussianParams(mean, scale), -10, 21, 0.5)
    for i in range(15):
        fn = lambda e: Phi((e - float(mean[i])) / float(scale[i]))
        assert table.counts[i].tolist() == _ref_table(fn, -10, 21, 0.5)


def test_grids_match_pmf_functions(rng):
    params = LogisticMixtureParams(torch.tensor([[0.3, 0.7]], dtype=torch.float64),
                                   torch.tensor([[-1.0, 2.0]], dtype=torch.float64),
                                   torch.tensor([[0.0, -0.5]], dtype=torch.float64))
    x = torch.arange(-5, 6, dtype=torch.float64)
    grid = logistic_mixture_grid(params, [-5], [11])[0]
    direct = logistic_mixture_pmf(x, LogisticMixtureParams(*(t.expand(11, 2) for t in
                                  (params.weights, params.means, params.log_scales))), lo=-5, hi=5)
    np.testing.assert_allclose(grid, direct.numpy(), atol=1e-12)
    g = gaussian_grid(GaussianParams(torch.tensor([0.4], dtype=torch.float64), torch.tensor([1.3], dtype=torch.float64)),
                      [-5], [11])[0]
    np.testing.assert_allclose(g, discretized_gaussian_pmf(x, 0.4, 1.3, lo=-5, hi=5).numpy(), atol=1e-12)


# ---------------------------------------------------------- factorized


def test_factorized_density_is_monotone_cdf():
    torch.manual_seed(0)
    d = FactorizedDensity(3).double()
    with torch.no_grad():
        for m in d.matrices:
            m.normal_()
    x = torch.linspace(-30, 30, 601, dtype=torch.float64)[:, None].expand(-1, 3)
    cdf = d.cdf(x)
    assert torch.all(cdf[1:] >= cdf[:-1] - 1e-12)
    assert torch.all(cdf[0] < 1e-3) and torch.all(cdf[-1] > 1 - 1e-3)


def test_factorized_grid_sums_to_one():
    torch.manual_seed(1)
    d = FactorizedDensity(4)
    grid = factorized_grid(d, [-8] * 4, [17] * 4)
    np.testing.assert_allclose(grid.sum(1), 1.0, atol=1e-9)
    assert np.all(grid >= 0)


def test_fault_injection_breaks_reference_agreement(monkeypatch):
    p = np.array([0.3, 0.3, 0.4])
    monkeypatch.setattr(probability, "DEBUG_FLIP_COUNT", True)
    flipped = quantize_pmf(p[None])[0].tolist()
    assert sum(flipped) == TOTAL
    assert flipped != reference_counts(p)
