import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mofcodec.entropy import (
    P_MIN,
    DecodeError,
    LaplaceParams,
    coding_table,
    laplace_bits,
    laplace_likelihood,
    laplace_rate,
    quantize,
    range_decode,
    range_encode,
    round_half_away,
    snap_params,
)


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_round_half_away():
    x = t([1.4, -1.5, 1.5, -0.4, 2.5, -2.5, 0.0, 3.0])
    assert round_half_away(x).tolist() == [1, -2, 2, -0.0, 3, -3, 0, 3]


def test_quantize_modes():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1000, dtype=torch.float64, generator=gen) * 5
    noisy = quantize(x, "train", gen)
    assert torch.all(noisy - x >= -0.5) and torch.all(noisy - x < 0.5)
    ints = torch.arange(-5, 6, dtype=torch.float64)
    assert torch.equal(quantize(ints, "eval"), ints)
    with pytest.raises(ValueError):
        quantize(x, "bogus")


def test_likelihood_known_value():
    p = laplace_likelihood(t(0.0), t(0.0), t(1.0))
    assert float(p) == pytest.approx(1 - math.exp(-0.5), abs=1e-12)
    assert float(laplace_bits(t(0.0), t(0.0), t(1.0))) == pytest.approx(1.3456, abs=1e-4)


def test_likelihood_matches_cdf_difference(rng):
    q = rng.integers(-30, 31, size=2000).astype(float)
    mu = rng.uniform(-10, 10, size=2000)
    b = np.exp(rng.uniform(np.log(0.05), np.log(50), size=2000))
    ref = stats.laplace.cdf(q + 0.5, mu, b) - stats.laplace.cdf(q - 0.5, mu, b)
    got = laplace_likelihood(t(q), t(mu), t(b)).numpy()
    assert np.max(np.abs(got - ref)) <= 1e-9


def test_shift_invariance():
    a = laplace_bits(t(3.0), t(3.0), t(0.7))
    b = laplace_bits(t(0.0), t(0.0), t(0.7))
    assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_bits_floor_and_scale_clamp():
    assert float(laplace_bits(t(1000.0), t(0.0), t(0.1))) == pytest.approx(16.0)
    # b = 0 is clamped, so an exact hit costs nothing and a miss costs the floor
    assert float(laplace_bits(t(0.0), t(0.0), t(0.0))) == pytest.approx(0.0, abs=1e-12)
    assert float(laplace_bits(t(1.0), t(0.0), t(0.0))) == pytest.approx(-math.log2(P_MIN))


def test_rate_monotone_in_scale_at_mode():
    bs = t([10.0, 3.0, 1.0, 0.3, 0.1])
    bits = laplace_bits(torch.zeros(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64), bs)
    assert torch.all(bits[1:] < bits[:-1])


def test_laplace_rate_sums():
    q = np.array([0.0, 1.0, -2.0])
    params = LaplaceParams(np.zeros(3), np.ones(3))
    expected = sum(float(laplace_bits(t(v), t(0.0), t(1.0))) for v in q)
    assert float(laplace_rate(q, params)) == pytest.approx(expected)


def test_gradient_flows_through_rate():
    y = t([0.3, -1.2]).requires_grad_()
    b = t([0.8, 2.0]).requires_grad_()
    laplace_bits(y, torch.zeros(2, dtype=torch.float64), b).sum().backward()
    assert torch.all(y.grad != 0) and torch.all(b.grad != 0)


def test_coding_table_is_valid():
    for off in (-32, 0, 17, 32):
        for k in (0, 60, 128, 255):
            tab = coding_table(off, k)
            freqs = np.diff(tab.cdf)
            assert tab.cdf[0] == 0 and tab.cdf[-1] == 1 << 16
            assert freqs.min() >= 1
            assert len(freqs) == 2 * tab.half_width + 2


def test_snap_params_grid():
    c, o, k = snap_params([0.26, -1.5, 7.0], [1.0, 1e-9, 1e9])
    assert c.tolist() == [0, -2, 7]
    assert o.tolist() == [17, 32, 0]
    assert k[1] == 0 and k[2] == 255


def test_empty_roundtrip():
    params = LaplaceParams(np.zeros(0), np.ones(0))
    data = range_encode(np.zeros(0, dtype=int), params)
    assert data == b""
    assert range_decode(data, params, 0).size == 0
    with pytest.raises(DecodeError):
        range_decode(b"\x01", params, 0)


def test_single_symbol_roundtrip():
    params = LaplaceParams(np.zeros(1), np.ones(1))
    assert range_decode(range_encode(np.array([0]), params), params, 1).tolist() == [0]


def test_escape_symbols_roundtrip():
    symbols = np.array([0, 10**6, -(10**9), 37, 2**40, -1])
    params = LaplaceParams(np.zeros(6), np.full(6, 0.5))
    data = range_encode(symbols, params)
    assert range_decode(data, params, 6).tolist() == symbols.tolist()


def test_rejects_non_integers():
    with pytest.raises(ValueError):
        range_encode(np.array([0.5]), LaplaceParams(np.zeros(1), np.ones(1)))


def test_trailing_bytes_rejected():
    params = LaplaceParams(np.zeros(50), np.full(50, 3.0))
    symbols = np.random.default_rng(0).integers(-5, 6, 50)
    data = range_encode(symbols, params)
    with pytest.raises(DecodeError):
        range_decode(data + b"\x07", params, 50)


def test_garbage_raises_only_decode_error():
    params = LaplaceParams(np.zeros(40), np.full(40, 0.3))
    rng = np.random.default_rng(5)
    for _ in range(50):
        junk = bytes(rng.integers(0, 256, rng.integers(0, 12)).tolist())
        try:
            range_decode(junk, params, 40)
        except DecodeError:
            pass


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-200, 200), min_size=1, max_size=60),
       st.floats(-20, 20), st.floats(0.01, 100))
def test_roundtrip_property(symbols, mu, b):
    n = len(symbols)
    params = LaplaceParams(np.full(n, mu), np.full(n, b))
    data = range_encode(np.array(symbols), params)
    assert range_decode(data, params, n).tolist() == symbols


def test_coded_size_tracks_estimate(rng):
    mu = rng.uniform(-3, 3, 5000)
    b = np.exp(rng.uniform(np.log(0.2), np.log(20), 5000))
    q = np.round(rng.laplace(mu, b))
    data = range_encode(q, LaplaceParams(mu, b))
    est = float(laplace_rate(q, LaplaceParams(mu, b)))
    assert 8 * len(data) <= 1.01 * est + 64
    assert 8 * len(data) >= 0.97 * est


def test_truncated_payload_rejected():
    params = LaplaceParams(np.zeros(200), np.full(200, 4.0))
    symbols = np.random.default_rng(1).integers(-9, 10, 200)
    data = range_encode(symbols, params)
    with pytest.raises(DecodeError):
        range_decode(data[:-1], params, 200)
