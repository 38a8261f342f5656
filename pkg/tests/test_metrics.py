import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from mofcodec.metrics import (
    DB_CAP,
    DomainError,
    RDCurve,
    bd_rate,
    bits_per_pixel,
    entropy_gap,
    ms_ssim,
    ms_ssim_db,
    ms_ssim_scales,
    read_curve,
    write_curve,
)


def _frame(seed, shape=(3, 64, 64)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_ms_ssim_self_is_one():
    x = _frame(0)
    assert abs(float(ms_ssim(x, x)) - 1.0) < 1e-8


def test_ms_ssim_symmetric_and_batched():
    a, b = _frame(1, (2, 3, 48, 48)), _frame(2, (2, 3, 48, 48))
    ab, ba = ms_ssim(a, b), ms_ssim(b, a)
    assert ab.shape == (2,)
    assert torch.allclose(ab, ba, atol=1e-12)
    assert float(ms_ssim(a[1], b[1])) == pytest.approx(float(ab[1]), abs=1e-12)


def test_ms_ssim_decreases_with_noise():
    x = _frame(3) * 0.5 + 0.25
    gen = torch.Generator().manual_seed(4)
    noise = torch.randn(x.shape, generator=gen, dtype=torch.float64)
    scores = [float(ms_ssim(x, (x + s * noise).clamp(0, 1))) for s in (0.01, 0.05, 0.2)]
    assert scores[0] > scores[1] > scores[2]


def test_ms_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ms_ssim(_frame(0, (3, 16, 16)), _frame(0, (3, 16, 17)))


def test_ms_ssim_small_frames():
    assert ms_ssim_scales(176, 200) == 5
    assert ms_ssim_scales(64, 64) < 5
    tiny = _frame(5, (3, 6, 6))
    assert abs(float(ms_ssim(tiny, tiny)) - 1.0) < 1e-8


def test_db_conversion():
    assert ms_ssim_db(0.982) == pytest.approx(17.447, abs=1e-3)
    assert ms_ssim_db(0.9) == pytest.approx(10.0)
    assert ms_ssim_db(1.0) == DB_CAP


def test_bits_per_pixel():
    assert bits_per_pixel(4096, 64, 64) == 1.0


def test_bd_rate_identity_and_doubled():
    c = RDCurve([(0.1, 20.0), (0.2, 22.0), (0.4, 24.0), (0.8, 26.0)])
    assert bd_rate(c, c) == 0.0
    doubled = RDCurve([(2 * r, q) for r, q in c.points])
    assert bd_rate(c, doubled) == pytest.approx(100.0, abs=0.1)
    assert bd_rate(doubled, c) == pytest.approx(-50.0, abs=0.1)


def test_bd_rate_requires_overlap():
    a = RDCurve([(0.1, 10.0), (0.2, 12.0)])
    b = RDCurve([(0.1, 20.0), (0.2, 22.0)])
    with pytest.raises(DomainError):
        bd_rate(a, b)


def test_curve_validation():
    with pytest.raises(ValueError):
        RDCurve([(0.1, 20.0)])
    with pytest.raises(ValueError):
        RDCurve([(0.0, 20.0), (0.1, 21.0)])
    with pytest.warns(UserWarning):
        RDCurve([(0.1, 22.0), (0.2, 21.0)])


def test_curve_io_roundtrip(tmp_path):
    c = RDCurve([(0.2, 22.1), (0.1, 20.3), (0.4, 24.7)], label="x")
    path = tmp_path / "c.csv"
    write_curve(c, path)
    back = read_curve(path)
    assert back.points == c.points
    assert back.label == "c"


def test_read_curve_rejects_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("rate,quality\n0.1,20\n0.2,21\n")
    with pytest.raises(ValueError):
        read_curve(path)


def test_entropy_gap_independent_uniform():
    # X uniform and independent of the prediction: H(X|Xp) = 1 bit, X - Xp spreads over 3 values
    q = Fraction(1, 4)
    h_cond, h_res = entropy_gap([[q, q], [q, q]])
    assert h_cond == pytest.approx(1.0, abs=1e-12)
    assert h_res == pytest.approx(1.5, abs=1e-12)


def test_entropy_gap_perfect_prediction():
    h_cond, h_res = entropy_gap([[0.5, 0.0], [0.0, 0.5]])
    assert h_cond == pytest.approx(0.0, abs=1e-12)
    assert h_res == pytest.approx(0.0, abs=1e-12)


def test_entropy_gap_random_pmfs(rng):
    for _ in range(50):
        p = rng.random((4, 5))
        p /= p.sum()
        h_cond, h_res = entropy_gap(p.tolist())
        assert h_cond <= h_res + 1e-12


def test_entropy_gap_rejects_bad_input():
    with pytest.raises(ValueError):
        entropy_gap([[0.5, 0.6]])
    with pytest.raises(ValueError):
        entropy_gap([[1.5, -0.5]])
    with pytest.raises(ValueError):
        entropy_gap([])
