"""Quality and rate metrics: MS-SSIM, BD-rate and the conditional-entropy gap."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import mpmath
import numpy as np
import torch
import torch.nn.functional as F

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DB_CAP = 80.0


class DomainError(ValueError):
    """Inputs outside the domain where a metric is defined."""


def _gaussian_window(size: int, sigma: float, like: torch.Tensor) -> torch.Tensor:
    coords = torch.arange(size, dtype=like.dtype, device=like.device) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_components(x, y, g, data_range=1.0):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mu_x * mu_x
    syy = _filter(y * y, g) - mu_y * mu_y
    sxy = _filter(x * y, g) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    # per (item, channel) means over the valid window positions
    return (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ms_ssim_scales(height: int, width: int) -> int:
    """Number of scales whose coarsest level still fits the 11-tap window."""
    m = min(height, width)
    scales = 0
    while scales < len(MS_SSIM_WEIGHTS) and m >= WINDOW_SIZE * 2 ** scales:
        scales += 1
    return scales


def ms_ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Multi-scale SSIM, averaged over channels.

    Accepts ``CxHxW`` (returns a scalar) or ``BxCxHxW`` (returns one value per
    item). Frames smaller than 176 pixels use fewer scales with the standard
    weights renormalized; below 11 pixels a single scale with a shrunken
    Gaussian window is used.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    h, w = a.shape[-2:]
    scales = ms_ssim_scales(h, w)
    if scales == 0:
        size = min(h, w) if min(h, w) % 2 == 1 else min(h, w) - 1
        g = _gaussian_window(max(size, 1), WINDOW_SIGMA, a)
        weights = torch.ones(1, dtype=a.dtype)
        scales = 1
    else:
        g = _gaussian_window(WINDOW_SIZE, WINDOW_SIGMA, a)
        weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=a.dtype)
        weights = weights / weights.sum()
    result = 1.0
    for s in range(scales):
        ssim_val, cs = _ssim_components(a, b, g, data_range)
        term = ssim_val if s == scales - 1 else cs
        result = result * torch.relu(term) ** weights[s]
        if s < scales - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    out = result.mean(dim=1)
    return out[0] if single else out


def ms_ssim_db(score: float) -> float:
    """-10 log10(1 - score), capped at 80 dB for perfect or near-perfect scores."""
    score = float(score)
    if 1.0 - score <= 10 ** (-DB_CAP / 10):
        return DB_CAP
    return -10.0 * math.log10(1.0 - score)


def bits_per_pixel(bits: float, height: int, width: int) -> float:
    return float(bits) / (height * width)


# ---------------------------------------------------------------------------
# RD curves and BD-rate


@dataclass
class RDCurve:
    """Operating points sorted by rate; quality is MS-SSIM in dB."""

    bpp: np.ndarray
    quality: np.ndarray
    label: str = ""

    def __init__(self, points: Iterable[tuple[float, float]], label: str = ""):
        pts = sorted((float(r), float(q)) for r, q in points)
        if len(pts) < 2:
            raise ValueError("an RD curve needs at least two points")
        bpp = np.array([p[0] for p in pts])
        quality = np.array([p[1] for p in pts])
        if np.any(bpp <= 0):
            raise ValueError("rates must be positive")
        if np.any(np.diff(bpp) <= 0):
            raise ValueError("rates must be strictly increasing")
        if np.any(np.diff(quality) < 0):
            warnings.warn(f"RD curve {label!r}: quality decreases with rate", stacklevel=2)
        self.bpp, self.quality, self.label = bpp, quality, label

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.bpp.tolist(), self.quality.tolist()))


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Bjontegaard delta rate of ``test`` against ``anchor`` in percent.

    Log-rate is fitted as a cubic polynomial of quality for each curve and the
    fits are integrated over the shared quality interval. Negative values mean
    the test curve needs less rate for the same quality.
    """
    lo = max(anchor.quality.min(), test.quality.min())
    hi = min(anchor.quality.max(), test.quality.max())
    if not hi > lo:
        raise DomainError("RD curves do not overlap in quality")

    def integral(curve: RDCurve) -> float:
        deg = min(3, len(curve.bpp) - 1)
        poly = np.polyint(np.polyfit(curve.quality, np.log(curve.bpp), deg))
        return np.polyval(poly, hi) - np.polyval(poly, lo)

    avg_diff = (integral(test) - integral(anchor)) / (hi - lo)
    return float((math.exp(avg_diff) - 1.0) * 100.0)


def read_curve(path: str | os.PathLike, label: str | None = None) -> RDCurve:
    """Read a CSV with ``bpp`` and ``ms_ssim_db`` columns (extra columns ignored)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"bpp", "ms_ssim_db"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns bpp,ms_ssim_db")
        pts = [(float(row["bpp"]), float(row["ms_ssim_db"])) for row in reader]
    return RDCurve(pts, label if label is not None else os.path.splitext(os.path.basename(path))[0])


def write_curve(curve: RDCurve, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bpp", "ms_ssim_db"])
        for r, q in curve.points:
            writer.writerow([repr(r), repr(q)])


# ---------------------------------------------------------------------------
# conditional vs residual entropy


def _entropy(probs: Iterable) -> mpmath.mpf:
    total = mpmath.mpf(0)
    for p in probs:
        if p > 0:
            p = mpmath.mpf(p.numerator) / p.denominator if isinstance(p, Fraction) else mpmath.mpf(p)
            total -= p * mpmath.log(p, 2)
    return total


def entropy_gap(joint_pmf, x_values: Sequence[int] | None = None,
                pred_values: Sequence[int] | None = None) -> tuple[float, float]:
    """Exact H(X | Xp) and H(X - Xp) for a finite joint pmf ``joint_pmf[x, xp]``.

    Entries may be floats or :class:`fractions.Fraction`; fractions keep the
    marginalisation exact. Logarithms are evaluated at 50 significant digits.
    """
    rows = [list(r) for r in joint_pmf]
    nx, npred = len(rows), len(rows[0]) if rows else 0
    if nx == 0 or npred == 0 or any(len(r) != npred for r in rows):
        raise ValueError("joint pmf must be a non-empty rectangular table")
    x_values = list(range(nx)) if x_values is None else list(x_values)
    pred_values = list(range(npred)) if pred_values is None else list(pred_values)
    if any(p < 0 for r in rows for p in r):
        raise ValueError("pmf entries must be non-negative")
    total = sum(p for r in rows for p in r)
    if abs(float(total) - 1.0) > 1e-9:
        raise ValueError(f"pmf sums to {float(total)!r}, not 1")

    with mpmath.workdps(50):
        h_joint = _entropy(p for r in rows for p in r)
        pred_marginal = [sum(rows[i][j] for i in range(nx)) for j in range(npred)]
        h_cond = h_joint - _entropy(pred_marginal)
        diff: dict[int, object] = {}
        for i, xv in enumerate(x_values):
            for j, pv in enumerate(pred_values):
                diff[xv - pv] = diff.get(xv - pv, 0) + rows[i][j]
        h_resid = _entropy(diff.values())
        return float(h_cond), float(h_resid)
