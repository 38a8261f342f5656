"""Quantization, Laplace rate model and the range coder.

The coder works on integer symbols with a per-symbol Laplace(mu, b) model.
Parameters are snapped to a fixed grid (log-spaced scales, 1/64 location
steps) and each grid cell owns a 16-bit frequency table, so the encoder and
the decoder derive identical tables from identical parameter arrays.
Symbols outside a table's support go through an escape bucket followed by
an Exp-Golomb coded offset, which keeps the coder lossless for any integer.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

B_MIN = 1e-6
P_MIN = 2.0 ** -16

PRECISION = 16
TOTAL = 1 << PRECISION

# coding-table parameter grid
SCALE_LO = 0.01
SCALE_HI = 256.0
SCALE_LEVELS = 256
_LOG_SCALE_STEP = math.log(SCALE_HI / SCALE_LO) / (SCALE_LEVELS - 1)
MEAN_STEPS = 64
TAIL_WIDTH = 12.0  # support half-width in units of b
MAX_HALF_WIDTH = 4096


class DecodeError(ValueError):
    """Raised when a payload cannot be decoded."""


@dataclass
class LaplaceParams:
    mu: np.ndarray | torch.Tensor
    b: np.ndarray | torch.Tensor


# ---------------------------------------------------------------------------
# quantization and rate


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(x: torch.Tensor, mode: str = "eval", generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive-uniform-noise proxy in ``train`` mode, rounding in ``eval`` mode."""
    if mode == "train":
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) - 0.5
        return x + noise
    if mode == "eval":
        return round_half_away(x)
    raise ValueError(f"unknown quantization mode {mode!r}")


def laplace_likelihood(q: torch.Tensor, mu: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Probability mass of the unit bin centred on ``q`` under Laplace(mu, b)."""
    b = b.clamp(min=B_MIN)
    v = torch.abs(q - mu)
    # centre bin straddles the mode
    inner = 1.0 - 0.5 * torch.exp(-(v + 0.5) / b) - 0.5 * torch.exp(-(0.5 - v).clamp(min=0.0) / b)
    # both bin edges on the same side of the mode
    outer = -0.5 * torch.exp(-(v - 0.5).clamp(min=0.0) / b) * torch.expm1(-1.0 / b)
    return torch.where(v < 0.5, inner, outer)


def laplace_bits(q: torch.Tensor, mu: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Element-wise information content in bits, with the likelihood floored at P_MIN."""
    p = laplace_likelihood(q, mu, b).clamp(min=P_MIN)
    return -torch.log2(p)


def laplace_rate(q, params: LaplaceParams) -> torch.Tensor:
    """Total bits of ``q`` under element-wise Laplace parameters."""
    q = torch.as_tensor(q, dtype=torch.float64) if not isinstance(q, torch.Tensor) else q
    mu = torch.as_tensor(params.mu, dtype=q.dtype)
    b = torch.as_tensor(params.b, dtype=q.dtype)
    return laplace_bits(q, mu, b).sum()


# ---------------------------------------------------------------------------
# fixed-point tables


def snap_params(mu, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map float parameters to (integer centre, mean-offset index, scale index)."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    centre = np.sign(mu) * np.floor(np.abs(mu) + 0.5)
    offset = np.clip(np.rint((mu - centre) * MEAN_STEPS), -MEAN_STEPS // 2, MEAN_STEPS // 2)
    log_b = np.log(np.clip(b, SCALE_LO, SCALE_HI))
    scale_idx = np.clip(np.rint((log_b - math.log(SCALE_LO)) / _LOG_SCALE_STEP), 0, SCALE_LEVELS - 1)
    return centre.astype(np.int64), offset.astype(np.int64), scale_idx.astype(np.int64)


@dataclass(frozen=True)
class CodingTable:
    half_width: int
    cdf: tuple  # length 2*half_width + 3; last interval is the escape bucket

    @property
    def escape(self) -> int:
        return 2 * self.half_width + 1


@lru_cache(maxsize=None)
def coding_table(offset_idx: int, scale_idx: int) -> CodingTable:
    b = math.exp(math.log(SCALE_LO) + scale_idx * _LOG_SCALE_STEP)
    delta = offset_idx / MEAN_STEPS
    half = int(min(MAX_HALF_WIDTH, max(1, math.ceil(TAIL_WIDTH * b))))
    k = np.arange(-half, half + 1, dtype=np.float64)
    pmf = laplace_likelihood(torch.from_numpy(k), torch.tensor(delta, dtype=torch.float64),
                             torch.tensor(b, dtype=torch.float64)).numpy()
    tail = max(0.0, 1.0 - float(pmf.sum()))
    pmf = np.append(pmf, tail)
    n = pmf.size
    freq = 1 + np.floor(pmf * (TOTAL - n)).astype(np.int64)
    freq[int(np.argmax(pmf))] += TOTAL - int(freq.sum())
    cdf = np.concatenate([[0], np.cumsum(freq)])
    assert cdf[-1] == TOTAL and freq.min() >= 1
    return CodingTable(half, tuple(int(c) for c in cdf))


# ---------------------------------------------------------------------------
# range coder (carry-propagating, 32-bit)

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
IMPLICIT_TAIL = 3


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int, total_bits: int = PRECISION):
        r = self.range >> total_bits
        self.low += start * r
        self.range = size * r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int):
        while nbits > 0:
            chunk = min(nbits, 16)
            nbits -= chunk
            self.encode((value >> nbits) & ((1 << chunk) - 1), 1, chunk)

    def finish(self) -> bytes:
        # range >= 2^24, so [low, low + range) holds a multiple of 2^24; its
        # three zero low bytes are left implicit and only the top byte is emitted
        self.low = (self.low + _TOP - 1) & ~(_TOP - 1)
        self._shift_low()
        self._shift_low()
        # the first emitted byte is always zero
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        # the encoder leaves the final IMPLICIT_TAIL zero bytes out
        byte = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return byte

    def decode_target(self, total_bits: int = PRECISION) -> int:
        self._r = self.range >> total_bits
        value = self.code // self._r
        if value >= (1 << total_bits):
            raise DecodeError("corrupted payload")
        return value

    def consume(self, start: int, size: int):
        self.code -= start * self._r
        self.range = size * self._r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def decode_bits(self, nbits: int) -> int:
        value = 0
        while nbits > 0:
            chunk = min(nbits, 16)
            nbits -= chunk
            v = self.decode_target(chunk)
            self.consume(v, 1)
            value = (value << chunk) | v
        return value

    def check_end(self):
        consumed = self.pos - IMPLICIT_TAIL
        if consumed < len(self.data):
            raise DecodeError(f"payload has {len(self.data) - consumed} unread trailing bytes")
        if consumed > len(self.data):
            raise DecodeError(f"payload truncated by {consumed - len(self.data)} bytes")


def _encode_escape(enc: RangeEncoder, excess: int, negative: bool):
    enc.encode_bits(int(negative), 1)
    value = excess + 1
    nbits = value.bit_length()
    enc.encode_bits(nbits - 1, 6)
    enc.encode_bits(value & ((1 << (nbits - 1)) - 1), nbits - 1)


def _decode_escape(dec: RangeDecoder) -> tuple[int, bool]:
    negative = bool(dec.decode_bits(1))
    nbits = dec.decode_bits(6) + 1
    value = (1 << (nbits - 1)) | dec.decode_bits(nbits - 1)
    return value - 1, negative


def encode_symbols(enc: RangeEncoder, symbols, mu, b) -> None:
    """Append integer ``symbols`` to an open encoder under Laplace(mu, b)."""
    flat = np.asarray(symbols).ravel()
    if flat.size and not np.all(np.equal(np.mod(flat, 1), 0)):
        raise ValueError("range coding expects integer-valued symbols")
    flat = flat.astype(np.int64)
    centre, offset, scale = snap_params(mu, b)
    if centre.size != flat.size:
        raise ValueError(f"{flat.size} symbols but {centre.size} parameter sets")
    for s, c, o, k in zip(flat.tolist(), centre.tolist(), offset.tolist(), scale.tolist()):
        table = coding_table(o, k)
        rel = s - c
        i = rel + table.half_width if -table.half_width <= rel <= table.half_width else table.escape
        enc.encode(table.cdf[i], table.cdf[i + 1] - table.cdf[i])
        if i == table.escape:
            _encode_escape(enc, abs(rel) - table.half_width - 1, rel < 0)


def decode_symbols(dec: RangeDecoder, mu, b) -> np.ndarray:
    """Read one symbol per parameter pair from an open decoder."""
    centre, offset, scale = snap_params(mu, b)
    out = np.empty(centre.size, dtype=np.int64)
    for n, (c, o, k) in enumerate(zip(centre.tolist(), offset.tolist(), scale.tolist())):
        table = coding_table(o, k)
        target = dec.decode_target()
        i = bisect.bisect_right(table.cdf, target) - 1
        dec.consume(table.cdf[i], table.cdf[i + 1] - table.cdf[i])
        if i == table.escape:
            excess, negative = _decode_escape(dec)
            rel = table.half_width + 1 + excess
            out[n] = c - rel if negative else c + rel
        else:
            out[n] = c + i - table.half_width
    return out


def range_encode(symbols, params: LaplaceParams) -> bytes:
    """Entropy-code integer ``symbols`` with element-wise Laplace parameters."""
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        return b""
    enc = RangeEncoder()
    encode_symbols(enc, symbols, _np(params.mu), _np(params.b))
    return enc.finish()


def range_decode(data: bytes, params: LaplaceParams, count: int) -> np.ndarray:
    """Inverse of :func:`range_encode`; consumes exactly ``data``."""
    if count == 0:
        if data:
            raise DecodeError("non-empty payload for zero symbols")
        return np.zeros(0, dtype=np.int64)
    mu, b = _np(params.mu).ravel(), _np(params.b).ravel()
    if mu.size != count:
        raise ValueError(f"{count} symbols requested but {mu.size} parameter sets given")
    dec = RangeDecoder(data)
    out = decode_symbols(dec, mu, b)
    dec.check_end()
    return out


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)
