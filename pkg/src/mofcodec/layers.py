"""Convolutional building blocks: GDN, masked convolutions and config-driven stacks."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

BETA_MIN = 1e-6
LEAKY_SLOPE = 0.01

NONLINEARITIES = ("GDN", "IGDN", "LeakyReLU", "none")


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer: ``filters x kernel / stride`` plus its activation."""

    filters: int
    kernel: int
    stride: int = 1
    transposed: bool = False
    masked: bool = False
    nonlinearity: str = "none"

    def __post_init__(self):
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.masked and (self.transposed or self.stride != 1):
            raise ValueError("masked convolutions must be plain stride-1 convolutions")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(**d)

    def __str__(self):
        kind = "MConv" if self.masked else ("TConv" if self.transposed else "Conv")
        return f"{kind} {self.filters}x{self.kernel}/{self.stride} {self.nonlinearity}"


def gdn_forward(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); multiplies instead when ``inverse``."""
    beta = beta.clamp(min=BETA_MIN)
    gamma = gamma.clamp(min=0.0)
    c = x.shape[1]
    norm = F.conv2d(x * x, gamma.view(c, c, 1, 1), beta)
    norm = torch.sqrt(norm)
    return x * norm if inverse else x / norm


class GDN(nn.Module):
    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(0.1 * torch.eye(channels))

    def forward(self, x):
        return gdn_forward(x, self.beta, self.gamma, self.inverse)


class MaskedConv2d(nn.Conv2d):
    """Causal convolution: each output sees only raster-earlier inputs (centre excluded)."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        kh, kw = self.kernel_size
        mask = torch.ones_like(self.weight)
        mask[:, :, kh // 2, kw // 2:] = 0
        mask[:, :, kh // 2 + 1:, :] = 0
        self.register_buffer("mask", mask)

    def forward(self, x):
        return self._conv_forward(x, self.weight * self.mask, self.bias)


def make_layer(spec: ConvSpec, in_channels: int) -> nn.Module:
    pad = spec.kernel // 2
    if spec.masked:
        conv = MaskedConv2d(in_channels, spec.filters, spec.kernel, padding=pad)
    elif spec.transposed:
        conv = nn.ConvTranspose2d(in_channels, spec.filters, spec.kernel, stride=spec.stride,
                                  padding=pad, output_padding=spec.stride - 1)
    else:
        conv = nn.Conv2d(in_channels, spec.filters, spec.kernel, stride=spec.stride, padding=pad)
    if spec.nonlinearity == "none":
        return conv
    if spec.nonlinearity == "LeakyReLU":
        conv.init_gain = nn.init.calculate_gain("leaky_relu", LEAKY_SLOPE)
        act = nn.LeakyReLU(LEAKY_SLOPE)
    else:
        act = GDN(spec.filters, inverse=spec.nonlinearity == "IGDN")
    return nn.Sequential(conv, act)


def make_stack(specs: Sequence[ConvSpec], in_channels: int) -> nn.Sequential:
    layers = []
    for spec in specs:
        layers.append(make_layer(spec, in_channels))
        in_channels = spec.filters
    return nn.Sequential(*layers)


def downsampling_factor(specs: Iterable[ConvSpec]) -> int:
    factor = 1
    for s in specs:
        if not s.transposed:
            factor *= s.stride
    return factor


def effective_fan_in(conv: nn.Conv2d | nn.ConvTranspose2d) -> float:
    """Inputs contributing to one output sample."""
    if isinstance(conv, MaskedConv2d):
        return float(conv.mask[0].sum())
    kh, kw = conv.kernel_size
    if isinstance(conv, nn.ConvTranspose2d):
        # weight is (in, out, kh, kw); each output sees 1/stride^2 of the taps
        sh, sw = conv.stride
        return conv.weight.shape[0] * kh * kw / (sh * sw)
    return conv.weight.shape[1] * kh * kw


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal init for all convolutions; GDN keeps beta=1, gamma=0.1*I."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            std = getattr(m, "init_gain", 1.0) / effective_fan_in(m) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)
