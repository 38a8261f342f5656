"""MOFNet: jointly estimates, codes and decodes optical flow and the mode mask."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .latents import CodedLatents, HyperpriorCoder, LatentGroup
from .layers import downsampling_factor, make_stack, pad_to_multiple


class _ClipAlpha(torch.autograd.Function):
    @staticmethod
    def forward(ctx, biased):
        ctx.save_for_backward(biased)
        return biased.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        (biased,) = ctx.saved_tensors
        # inside the rails gradients pass; at a rail only those pointing back inside do
        # (a descent step moves by -grad: at 0 that needs grad < 0, at 1 grad > 0)
        keep = ((biased > 0) & (biased < 1)) | ((biased <= 0) & (grad < 0)) | ((biased >= 1) & (grad > 0))
        return grad * keep.to(grad.dtype)


def clip_alpha(raw: torch.Tensor) -> torch.Tensor:
    """Mode mask from the raw network output: clamp(raw + 0.5, 0, 1)."""
    return _ClipAlpha.apply(raw + 0.5)


@dataclass
class MofnetOutput:
    rate: torch.Tensor          # bits per batch item
    alpha: torch.Tensor         # Bx1xHxW in [0, 1]
    flow: torch.Tensor          # Bx2xHxW, pixels
    latents: LatentGroup


class MOFNet(nn.Module):
    def __init__(self, config: ModelConfig, input_gain: float = 4.0):
        super().__init__()
        layers = config.layers
        self.analysis = make_stack(layers["mof_analysis"], 6)
        n = layers["mof_analysis"][-1].filters
        self.synthesis = make_stack(layers["mof_synthesis"], n)
        if layers["mof_synthesis"][-1].filters != 3:
            raise ValueError("MOFNet synthesis must emit 3 channels (2 flow + 1 alpha)")
        self.entropy = HyperpriorCoder(n, layers, "mof", context=False)
        self.factor = downsampling_factor(layers["mof_analysis"])
        self.latent_channels = n
        # frames live in [0, 1]; centre and stretch them so freshly initialised
        # latents clear the quantization step instead of rounding to zero
        self.input_gain = input_gain

    def analyse(self, reference: torch.Tensor, current: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        if reference.shape != current.shape:
            raise ValueError(f"frame shapes differ: {tuple(reference.shape)} vs {tuple(current.shape)}")
        x, size = pad_to_multiple(self.input_gain * (torch.cat([reference, current], dim=1) - 0.5), self.factor)
        return self.analysis(x), size

    def synthesise(self, y_hat: torch.Tensor, size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.synthesis(y_hat)[..., : size[0], : size[1]]
        return out[:, :2], clip_alpha(out[:, 2:3])

    def forward(self, reference, current, mode: str = "train",
                generator: torch.Generator | None = None) -> MofnetOutput:
        y, size = self.analyse(reference, current)
        group = self.entropy(y, mode, generator)
        flow, alpha = self.synthesise(group.y_hat, size)
        return MofnetOutput(group.bits, alpha, flow, group)

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int, int]:
        return (1, self.latent_channels, -(-height // self.factor), -(-width // self.factor))

    @torch.no_grad()
    def compress(self, reference, current) -> tuple[CodedLatents, torch.Tensor, torch.Tensor]:
        y, size = self.analyse(reference, current)
        coded = self.entropy.compress(y)
        flow, alpha = self.synthesise(coded.group.y_hat, size)
        return coded, flow, alpha

    @torch.no_grad()
    def decompress(self, hyper_payload: bytes, main_payload: bytes, height: int, width: int,
                   like: torch.Tensor) -> tuple[LatentGroup, torch.Tensor, torch.Tensor]:
        group = self.entropy.decompress(hyper_payload, main_payload, self.latent_shape(height, width), like)
        flow, alpha = self.synthesise(group.y_hat, (height, width))
        return group, flow, alpha
