"""CodecNet (conditional coding) and the residual codec used for ablation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .latents import CodedLatents, HyperpriorCoder, LatentGroup
from .layers import downsampling_factor, make_stack, pad_to_multiple


@dataclass
class CodecOutput:
    rate: torch.Tensor       # bits per batch item
    recon: torch.Tensor
    latents: LatentGroup


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"input shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


class CodecNet(nn.Module):
    """Codes ``alpha * x_t`` with ``alpha * prediction`` available on both sides.

    The current-frame branch mixes in the prediction after its first stage.
    A separate analysis of the prediction feeds the synthesis; the decoder
    recomputes it from the prediction it already holds, so only the
    current-frame latents are transmitted.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = config.layers
        self.stage1_current = make_stack(layers["codec_stage1_current"], 3)
        self.stage1_prediction = make_stack(layers["codec_stage1_prediction"], 3)
        merged = layers["codec_stage1_current"][-1].filters + layers["codec_stage1_prediction"][-1].filters
        self.analysis_tail = make_stack(layers["codec_analysis_tail"], merged)
        self.prediction_analysis = make_stack(layers["codec_prediction_analysis"], 3)
        n = layers["codec_analysis_tail"][-1].filters
        n_pred = layers["codec_prediction_analysis"][-1].filters
        self.synthesis = make_stack(layers["codec_synthesis"], n + n_pred)
        self.entropy = HyperpriorCoder(n, layers, "codec", context=True)
        self.latent_channels = n
        self.factor = downsampling_factor(layers["codec_stage1_current"] + layers["codec_analysis_tail"])
        if self.factor != downsampling_factor(layers["codec_prediction_analysis"]):
            raise ValueError("both CodecNet analysis branches must downsample equally")

    def _analyse(self, masked_pred, masked_current):
        _check_shapes(masked_pred, masked_current)
        xp, size = pad_to_multiple(masked_pred, self.factor)
        xc, _ = pad_to_multiple(masked_current, self.factor)
        y = self.analysis_tail(torch.cat([self.stage1_current(xc), self.stage1_prediction(xp)], dim=1))
        return y, self.prediction_analysis(xp), size

    def _synthesise(self, y_hat, y_pred, size):
        return self.synthesis(torch.cat([y_hat, y_pred], dim=1))[..., : size[0], : size[1]]

    def forward(self, masked_pred, masked_current, mode: str = "train",
                generator: torch.Generator | None = None) -> CodecOutput:
        y, y_pred, size = self._analyse(masked_pred, masked_current)
        group = self.entropy(y, mode, generator)
        return CodecOutput(group.bits, self._synthesise(group.y_hat, y_pred, size), group)

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int, int]:
        return (1, self.latent_channels, -(-height // self.factor), -(-width // self.factor))

    @torch.no_grad()
    def compress(self, masked_pred, masked_current) -> tuple[CodedLatents, torch.Tensor]:
        y, y_pred, size = self._analyse(masked_pred, masked_current)
        coded = self.entropy.compress(y)
        return coded, self._synthesise(coded.group.y_hat, y_pred, size)

    @torch.no_grad()
    def decompress(self, hyper_payload: bytes, main_payload: bytes, masked_pred) -> tuple[LatentGroup, torch.Tensor]:
        h, w = masked_pred.shape[-2:]
        xp, size = pad_to_multiple(masked_pred, self.factor)
        group = self.entropy.decompress(hyper_payload, main_payload, self.latent_shape(h, w), masked_pred)
        return group, self._synthesise(group.y_hat, self.prediction_analysis(xp), size)


class ResidualCodec(nn.Module):
    """Single-branch codec of ``current - pred``; reconstruction is ``pred + residual``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = config.layers
        self.analysis = make_stack(layers["residual_analysis"], 3)
        n = layers["residual_analysis"][-1].filters
        self.synthesis = make_stack(layers["residual_synthesis"], n)
        self.entropy = HyperpriorCoder(n, layers, "residual", context=True)
        self.latent_channels = n
        self.factor = downsampling_factor(layers["residual_analysis"])

    def decode_residual(self, y_hat, size):
        return self.synthesis(y_hat)[..., : size[0], : size[1]]

    def forward(self, pred, current, mode: str = "train",
                generator: torch.Generator | None = None) -> CodecOutput:
        _check_shapes(pred, current)
        r, size = pad_to_multiple(current - pred, self.factor)
        group = self.entropy(self.analysis(r), mode, generator)
        return CodecOutput(group.bits, pred + self.decode_residual(group.y_hat, size), group)

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int, int]:
        return (1, self.latent_channels, -(-height // self.factor), -(-width // self.factor))

    @torch.no_grad()
    def compress(self, pred, current) -> tuple[CodedLatents, torch.Tensor]:
        _check_shapes(pred, current)
        r, size = pad_to_multiple(current - pred, self.factor)
        coded = self.entropy.compress(self.analysis(r))
        return coded, pred + self.decode_residual(coded.group.y_hat, size)

    @torch.no_grad()
    def decompress(self, hyper_payload: bytes, main_payload: bytes, pred) -> tuple[LatentGroup, torch.Tensor]:
        h, w = pred.shape[-2:]
        group = self.entropy.decompress(hyper_payload, main_payload, self.latent_shape(h, w), pred)
        return group, pred + self.decode_residual(group.y_hat, (h, w))
