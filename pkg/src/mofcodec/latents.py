"""Hyperprior entropy models shared by MOFNet, CodecNet and the residual codec.

A :class:`HyperpriorCoder` owns the hyper analysis/synthesis transforms, an
optional autoregressive context model, and the factorized Laplace prior of
the hyper latents. It turns main latents ``y`` into quantized latents plus
per-element bits (training and estimation), and into two byte payloads
(coding).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy import (
    DecodeError,
    RangeDecoder,
    RangeEncoder,
    decode_symbols,
    encode_symbols,
    laplace_bits,
    quantize,
    round_half_away,
)
from .layers import ConvSpec, make_stack


@dataclass
class LatentGroup:
    """Quantized main + hyper latents with their per-element bits."""

    y_hat: torch.Tensor
    z_hat: torch.Tensor
    y_bits: torch.Tensor
    z_bits: torch.Tensor
    mu: torch.Tensor
    scale: torch.Tensor

    @property
    def bits(self) -> torch.Tensor:
        """Total bits per batch item."""
        return self.y_bits.flatten(1).sum(1) + self.z_bits.flatten(1).sum(1)


@dataclass
class CodedLatents:
    hyper_payload: bytes
    main_payload: bytes
    group: LatentGroup


def conv_output_size(size: int, specs: Sequence[ConvSpec]) -> int:
    for s in specs:
        if s.transposed:
            size *= s.stride
        else:
            size = (size + 2 * (s.kernel // 2) - s.kernel) // s.stride + 1
    return size


def scale_from_raw(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw)


class FactorizedLaplace(nn.Module):
    """Zero-mean Laplace prior with one learned scale per channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.raw_scale = nn.Parameter(torch.full((channels,), 2.0))

    def scale(self, like: torch.Tensor) -> torch.Tensor:
        return scale_from_raw(self.raw_scale).view(1, -1, 1, 1).expand_as(like)

    def bits(self, z_hat: torch.Tensor) -> torch.Tensor:
        return laplace_bits(z_hat, torch.zeros_like(z_hat), self.scale(z_hat))


class HyperpriorCoder(nn.Module):
    def __init__(self, latent_channels: int, layers: dict[str, list[ConvSpec]], prefix: str,
                 context: bool):
        super().__init__()
        self.latent_channels = latent_channels
        self.hyper_specs = layers[f"{prefix}_hyper_analysis"]
        self.hyper_analysis = make_stack(self.hyper_specs, latent_channels)
        hyper_channels = self.hyper_specs[-1].filters
        self.hyper_synthesis = make_stack(layers[f"{prefix}_hyper_synthesis"], hyper_channels)
        hs_out = layers[f"{prefix}_hyper_synthesis"][-1].filters
        self.z_prior = FactorizedLaplace(hyper_channels)
        self.use_context = context
        if context:
            ctx_specs = layers[f"{prefix}_context"]
            self.context = make_stack(ctx_specs, latent_channels)
            self.context_radius = sum(s.kernel // 2 for s in ctx_specs)
            ep_specs = layers[f"{prefix}_entropy_params"]
            self.entropy_params = make_stack(ep_specs, hs_out + ctx_specs[-1].filters)
            out = ep_specs[-1].filters
        else:
            out = hs_out
        if out != 2 * latent_channels:
            raise ValueError(f"{prefix}: entropy parameter head must emit {2 * latent_channels} channels")

    # -- shared pieces -----------------------------------------------------

    def hyper_shape(self, y_shape: Sequence[int]) -> tuple[int, int, int, int]:
        b, _, h, w = y_shape
        return (b, self.hyper_specs[-1].filters, conv_output_size(h, self.hyper_specs),
                conv_output_size(w, self.hyper_specs))

    def _hyper_features(self, z_hat: torch.Tensor, y_size) -> torch.Tensor:
        feats = self.hyper_synthesis(z_hat)
        return feats[..., : y_size[0], : y_size[1]]

    def _split(self, params: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw = params.chunk(2, dim=1)
        return mu, scale_from_raw(raw)

    # -- estimation --------------------------------------------------------

    def forward(self, y: torch.Tensor, mode: str = "train",
                generator: torch.Generator | None = None) -> LatentGroup:
        z = self.hyper_analysis(y)
        z_hat = quantize(z, mode, generator)
        z_bits = self.z_prior.bits(z_hat)
        hyper = self._hyper_features(z_hat, y.shape[-2:])
        y_hat = quantize(y, mode, generator)
        if self.use_context:
            params = self.entropy_params(torch.cat([hyper, self.context(y_hat)], dim=1))
        else:
            params = hyper
        mu, scale = self._split(params)
        return LatentGroup(y_hat, z_hat, laplace_bits(y_hat, mu, scale), z_bits, mu, scale)

    # -- coding ------------------------------------------------------------

    def _serial_positions(self, hyper: torch.Tensor, y_hat: torch.Tensor, step):
        """Raster scan computing entropy parameters from the causal neighbourhood.

        ``step(i, j, mu, scale)`` must return the latent column at (i, j); it
        is written into ``y_hat`` before moving on. Encoder and decoder run this
        same routine, so both see bit-identical parameters.
        """
        r = self.context_radius
        _, _, h, w = y_hat.shape
        padded = F.pad(y_hat, (r, r, r, r))
        mus = torch.zeros_like(y_hat)
        scales = torch.zeros_like(y_hat)
        for i in range(h):
            for j in range(w):
                patch = padded[:, :, i:i + 2 * r + 1, j:j + 2 * r + 1]
                ctx = self.context(patch)[:, :, r:r + 1, r:r + 1]
                params = self.entropy_params(torch.cat([hyper[:, :, i:i + 1, j:j + 1], ctx], dim=1))
                mu, scale = self._split(params)
                mus[:, :, i, j] = mu[:, :, 0, 0]
                scales[:, :, i, j] = scale[:, :, 0, 0]
                padded[:, :, i + r, j + r] = step(i, j, mu[0, :, 0, 0], scale[0, :, 0, 0])
        return padded[:, :, r:r + h, r:r + w].contiguous(), mus, scales

    @torch.no_grad()
    def compress(self, y: torch.Tensor) -> CodedLatents:
        if y.shape[0] != 1:
            raise ValueError("compress handles one item at a time")
        z_hat = round_half_away(self.hyper_analysis(y))
        z_scale = self.z_prior.scale(z_hat)
        enc = RangeEncoder()
        encode_symbols(enc, _int_np(z_hat), _np(torch.zeros_like(z_hat)), _np(z_scale))
        hyper_payload = enc.finish()

        hyper = self._hyper_features(z_hat, y.shape[-2:])
        y_round = round_half_away(y)
        enc = RangeEncoder()
        if self.use_context:
            def step(i, j, mu, scale):
                column = y_round[0, :, i, j]
                encode_symbols(enc, _int_np(column), _np(mu), _np(scale))
                return column

            y_hat, mu, scale = self._serial_positions(hyper, torch.zeros_like(y_round), step)
        else:
            mu, scale = self._split(hyper)
            y_hat = y_round
            encode_symbols(enc, _int_np(y_hat), _np(mu), _np(scale))
        main_payload = enc.finish()
        group = LatentGroup(y_hat, z_hat, laplace_bits(y_hat, mu, scale),
                            self.z_prior.bits(z_hat), mu, scale)
        return CodedLatents(hyper_payload, main_payload, group)

    @torch.no_grad()
    def decompress(self, hyper_payload: bytes, main_payload: bytes, y_shape: Sequence[int],
                   like: torch.Tensor) -> LatentGroup:
        z_shape = self.hyper_shape(y_shape)
        zeros = torch.zeros(z_shape, dtype=like.dtype, device=like.device)
        dec = RangeDecoder(hyper_payload)
        z_vals = decode_symbols(dec, _np(zeros), _np(self.z_prior.scale(zeros)))
        dec.check_end()
        z_hat = torch.from_numpy(z_vals.reshape(z_shape)).to(like.dtype)

        hyper = self._hyper_features(z_hat, y_shape[-2:])
        template = torch.zeros(tuple(y_shape), dtype=like.dtype, device=like.device)
        dec = RangeDecoder(main_payload)
        if self.use_context:
            def step(i, j, mu, scale):
                vals = decode_symbols(dec, _np(mu), _np(scale))
                return torch.from_numpy(vals).to(like.dtype)

            y_hat, mu, scale = self._serial_positions(hyper, template, step)
        else:
            mu, scale = self._split(hyper)
            y_hat = torch.from_numpy(decode_symbols(dec, _np(mu), _np(scale)).reshape(tuple(y_shape))).to(like.dtype)
        dec.check_end()
        return LatentGroup(y_hat, z_hat, laplace_bits(y_hat, mu, scale),
                           self.z_prior.bits(z_hat), mu, scale)


def _np(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().double().numpy().ravel()


def _int_np(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().ravel().astype(np.int64)
