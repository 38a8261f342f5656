"""The complete P-frame coder: MOFNet, warping, mode blending and CodecNet."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .bitstream import Bitstream
from .codecnet import CodecNet, CodecOutput, ResidualCodec
from .config import MODES, ModelConfig, lambda_index
from .data import FramePair
from .entropy import DecodeError
from .latents import LatentGroup
from .layers import init_weights
from .metrics import ms_ssim, ms_ssim_db
from .mofnet import MOFNet, MofnetOutput
from .motion import bilinear_warp


def reconstruct(alpha: torch.Tensor, pred: torch.Tensor, codec_recon: torch.Tensor | None) -> torch.Tensor:
    """Blend skip and CodecNet paths: ``(1 - alpha) * pred + codec_recon``, clamped to [0, 1].

    ``codec_recon`` already carries its alpha-masked content. ``None`` means the
    codec was bypassed (skip-only operation).
    """
    if alpha.shape[-2:] != pred.shape[-2:] or alpha.shape[-3] != 1:
        raise ValueError(f"alpha {tuple(alpha.shape)} does not match prediction {tuple(pred.shape)}")
    out = (1 - alpha) * pred
    if codec_recon is not None:
        if codec_recon.shape != pred.shape:
            raise ValueError(f"codec output {tuple(codec_recon.shape)} does not match {tuple(pred.shape)}")
        out = out + codec_recon
    return out.clamp(0.0, 1.0)


@dataclass
class SystemOutput:
    recon: torch.Tensor
    rate_m: torch.Tensor      # bits per item
    rate_c: torch.Tensor      # bits per item
    alpha: torch.Tensor
    flow: torch.Tensor
    pred: torch.Tensor
    mof: MofnetOutput
    codec: CodecOutput | None

    @property
    def rate_total(self) -> torch.Tensor:
        return self.rate_m + self.rate_c


@dataclass
class CodingResult:
    recon: torch.Tensor        # 3xHxW
    rate_total: float          # estimated bits
    rate_m: float
    rate_c: float
    alpha: torch.Tensor        # 1xHxW
    flow: torch.Tensor         # 2xHxW
    pred: torch.Tensor         # 3xHxW
    rate_map_mof: np.ndarray   # HxW, bits per pixel position
    rate_map_codec: np.ndarray
    payload_bits: int


@dataclass
class RDPoint:
    bpp: float
    ms_ssim: float
    coded_bpp: float

    @property
    def ms_ssim_db(self) -> float:
        return ms_ssim_db(self.ms_ssim)


class PFrameCoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.mofnet = MOFNet(config)
        self.codec = ResidualCodec(config) if config.residual else CodecNet(config)
        init_weights(self)

    @property
    def mode(self) -> str:
        return self.config.mode

    def _alpha_for(self, mode: str, alpha: torch.Tensor) -> torch.Tensor:
        if mode == "skip_only":
            return torch.zeros_like(alpha)
        if mode == "codecnet_only":
            return torch.ones_like(alpha)
        return alpha

    def _check_mode(self, mode: str | None) -> str:
        mode = mode or self.mode
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if (mode == "residual_skip") != self.config.residual:
            raise ValueError(f"mode {mode!r} needs a {'residual' if mode == 'residual_skip' else 'conditional'} codec")
        return mode

    def forward(self, reference: torch.Tensor, current: torch.Tensor, quant: str = "train",
                generator: torch.Generator | None = None, alpha_override: torch.Tensor | None = None,
                mode: str | None = None) -> SystemOutput:
        mode = self._check_mode(mode)
        mof = self.mofnet(reference, current, quant, generator)
        alpha = mof.alpha if alpha_override is None else alpha_override.expand_as(mof.alpha)
        alpha = self._alpha_for(mode, alpha)
        pred = bilinear_warp(reference, mof.flow)
        if mode == "skip_only":
            recon = reconstruct(alpha, pred, None)
            return SystemOutput(recon, mof.rate, torch.zeros_like(mof.rate), alpha, mof.flow, pred, mof, None)
        codec = self.codec(alpha * pred, alpha * current, quant, generator)
        recon = reconstruct(alpha, pred, codec.recon)
        return SystemOutput(recon, mof.rate, codec.rate, alpha, mof.flow, pred, mof, codec)


# ---------------------------------------------------------------------------
# rate maps


def _spread(cell_bits: np.ndarray, cell: int, height: int, width: int) -> np.ndarray:
    """Spread per-cell bits uniformly over the visible pixels of each cell."""
    iy = np.arange(height) // cell
    ix = np.arange(width) // cell
    counts_y = np.bincount(iy, minlength=cell_bits.shape[0])[: cell_bits.shape[0]]
    counts_x = np.bincount(ix, minlength=cell_bits.shape[1])[: cell_bits.shape[1]]
    per_pixel = cell_bits / np.maximum(np.outer(counts_y, counts_x), 1)
    return per_pixel[np.ix_(iy, ix)]


def rate_map(group: LatentGroup, factor: int, hyper_factor: int, height: int, width: int) -> np.ndarray:
    """Per-pixel bit allocation of one latent group (main + hyper), summing to its bits."""
    y_cells = group.y_bits[0].sum(0).detach().double().cpu().numpy()
    z_cells = group.z_bits[0].sum(0).detach().double().cpu().numpy()
    return _spread(y_cells, factor, height, width) + _spread(z_cells, factor * hyper_factor, height, width)


def _hyper_factor(coder) -> int:
    f = 1
    for s in coder.entropy.hyper_specs:
        f *= s.stride
    return f


# ---------------------------------------------------------------------------
# bitstream coding


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected a 3xHxW frame, got shape {tuple(x.shape)}")
    return x


def _pair_tensors(pair, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(pair, FramePair):
        ref, cur = pair.reference.data, pair.current.data
    else:
        ref, cur = pair
    ref, cur = _as_batch(ref).to(dtype), _as_batch(cur).to(dtype)
    if ref.shape != cur.shape:
        raise ValueError(f"frame shapes differ: {tuple(ref.shape)} vs {tuple(cur.shape)}")
    return ref, cur


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def encode_pframe(pair, model: PFrameCoder, mode: str | None = None) -> tuple[Bitstream, CodingResult]:
    """Code the current frame of ``pair`` against its reference."""
    mode = model._check_mode(mode)
    model.eval()
    ref, cur = _pair_tensors(pair, _model_dtype(model))
    _, _, h, w = ref.shape
    coded_m, flow, alpha = model.mofnet.compress(ref, cur)
    alpha = model._alpha_for(mode, alpha)
    pred = bilinear_warp(ref, flow)
    empty = LatentGroup(*(torch.zeros(1, 1, 1, 1, dtype=ref.dtype),) * 6)
    if mode == "skip_only":
        recon = reconstruct(alpha, pred, None)
        codec_payloads = (b"", b"")
        group_c = empty
    else:
        coded_c, recon_c = model.codec.compress(alpha * pred, alpha * cur)
        recon = reconstruct(alpha, pred, recon_c)
        codec_payloads = (coded_c.hyper_payload, coded_c.main_payload)
        group_c = coded_c.group
    stream = Bitstream(lambda_index(model.config.lam), h, w,
                       (coded_m.hyper_payload, coded_m.main_payload) + codec_payloads)
    rate_m = float(coded_m.group.bits.sum())
    rate_c = float(group_c.bits.sum()) if mode != "skip_only" else 0.0
    map_m = rate_map(coded_m.group, model.mofnet.factor, _hyper_factor(model.mofnet), h, w)
    if mode == "skip_only":
        map_c = np.zeros((h, w))
    else:
        map_c = rate_map(group_c, model.codec.factor, _hyper_factor(model.codec), h, w)
    result = CodingResult(recon[0], rate_m + rate_c, rate_m, rate_c, alpha[0], flow[0], pred[0],
                          map_m, map_c, stream.payload_bits)
    return stream, result


@torch.no_grad()
def decode_pframe(reference, stream: Bitstream | bytes, model: PFrameCoder, mode: str | None = None) -> torch.Tensor:
    """Rebuild the coded frame from ``stream`` and the reference frame."""
    mode = model._check_mode(mode)
    model.eval()
    if isinstance(stream, (bytes, bytearray)):
        stream = Bitstream.from_bytes(bytes(stream))
    ref = _as_batch(torch.as_tensor(reference)).to(_model_dtype(model))
    if ref.shape[-2:] != (stream.height, stream.width):
        raise ValueError(f"reference is {tuple(ref.shape[-2:])} but stream codes "
                         f"{stream.height}x{stream.width}")
    mof_hyper, mof_main, codec_hyper, codec_main = stream.payloads
    _, flow, alpha = model.mofnet.decompress(mof_hyper, mof_main, stream.height, stream.width, ref)
    alpha = model._alpha_for(mode, alpha)
    pred = bilinear_warp(ref, flow)
    if mode == "skip_only":
        if codec_hyper or codec_main:
            raise DecodeError("skip-only stream carries CodecNet payloads")
        return reconstruct(alpha, pred, None)[0]
    _, recon_c = model.codec.decompress(codec_hyper, codec_main, alpha * pred)
    return reconstruct(alpha, pred, recon_c)[0]


@torch.no_grad()
def evaluate_pair(pair, model: PFrameCoder, mode: str | None = None) -> RDPoint:
    """Rate (estimated and coded) and MS-SSIM of one coded pair."""
    stream, result = encode_pframe(pair, model, mode)
    _, cur = _pair_tensors(pair, _model_dtype(model))
    h, w = cur.shape[-2:]
    score = float(ms_ssim(result.recon.double(), cur[0].double()))
    return RDPoint(result.rate_total / (h * w), score, stream.payload_bits / (h * w))


def build_model(config: ModelConfig, seed: int | None = None) -> PFrameCoder:
    if seed is not None:
        torch.manual_seed(seed)
    return PFrameCoder(config)
