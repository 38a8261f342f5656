"""Dense optical flow: backward bilinear warping, visualization and dumps."""

from __future__ import annotations

import os
import struct

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb

from .data import RGB, Frame


def _base_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=like.dtype, device=like.device).view(1, h, 1)
    xs = torch.arange(w, dtype=like.dtype, device=like.device).view(1, 1, w)
    return ys, xs


def bilinear_warp(reference: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``reference`` at ``p + flow(p)`` with bilinear interpolation.

    Args:
        reference: Bx C x H x W (or C x H x W) tensor.
        flow: B x 2 x H x W (or 2 x H x W); channel 0 is the horizontal
            displacement, channel 1 the vertical one, both in pixels.

    Sample coordinates are clamped to the frame (clamp-to-edge). The result is
    differentiable with respect to both inputs.
    """
    squeeze = reference.dim() == 3
    if squeeze:
        reference, flow = reference.unsqueeze(0), flow.unsqueeze(0)
    if reference.dim() != 4 or flow.dim() != 4:
        raise ValueError("bilinear_warp expects 3-D or 4-D tensors")
    b, c, h, w = reference.shape
    if flow.shape != (b, 2, h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match frame {(b, 2, h, w)}")

    ys, xs = _base_grid(h, w, flow)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)

    x0 = sx.detach().floor().clamp(max=max(w - 2, 0))
    y0 = sy.detach().floor().clamp(max=max(h - 2, 0))
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = reference.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    out = top + wy * (bottom - top)
    # keep the result inside the hull of its four taps despite rounding
    lo = torch.minimum(torch.minimum(v00, v01), torch.minimum(v10, v11))
    hi = torch.maximum(torch.maximum(v00, v01), torch.maximum(v10, v11))
    out = torch.where(out > hi, hi, torch.where(out < lo, lo, out))
    return out.squeeze(0) if squeeze else out


def flow_to_color(flow: np.ndarray | torch.Tensor, max_magnitude: float | None = None) -> Frame:
    """HSV color-wheel rendering of a 2xHxW flow field.

    Hue encodes direction, saturation the magnitude relative to
    ``max_magnitude`` (defaults to the field's largest displacement). Zero
    motion renders white.
    """
    if isinstance(flow, torch.Tensor):
        flow = flow.detach().cpu().numpy()
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected a 2xHxW flow, got {flow.shape}")
    u, v = flow
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    sat = np.clip(mag / max_magnitude, 0.0, 1.0) if max_magnitude > 0 else np.zeros_like(mag)
    hsv = np.stack([hue, sat, np.ones_like(mag)], axis=-1)
    rgb = hsv_to_rgb(hsv)
    return Frame(rgb.transpose(2, 0, 1), RGB)


def write_flow(flow: np.ndarray | torch.Tensor, path: str | os.PathLike) -> None:
    """Dump a flow field: big-endian int32 H, W then float32 values (2xHxW, row-major)."""
    if isinstance(flow, torch.Tensor):
        flow = flow.detach().cpu().numpy()
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected a 2xHxW flow, got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", h, w))
        fh.write(flow.astype(">f4").tobytes(order="C"))


def read_flow(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated flow header")
    h, w = struct.unpack(">ii", raw[:8])
    expected = 8 + 2 * h * w * 4
    if h < 1 or w < 1 or len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header {h}x{w}")
    return np.frombuffer(raw[8:], dtype=">f4").reshape(2, h, w).astype(np.float32)


def endpoint_error(flow: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    """Mean Euclidean distance between two flows over ``mask`` (all pixels by default)."""
    err = torch.linalg.vector_norm(flow - target, dim=-3)
    if mask is None:
        return float(err.mean())
    mask = mask.to(err.dtype).expand_as(err)
    return float((err * mask).sum() / mask.sum().clamp(min=1))
