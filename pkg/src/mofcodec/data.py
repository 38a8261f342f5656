"""Frame containers, color conversion and pair datasets."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

RGB = "RGB"
YCBCR = "YCbCr"

# BT.601 full range, rows produce (Y, Cb, Cr) from (R, G, B); chroma offset 0.5.
_RGB2YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735891647856, -0.331264108352144, 0.5],
        [0.5, -0.418687589158345, -0.081312410841655],
    ]
)
_YCBCR2RGB = np.linalg.inv(_RGB2YCBCR)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


class FrameFormatError(ValueError):
    """Raised for images that cannot be represented as a 3-channel frame."""


@dataclass
class Frame:
    """A 3xHxW image with values in [0, 1]."""

    data: np.ndarray
    colorspace: str = RGB

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise FrameFormatError(f"expected a 3xHxW array, got shape {self.data.shape}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise FrameFormatError("frame must have H >= 1 and W >= 1")
        if self.colorspace not in (RGB, YCBCR):
            raise FrameFormatError(f"unknown colorspace {self.colorspace!r}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class FramePair:
    reference: Frame
    current: Frame

    def __post_init__(self):
        if self.reference.shape != self.current.shape:
            raise ValueError(
                f"pair frames differ in shape: {self.reference.shape} vs {self.current.shape}"
            )
        if self.reference.colorspace != self.current.colorspace:
            raise ValueError("pair frames differ in colorspace")


def load_frame(path: str | os.PathLike) -> Frame:
    """Read an 8- or 16-bit lossless image into an RGB frame."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FrameFormatError(f"{path}: expected 3 channels, got array of shape {arr.shape}")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FrameFormatError(f"{path}: unsupported sample type {arr.dtype}")
    return Frame(arr.transpose(2, 0, 1).astype(np.float64) / scale, RGB)


def save_frame(frame: Frame | np.ndarray, path: str | os.PathLike) -> None:
    """Write a frame (or a 1xHxW / 3xHxW array in [0, 1]) as an 8-bit PNG."""
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    data = np.clip(data, 0.0, 1.0)
    img = np.round(data * 255.0).astype(np.uint8)
    if img.shape[0] == 1:
        Image.fromarray(img[0], mode="L").save(path)
    else:
        Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(path)


def rgb_to_ycbcr(frame: Frame) -> Frame:
    if frame.colorspace != RGB:
        raise ValueError(f"rgb_to_ycbcr expects an RGB frame, got {frame.colorspace}")
    out = np.einsum("ij,jhw->ihw", _RGB2YCBCR, frame.data) + _CHROMA_OFFSET[:, None, None]
    return Frame(out, YCBCR)


def ycbcr_to_rgb(frame: Frame) -> Frame:
    if frame.colorspace != YCBCR:
        raise ValueError(f"ycbcr_to_rgb expects a YCbCr frame, got {frame.colorspace}")
    out = np.einsum("ij,jhw->ihw", _YCBCR2RGB, frame.data - _CHROMA_OFFSET[:, None, None])
    return Frame(out, RGB)


def crop_offset_range(height: int, width: int, size: int) -> tuple[int, int]:
    """Largest valid (y, x) offsets for a size x size crop."""
    if size > min(height, width) or size < 1:
        raise ValueError(f"crop size {size} does not fit a {height}x{width} frame")
    return height - size, width - size


def sample_crop_pair(pair: FramePair, size: int, rng: np.random.Generator) -> FramePair:
    """Crop both frames of ``pair`` at the same random offset."""
    max_y, max_x = crop_offset_range(pair.current.height, pair.current.width, size)
    y = int(rng.integers(0, max_y + 1))
    x = int(rng.integers(0, max_x + 1))
    window = (slice(None), slice(y, y + size), slice(x, x + size))
    return FramePair(
        Frame(pair.reference.data[window], pair.reference.colorspace),
        Frame(pair.current.data[window], pair.current.colorspace),
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` determined only by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


class PairDataset:
    """Base class: indexable collection of frame pairs."""

    def __len__(self) -> int:
        raise NotImplementedError

    def __getitem__(self, idx: int) -> FramePair:
        raise NotImplementedError

    def iter_epoch(self, seed: int, epoch: int) -> Iterator[FramePair]:
        for idx in epoch_order(len(self), seed, epoch):
            yield self[int(idx)]


@dataclass
class SequenceEntry:
    name: str
    frames: int


class FrameDirectoryDataset(PairDataset):
    """Consecutive-frame pairs from ``<root>/<sequence>/<index>.png``.

    Sequences and frame counts come from ``<root>/manifest.json``::

        {"sequences": [{"name": "seqA", "frames": 30}, ...]}

    Frame files are named by their zero-based index, optionally zero padded.
    With ``crop`` set, each access samples a crop at an offset derived from
    (seed, index) so repeated access is reproducible.
    """

    def __init__(self, root: str | os.PathLike, crop: int | None = None, seed: int = 0,
                 colorspace: str = YCBCR):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.is_file():
            raise FileNotFoundError(f"dataset manifest not found: {manifest}")
        with open(manifest) as fh:
            doc = json.load(fh)
        self.sequences = [SequenceEntry(s["name"], int(s["frames"])) for s in doc["sequences"]]
        self.crop = crop
        self.seed = seed
        self.colorspace = colorspace
        self._pairs: list[tuple[str, int]] = []
        for seq in self.sequences:
            # stride-1 enumeration, no scene-cut filtering
            self._pairs.extend((seq.name, i) for i in range(1, seq.frames))

    def __len__(self) -> int:
        return len(self._pairs)

    def _frame_path(self, seq: str, idx: int) -> Path:
        seq_dir = self.root / seq
        plain = seq_dir / f"{idx}.png"
        if plain.is_file():
            return plain
        matches = sorted(p for p in seq_dir.glob("*.png") if p.stem.isdigit() and int(p.stem) == idx)
        if not matches:
            raise FileNotFoundError(f"missing frame {idx} of sequence {seq}")
        return matches[0]

    def __getitem__(self, idx: int) -> FramePair:
        seq, cur = self._pairs[idx]
        ref_frame = load_frame(self._frame_path(seq, cur - 1))
        cur_frame = load_frame(self._frame_path(seq, cur))
        if self.colorspace == YCBCR:
            ref_frame, cur_frame = rgb_to_ycbcr(ref_frame), rgb_to_ycbcr(cur_frame)
        pair = FramePair(ref_frame, cur_frame)
        if self.crop is not None:
            pair = sample_crop_pair(pair, self.crop, np.random.default_rng([self.seed, idx]))
        return pair


def write_manifest(root: str | os.PathLike, sequences: Sequence[SequenceEntry]) -> None:
    doc = {"sequences": [{"name": s.name, "frames": s.frames} for s in sequences]}
    with open(Path(root) / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def smooth_texture(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Random 3-channel texture mixing a few blur scales, values in [0, 1]."""
    out = np.zeros((3, height, width))
    for sigma, weight in ((1.5, 0.3), (3.0, 0.5), (6.0, 0.7)):
        noise = rng.standard_normal((3, height, width))
        layer = np.stack([ndimage.gaussian_filter(c, sigma, mode="wrap") for c in noise])
        layer /= layer.std() + 1e-12
        out += weight * layer
    # correlate channels a little so frames look less like pure noise
    mix = np.array([[1.0, 0.0, 0.0], [0.5, 0.8, 0.0], [0.3, 0.2, 0.8]])
    out = np.einsum("ij,jhw->ihw", mix, out)
    out = 0.5 + 0.15 * out / (out.std(axis=(1, 2), keepdims=True) + 1e-12)
    return np.clip(out, 0.0, 1.0)


@dataclass
class TranslationPair:
    pair: FramePair
    shift: tuple[float, float]  # (dx, dy) in pixels


class SyntheticTranslationDataset(PairDataset):
    """Pairs where the current frame is the reference under a global shift.

    ``current(x, y) = reference_canvas(x + dx, y + dy)``, so the true backward
    flow is the constant field ``(dx, dy)``. Content is cut from a larger
    canvas so both frames carry real texture up to the border.
    """

    def __init__(self, count: int, size: int = 64, max_shift: float = 3.0, seed: int = 0,
                 zero_motion: bool = False):
        if count < 1:
            raise ValueError("synthetic dataset needs at least one pair")
        self.count = count
        self.size = size
        self.max_shift = max_shift
        self.seed = seed
        self.zero_motion = zero_motion
        self._cache: dict[int, TranslationPair] = {}

    def __len__(self) -> int:
        return self.count

    def sample(self, idx: int) -> TranslationPair:
        if idx in self._cache:
            return self._cache[idx]
        rng = np.random.default_rng([self.seed, 7919, idx])
        margin = int(np.ceil(self.max_shift)) + 2
        canvas_size = self.size + 2 * margin
        canvas = smooth_texture(canvas_size, canvas_size, rng)
        if self.zero_motion:
            dx = dy = 0.0
        else:
            dx, dy = rng.uniform(-self.max_shift, self.max_shift, size=2)
        ys, xs = np.mgrid[0:self.size, 0:self.size].astype(np.float64) + margin
        ref = canvas[:, margin:margin + self.size, margin:margin + self.size]
        cur = np.stack([
            ndimage.map_coordinates(c, [ys + dy, xs + dx], order=1, mode="nearest") for c in canvas
        ])
        item = TranslationPair(FramePair(Frame(ref, YCBCR), Frame(cur, YCBCR)), (float(dx), float(dy)))
        self._cache[idx] = item
        return item

    def __getitem__(self, idx: int) -> FramePair:
        return self.sample(idx).pair

    def shift(self, idx: int) -> tuple[float, float]:
        return self.sample(idx).shift


def pair_to_tensors(pairs: Sequence[FramePair], dtype=None):
    """Stack pairs into (reference, current) tensors of shape Bx3xHxW."""
    import torch

    dtype = dtype or torch.float32
    ref = torch.from_numpy(np.stack([p.reference.data for p in pairs])).to(dtype)
    cur = torch.from_numpy(np.stack([p.current.data for p in pairs])).to(dtype)
    return ref, cur
