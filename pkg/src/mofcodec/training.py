"""Rate-distortion loss, the three-phase schedule and checkpointing."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import ModelConfig, TrainSchedule
from .data import PairDataset, pair_to_tensors, sample_crop_pair
from .metrics import ms_ssim
from .system import PFrameCoder

METRICS_COLUMNS = ("epoch", "phase", "loss", "bpp", "ms_ssim")


class TrainingError(RuntimeError):
    """Training could not start or had to stop."""


class TrainingAborted(TrainingError):
    def __init__(self, message: str, checkpoint: Path):
        super().__init__(f"{message}; diagnostic checkpoint at {checkpoint}")
        self.checkpoint = checkpoint


def rd_loss(recon: torch.Tensor, current: torch.Tensor, rate_m: torch.Tensor, rate_c: torch.Tensor,
            lam: float, pixels: int) -> torch.Tensor:
    """``(1 - MS-SSIM) + lam * (rate_m + rate_c) / pixels``, averaged over the batch.

    Rates are in bits per item; dividing by ``pixels`` turns them into bpp.
    """
    rate_m = torch.as_tensor(rate_m, dtype=recon.dtype)
    rate_c = torch.as_tensor(rate_c, dtype=recon.dtype)
    distortion = 1.0 - ms_ssim(recon, current)
    return (distortion + lam * (rate_m + rate_c) / pixels).mean()


def phase1_alpha_mask(height: int, width: int) -> torch.Tensor:
    """1xHxW mask with the left ``W // 2`` columns set to one."""
    mask = torch.zeros(1, height, width)
    mask[..., : width // 2] = 1.0
    return mask


# Epochs are numbered from 1.

def phase_of(epoch: int, schedule: TrainSchedule) -> int:
    if not 1 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{schedule.total_epochs}")
    if epoch <= schedule.phase1_epochs:
        return 1
    if epoch <= schedule.phase1_epochs + schedule.phase2_epochs:
        return 2
    return 3


def trained_networks(epoch: int, schedule: TrainSchedule) -> tuple[str, ...]:
    """Which networks update in ``epoch``; in phase 2 MOFNet takes the first epoch."""
    if phase_of(epoch, schedule) != 2:
        return ("mofnet", "codec")
    k = epoch - schedule.phase1_epochs
    return ("mofnet",) if k % 2 == 1 else ("codec",)


def lr_for_epoch(epoch: int, schedule: TrainSchedule) -> float:
    """Constant through phases 1-2, then cosine decay reaching ``lr_final`` on the last epoch."""
    if phase_of(epoch, schedule) != 3:
        return schedule.lr_initial
    k = epoch - schedule.phase1_epochs - schedule.phase2_epochs
    t = k / schedule.phase3_epochs
    return schedule.lr_final + 0.5 * (schedule.lr_initial - schedule.lr_final) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# checkpoints


def lambda_dirname(lam: float) -> str:
    return f"{lam:g}"


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(path: str | os.PathLike, model: PFrameCoder, meta: dict | None = None) -> Path:
    """Write parameters plus the model config as an npz archive, atomically."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"model": model.config.to_dict(), "dtype": str(next(model.parameters()).dtype),
              "meta": meta or {}}
    arrays["config"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    _atomic_write(path, buf.getvalue())
    return path


class CheckpointError(ValueError):
    """Checkpoint unreadable or inconsistent with the requested model."""


def load_checkpoint(path: str | os.PathLike, expect: ModelConfig | None = None) -> tuple[PFrameCoder, dict]:
    try:
        with np.load(path) as npz:
            header = json.loads(bytes(npz["config"]).decode())
            params = {k[len("param/"):]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    config = ModelConfig.from_dict(header["model"])
    if expect is not None and (expect.internal_features, expect.latent_features, expect.residual) != (
            config.internal_features, config.latent_features, config.residual):
        raise CheckpointError(
            f"checkpoint {path} has widths {config.internal_features}/{config.latent_features}"
            f"{' (residual)' if config.residual else ''}, config asks for "
            f"{expect.internal_features}/{expect.latent_features}{' (residual)' if expect.residual else ''}")
    model = PFrameCoder(config)
    dtype = getattr(torch, header.get("dtype", "torch.float32").split(".")[-1])
    model.to(dtype)
    try:
        model.load_state_dict(params)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
    return model, header.get("meta", {})


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    loss: float
    bpp: float
    ms_ssim: float
    lr: float
    trained: tuple[str, ...]
    checkpoint: Path | None = None


def _batches(dataset: PairDataset, schedule: TrainSchedule, seed: int, epoch: int):
    rng = np.random.default_rng([seed, epoch, 1])
    batch = []
    for pair in dataset.iter_epoch(seed, epoch):
        if pair.current.height != schedule.crop or pair.current.width != schedule.crop:
            pair = sample_crop_pair(pair, schedule.crop, rng)
        batch.append(pair)
        if len(batch) == schedule.batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def _set_trainable(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def run_training(schedule: TrainSchedule, dataset: PairDataset, model: PFrameCoder,
                 outdir: str | os.PathLike, seed: int = 0,
                 on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Run the three-phase schedule, checkpointing after every epoch.

    Layout under ``outdir``: ``ckpt/<lambda>/<epoch>.bin`` and ``metrics.csv``.
    MOFNet and the codec have their own Adam optimizers, so the frozen one in
    a phase-2 epoch is left exactly as it was.
    """
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    outdir = Path(outdir)
    ckpt_dir = outdir / "ckpt" / lambda_dirname(schedule.lam)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    optimizers = {
        "mofnet": torch.optim.Adam(model.mofnet.parameters(), lr=schedule.lr_initial),
        "codec": torch.optim.Adam(model.codec.parameters(), lr=schedule.lr_initial),
    }
    metrics_path = outdir / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRICS_COLUMNS)

    generator = torch.Generator().manual_seed(seed)
    records = []
    mode = model.mode
    for epoch in range(1, schedule.total_epochs + 1):
        phase = phase_of(epoch, schedule)
        trained = trained_networks(epoch, schedule)
        lr = lr_for_epoch(epoch, schedule)
        for name, opt in optimizers.items():
            for group in opt.param_groups:
                group["lr"] = lr * (schedule.mofnet_lr_scale if name == "mofnet" else 1.0)
        _set_trainable(model.mofnet, "mofnet" in trained)
        _set_trainable(model.codec, "codec" in trained)
        model.train()

        sums = np.zeros(3)
        count = 0
        for batch in _batches(dataset, schedule, seed, epoch):
            ref, cur = pair_to_tensors(batch, dtype)
            h, w = cur.shape[-2:]
            alpha = phase1_alpha_mask(h, w).to(dtype) if phase == 1 and mode == "full" else None
            out = model(ref, cur, "train", generator, alpha_override=alpha)
            loss = rd_loss(out.recon, cur, out.rate_m, out.rate_c, schedule.lam, h * w)
            if not torch.isfinite(loss):
                path = save_checkpoint(ckpt_dir / f"abort-{epoch}.bin", model,
                                       {"epoch": epoch, "phase": phase, "reason": "non-finite loss"})
                raise TrainingAborted(f"non-finite loss in epoch {epoch}", path)
            for opt in optimizers.values():
                opt.zero_grad(set_to_none=True)
            loss.backward()
            for name in trained:
                optimizers[name].step()
            with torch.no_grad():
                n = cur.shape[0]
                bpp = float((out.rate_m + out.rate_c).sum()) / (h * w)
                sums += np.array([float(loss) * n, bpp, float(ms_ssim(out.recon, cur).sum())])
                count += n
        _set_trainable(model, True)

        loss_avg, bpp_avg, ssim_avg = (float(v) for v in sums / count)
        path = save_checkpoint(ckpt_dir / f"{epoch}.bin", model,
                               {"epoch": epoch, "phase": phase, "loss": loss_avg, "lambda": schedule.lam})
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, phase, repr(loss_avg), repr(bpp_avg), repr(ssim_avg)])
        record = EpochRecord(epoch, phase, loss_avg, bpp_avg, ssim_avg, lr, trained, path)
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return records


@torch.no_grad()
def validation_loss(model: PFrameCoder, dataset: PairDataset, lam: float, mode: str | None = None,
                    batch_size: int = 16) -> float:
    """Mean RD loss with rounding quantization over the whole dataset."""
    model.eval()
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        pairs = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        ref, cur = pair_to_tensors(pairs, dtype)
        h, w = cur.shape[-2:]
        out = model(ref, cur, "eval", mode=mode)
        total += float(rd_loss(out.recon, cur, out.rate_m, out.rate_c, lam, h * w)) * len(pairs)
        count += len(pairs)
    return total / count
