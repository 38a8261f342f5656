import csv
import math

import numpy as np
import pytest
import torch

from mofcodec.config import ModelConfig, TrainSchedule
from mofcodec.data import SyntheticTranslationDataset
from mofcodec.metrics import ms_ssim
from mofcodec.system import build_model
from mofcodec.training import (
    CheckpointError,
    TrainingAborted,
    TrainingError,
    load_checkpoint,
    lr_for_epoch,
    phase1_alpha_mask,
    phase_of,
    rd_loss,
    run_training,
    save_checkpoint,
    trained_networks,
    validation_loss,
)

from conftest import random_frames, tiny_config


def _tiny_schedule(**kw):
    base = dict(phase1_epochs=1, phase2_epochs=2, phase3_epochs=1, batch_size=2, crop=32,
                lr_initial=1e-3, lr_final=1e-4)
    base.update(kw)
    return TrainSchedule(**base)


def test_rd_loss_value():
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    # identical frames: distortion vanishes and the rate term is lam * bpp
    loss = rd_loss(x, x, torch.tensor([1024.0]), torch.tensor([5017.6]), 0.04, 4096)
    assert float(loss) == pytest.approx(0.059, abs=1e-6)


def test_rd_loss_is_batch_mean():
    gen = torch.Generator().manual_seed(1)
    a, b = random_frames(gen, batch=2, height=32, width=32)
    rm, rc = torch.tensor([10.0, 30.0]), torch.tensor([5.0, 0.0])
    full = rd_loss(a, b, rm, rc, 0.1, 1024)
    parts = [rd_loss(a[i:i + 1], b[i:i + 1], rm[i:i + 1], rc[i:i + 1], 0.1, 1024) for i in range(2)]
    assert float(full) == pytest.approx(float(sum(parts)) / 2, rel=1e-6)
    expected = (1 - ms_ssim(a, b)).mean() + 0.1 * 45 / 2 / 1024
    assert float(full) == pytest.approx(float(expected), rel=1e-6)


def test_phase1_mask():
    m = phase1_alpha_mask(4, 4)
    assert m.shape == (1, 4, 4)
    assert m[0].tolist() == [[1, 1, 0, 0]] * 4
    odd = phase1_alpha_mask(3, 5)
    assert float(odd.mean()) == pytest.approx(0.4)


def test_phase_boundaries_default_schedule():
    s = TrainSchedule()
    assert [phase_of(e, s) for e in (1, 5, 6, 50, 51, 70)] == [1, 1, 2, 2, 3, 3]
    assert trained_networks(6, s) == ("mofnet",)
    assert trained_networks(7, s) == ("codec",)
    assert trained_networks(5, s) == trained_networks(51, s) == ("mofnet", "codec")
    with pytest.raises(ValueError):
        phase_of(0, s)
    with pytest.raises(ValueError):
        phase_of(71, s)


def test_learning_rate_endpoints():
    s = TrainSchedule()
    assert lr_for_epoch(1, s) == 1e-4
    assert lr_for_epoch(50, s) == 1e-4
    assert lr_for_epoch(70, s) == pytest.approx(4e-6, rel=1e-12)
    lrs = [lr_for_epoch(e, s) for e in range(51, 71)]
    assert all(x > y for x, y in zip(lrs, lrs[1:]))


def test_schedule_validation():
    from mofcodec.config import ConfigError

    with pytest.raises(ConfigError):
        TrainSchedule(lr_initial=1e-5, lr_final=1e-4)
    with pytest.raises(ConfigError):
        TrainSchedule(phase2_epochs=-1)
    with pytest.raises(ConfigError):
        TrainSchedule(mofnet_lr_scale=0.0)


def _params(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_frozen_network_is_bit_identical(tmp_path):
    data = SyntheticTranslationDataset(4, size=32, seed=3)
    model = build_model(tiny_config(), seed=0)
    snaps = []

    def grab(rec):
        snaps.append((rec.trained, _params(model.mofnet), _params(model.codec)))

    records = run_training(_tiny_schedule(), data, model, tmp_path, seed=0, on_epoch=grab)
    assert [r.phase for r in records] == [1, 2, 2, 3]
    assert [r.trained for r in records] == [("mofnet", "codec"), ("mofnet",), ("codec",), ("mofnet", "codec")]
    # epoch 2 trains only MOFNet, epoch 3 only the codec
    assert _same(snaps[0][2], snaps[1][2]) and not _same(snaps[0][1], snaps[1][1])
    assert _same(snaps[1][1], snaps[2][1]) and not _same(snaps[1][2], snaps[2][2])
    assert records[-1].lr == pytest.approx(1e-4)
    assert all(p.requires_grad for p in model.parameters())


def test_outputs_layout_and_metrics(tmp_path):
    data = SyntheticTranslationDataset(3, size=32, seed=4)
    model = build_model(tiny_config(lam=0.02), seed=0)
    run_training(_tiny_schedule(lam=0.02), data, model, tmp_path)
    assert sorted(p.name for p in (tmp_path / "ckpt" / "0.02").iterdir()) == ["1.bin", "2.bin", "3.bin", "4.bin"]
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    assert [int(r["phase"]) for r in rows] == [1, 2, 2, 3]
    assert all(math.isfinite(float(r["loss"])) and 0 < float(r["ms_ssim"]) <= 1 for r in rows)


def test_training_is_deterministic(tmp_path):
    data = SyntheticTranslationDataset(4, size=32, seed=5)
    sched = _tiny_schedule(phase2_epochs=0, phase3_epochs=1)
    losses = []
    for run in range(2):
        model = build_model(tiny_config(), seed=1)
        losses.append([r.loss for r in run_training(sched, data, model, tmp_path / str(run), seed=7)])
    assert losses[0] == losses[1]


def test_larger_frames_are_cropped(tmp_path):
    data = SyntheticTranslationDataset(2, size=48, seed=6)
    model = build_model(tiny_config(), seed=0)
    recs = run_training(_tiny_schedule(phase2_epochs=0, phase3_epochs=0), data, model, tmp_path)
    assert len(recs) == 1


def test_empty_dataset_refused(tmp_path):
    class Empty(SyntheticTranslationDataset):
        def __len__(self):
            return 0

    with pytest.raises(TrainingError):
        run_training(_tiny_schedule(), Empty(1), build_model(tiny_config(), seed=0), tmp_path)


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    data = SyntheticTranslationDataset(2, size=32, seed=7)
    model = build_model(tiny_config(), seed=0)
    with torch.no_grad():
        model.codec.synthesis[-1].weight.fill_(float("nan"))
    with pytest.raises(TrainingAborted) as info:
        run_training(_tiny_schedule(), data, model, tmp_path)
    assert info.value.checkpoint.exists()
    assert info.value.checkpoint.name == "abort-1.bin"
    _, meta = load_checkpoint(info.value.checkpoint)
    assert meta["reason"] == "non-finite loss"


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(tiny_config("codecnet_only"), seed=2)
    path = save_checkpoint(tmp_path / "m.bin", model, {"epoch": 3})
    back, meta = load_checkpoint(path, expect=tiny_config())
    assert meta == {"epoch": 3}
    assert back.mode == "codecnet_only"
    assert _same(_params(model), _params(back))
    ref, cur = random_frames(torch.Generator().manual_seed(0))
    model.eval(), back.eval()
    with torch.no_grad():
        assert torch.equal(model(ref, cur, "eval").recon, back(ref, cur, "eval").recon)


def test_checkpoint_errors(tmp_path):
    model = build_model(tiny_config(), seed=0)
    path = save_checkpoint(tmp_path / "m.bin", model)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=ModelConfig(internal_features=16, latent_features=8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=tiny_config("residual_skip"))
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    assert not list(tmp_path.glob(".*.tmp"))


def test_validation_loss_modes():
    data = SyntheticTranslationDataset(3, size=32, seed=8)
    model = build_model(tiny_config(), seed=0)
    full = validation_loss(model, data, 0.04)
    skip = validation_loss(model, data, 0.04, mode="skip_only")
    assert math.isfinite(full) and math.isfinite(skip) and full != skip
