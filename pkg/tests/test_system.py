import numpy as np
import pytest
import torch

from mofcodec.bitstream import HEADER_SIZE, Bitstream
from mofcodec.config import LAMBDA_TABLE, UNLISTED_LAMBDA, lambda_index
from mofcodec.entropy import DecodeError
from mofcodec.motion import bilinear_warp
from mofcodec.system import build_model, decode_pframe, encode_pframe, evaluate_pair, reconstruct

from conftest import random_frames, tiny_config

MODES = ("full", "codecnet_only", "skip_only", "residual_skip")


def test_reconstruct_alpha_zero_is_prediction():
    gen = torch.Generator().manual_seed(0)
    pred, codec = random_frames(gen)
    out = reconstruct(torch.zeros(1, 1, 32, 32), pred, codec * 0)
    assert torch.equal(out, pred)
    assert torch.equal(reconstruct(torch.zeros(1, 1, 32, 32), pred, None), pred)


def test_reconstruct_alpha_one_is_codec_output():
    gen = torch.Generator().manual_seed(1)
    pred, codec = random_frames(gen)
    assert torch.equal(reconstruct(torch.ones(1, 1, 32, 32), pred, codec), codec)


def test_reconstruct_clamps_and_checks_shapes():
    pred = torch.full((1, 3, 4, 4), 0.8)
    out = reconstruct(torch.full((1, 1, 4, 4), 0.5), pred, torch.full((1, 3, 4, 4), 0.9))
    assert torch.all(out == 1.0)
    with pytest.raises(ValueError):
        reconstruct(torch.zeros(1, 1, 4, 5), pred, None)
    with pytest.raises(ValueError):
        reconstruct(torch.zeros(1, 1, 4, 4), pred, torch.zeros(1, 3, 4, 5))


def test_lambda_index():
    assert lambda_index(0.04) == LAMBDA_TABLE.index(0.04)
    assert lambda_index(0.0333) == UNLISTED_LAMBDA


def _model(mode, seed=0):
    return build_model(tiny_config(mode), seed=seed)


@pytest.mark.parametrize("mode", MODES)
def test_roundtrip_bit_exact(mode):
    model = _model(mode)
    gen = torch.Generator().manual_seed(2)
    for _ in range(3):
        ref, cur = random_frames(gen, height=24, width=40)
        stream, result = encode_pframe((ref[0], cur[0]), model)
        data = stream.to_bytes()
        recon = decode_pframe(ref[0], data, model)
        assert torch.equal(recon, result.recon)
        assert result.payload_bits == stream.payload_bits


def test_skip_only_stream_and_output():
    model = _model("skip_only")
    ref, cur = random_frames(torch.Generator().manual_seed(3))
    stream, result = encode_pframe((ref[0], cur[0]), model)
    assert stream.payloads[2] == b"" and stream.payloads[3] == b""
    assert result.rate_c == 0.0
    assert torch.equal(result.recon, bilinear_warp(ref, result.flow[None])[0].clamp(0, 1))
    assert torch.equal(decode_pframe(ref[0], stream, model), result.recon)


def test_skip_only_rejects_codec_payloads():
    model = _model("skip_only")
    ref, cur = random_frames(torch.Generator().manual_seed(4))
    stream, _ = encode_pframe((ref[0], cur[0]), model)
    bad = Bitstream(stream.lambda_index, stream.height, stream.width, stream.payloads[:2] + (b"\x01", b""))
    with pytest.raises(DecodeError):
        decode_pframe(ref[0], bad, model)


def test_truncated_and_padded_streams_fail():
    model = _model("full")
    ref, cur = random_frames(torch.Generator().manual_seed(5))
    stream, _ = encode_pframe((ref[0], cur[0]), model)
    data = stream.to_bytes()
    with pytest.raises(DecodeError):
        decode_pframe(ref[0], data[:-1], model)
    with pytest.raises(DecodeError):
        decode_pframe(ref[0], data + b"\x00", model)
    with pytest.raises(DecodeError):
        decode_pframe(ref[0], data[:HEADER_SIZE - 1], model)
    # a payload shortened inside a consistent container is still caught
    short = Bitstream(stream.lambda_index, stream.height, stream.width,
                      (stream.payloads[0], stream.payloads[1][:-1]) + stream.payloads[2:])
    with pytest.raises(DecodeError):
        decode_pframe(ref[0], short, model)


def test_bitstream_header_errors():
    s = Bitstream(4, 16, 16, (b"a", b"bc", b"", b"d"))
    data = s.to_bytes()
    assert Bitstream.from_bytes(data) == s
    assert s.total_bits == 8 * (HEADER_SIZE + 4)
    with pytest.raises(DecodeError):
        Bitstream.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(DecodeError):
        Bitstream.from_bytes(data[:4] + b"\x09" + data[5:])
    with pytest.raises(ValueError):
        Bitstream(4, 0, 16, (b"",) * 4)
    with pytest.raises(ValueError):
        Bitstream(4, 16, 16, (b"",) * 3)


def test_reference_size_mismatch():
    model = _model("full")
    ref, cur = random_frames(torch.Generator().manual_seed(6))
    stream, _ = encode_pframe((ref[0], cur[0]), model)
    with pytest.raises(ValueError):
        decode_pframe(torch.zeros(3, 16, 32), stream, model)


def test_rate_maps_sum_to_rates():
    model = _model("full")
    ref, cur = random_frames(torch.Generator().manual_seed(7), height=40, width=24)
    _, result = encode_pframe((ref[0], cur[0]), model)
    assert result.rate_map_mof.shape == (40, 24)
    assert result.rate_map_mof.sum() == pytest.approx(result.rate_m, rel=1e-6)
    assert result.rate_map_codec.sum() == pytest.approx(result.rate_c, rel=1e-6)
    assert np.all(result.rate_map_codec >= 0)


def test_coded_rate_close_to_estimate():
    model = _model("full")
    ref, cur = random_frames(torch.Generator().manual_seed(8), height=64, width=64)
    stream, result = encode_pframe((ref[0], cur[0]), model)
    assert stream.payload_bits <= 1.01 * result.rate_total + 4 * 64


def test_forward_rates_match_coding():
    model = _model("full")
    ref, cur = random_frames(torch.Generator().manual_seed(9))
    model.eval()
    with torch.no_grad():
        out = model(ref, cur, "eval")
    _, result = encode_pframe((ref[0], cur[0]), model)
    assert float(out.rate_total[0]) == pytest.approx(result.rate_total, rel=1e-4)
    assert torch.allclose(out.recon[0], result.recon, atol=1e-5)


def test_mode_mismatch_is_rejected():
    model = _model("full")
    ref, cur = random_frames(torch.Generator().manual_seed(10))
    with pytest.raises(ValueError):
        model(ref, cur, "eval", mode="residual_skip")
    with pytest.raises(ValueError):
        model(ref, cur, "eval", mode="bogus")


def test_evaluate_pair():
    model = _model("codecnet_only")
    ref, cur = random_frames(torch.Generator().manual_seed(11))
    point = evaluate_pair((ref[0], cur[0]), model)
    assert 0 < point.ms_ssim <= 1
    assert point.coded_bpp >= point.bpp * 0.9
    assert point.ms_ssim_db > 0
