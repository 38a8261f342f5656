"""Command-line entry point: ``mofcodec <command> [options]``.

Exit codes: 0 on success, 1 on runtime or contract failures (bad stream,
checkpoint mismatch, aborted training), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .bitstream import Bitstream
from .config import MODES, ConfigError, DataConfig, RunConfig, load_run_config
from .data import (
    Frame,
    FrameDirectoryDataset,
    FrameFormatError,
    FramePair,
    PairDataset,
    SyntheticTranslationDataset,
    YCBCR,
    load_frame,
    rgb_to_ycbcr,
    save_frame,
    ycbcr_to_rgb,
)
from .entropy import DecodeError
from .metrics import DomainError, RDCurve, bd_rate, ms_ssim, ms_ssim_db, read_curve
from .motion import flow_to_color
from .system import PFrameCoder, build_model, decode_pframe, encode_pframe, evaluate_pair
from .training import CheckpointError, TrainingError, load_checkpoint, run_training

DATA_ENV = "MOFCODEC_DATA"


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


class RuntimeFailure(Exception):
    """Reported with exit code 1."""


# ---------------------------------------------------------------------------
# helpers


def _data_root(args) -> str | None:
    return args.data if getattr(args, "data", None) else os.environ.get(DATA_ENV)


def open_dataset(spec: str | None, seed: int = 0) -> PairDataset:
    """``synthetic:N`` builds N translation pairs; anything else is a frame directory."""
    if not spec:
        raise UsageError(f"no dataset given: pass --data or set {DATA_ENV}")
    if spec.startswith("synthetic:"):
        try:
            count = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"--data {spec!r}: expected synthetic:<count>") from None
        return SyntheticTranslationDataset(count, seed=seed)
    if not Path(spec, "manifest.json").is_file():
        raise UsageError(f"--data {spec!r}: no manifest.json in that directory")
    return FrameDirectoryDataset(spec, seed=seed)


def _load_model(path: str, mode: str | None, lam: float | None = None) -> PFrameCoder:
    try:
        model, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise RuntimeFailure(str(exc)) from exc
    if mode is not None:
        if (mode == "residual_skip") != model.config.residual:
            raise RuntimeFailure(f"checkpoint {path} was built for mode {model.config.mode!r}, "
                                 f"cannot run {mode!r}")
        model.config.mode = mode
    if lam is not None and abs(lam - model.config.lam) > 1e-12:
        raise RuntimeFailure(f"checkpoint {path} was trained at lambda {model.config.lam}, not {lam}")
    return model


def _read_ycbcr(path: str) -> Frame:
    try:
        return rgb_to_ycbcr(load_frame(path))
    except (OSError, FrameFormatError) as exc:
        raise RuntimeFailure(str(exc)) from exc


def _save_ycbcr(data: torch.Tensor, path: str | Path) -> None:
    save_frame(ycbcr_to_rgb(Frame(data.detach().double().numpy(), YCBCR)), path)


def _normalised(map_: np.ndarray) -> np.ndarray:
    top = float(map_.max())
    return (map_ / top if top > 0 else map_)[None]


def _average_point(model: PFrameCoder, dataset: PairDataset, mode: str | None) -> tuple[float, float]:
    bpp, score = [], []
    for i in range(len(dataset)):
        point = evaluate_pair(dataset[i], model, mode)
        bpp.append(point.coded_bpp)
        score.append(point.ms_ssim)
    return float(np.mean(bpp)), float(np.mean(score))


def _curve_from_checkpoints(paths: list[str], dataset: PairDataset, mode: str | None,
                            label: str) -> tuple[RDCurve, list[tuple[float, float, float]]]:
    if len(paths) < 2:
        raise UsageError(f"curve {label!r} needs at least two checkpoints")
    rows = []
    for path in paths:
        model = _load_model(path, mode)
        bpp, score = _average_point(model, dataset, mode)
        rows.append((model.config.lam, bpp, score))
    return RDCurve([(b, ms_ssim_db(s)) for _, b, s in rows], label), rows


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    try:
        cfg: RunConfig = load_run_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.lam is not None:
        cfg.schedule.lam = cfg.model.lam = args.lam
    if args.mode is not None:
        if (args.mode == "residual_skip") != cfg.model.residual:
            raise UsageError("--mode residual_skip must match the configured model (and vice versa)")
        cfg.model.mode = args.mode
    out = Path(args.out or cfg.output)
    data: DataConfig = cfg.data
    if data.kind == "frames":
        root = _data_root(args) or data.root
        if not root:
            raise UsageError(f"frame dataset needs a root: pass --data or set {DATA_ENV}")
        if not Path(root, "manifest.json").is_file():
            raise UsageError(f"--data {root!r}: no manifest.json in that directory")
        dataset = FrameDirectoryDataset(root, seed=cfg.seed)
    else:
        dataset = SyntheticTranslationDataset(data.count, size=data.size, max_shift=data.max_shift,
                                              seed=cfg.seed)
    model = build_model(cfg.model, seed=cfg.seed)

    def report(rec):
        print(f"epoch {rec.epoch} phase {rec.phase} loss {rec.loss:.6f} bpp {rec.bpp:.4f} "
              f"ms_ssim {rec.ms_ssim:.4f} lr {rec.lr:.3g}", flush=True)

    try:
        run_training(cfg.schedule, dataset, model, out, seed=cfg.seed, on_epoch=report)
    except TrainingError as exc:
        raise RuntimeFailure(str(exc)) from exc
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args.ckpt, args.mode, args.lam)
    pair = FramePair(_read_ycbcr(args.reference), _read_ycbcr(args.current))
    stream, result = encode_pframe(pair, model, args.mode)
    Path(args.out).write_bytes(stream.to_bytes())
    if args.recon:
        _save_ycbcr(result.recon, args.recon)
    h, w = stream.height, stream.width
    print(f"bpp {stream.payload_bits / (h * w):.6f} ({stream.payload_bits} payload bits, {h}x{w})")
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.ckpt, args.mode)
    ref = _read_ycbcr(args.reference)
    try:
        data = Path(args.stream).read_bytes()
    except OSError as exc:
        raise RuntimeFailure(f"cannot read stream: {exc}") from exc
    try:
        stream = Bitstream.from_bytes(data)
        recon = decode_pframe(torch.from_numpy(ref.data), stream, model, args.mode)
    except (DecodeError, ValueError) as exc:
        raise RuntimeFailure(f"cannot decode {args.stream}: {exc}") from exc
    _save_ycbcr(recon, args.out)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt, args.mode)
    dataset = open_dataset(_data_root(args), seed=args.seed or 0)
    bpp, score = _average_point(model, dataset, args.mode)
    print(f"pairs {len(dataset)} bpp {bpp:.6f} ms_ssim {score:.6f} ms_ssim_db {ms_ssim_db(score):.4f}")
    return 0


def cmd_rd_curve(args) -> int:
    dataset = open_dataset(_data_root(args), seed=args.seed or 0)
    _, rows = _curve_from_checkpoints(args.ckpt, dataset, args.mode, args.mode or "full")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "bpp", "ms_ssim", "ms_ssim_db"])
        for lam, bpp, score in rows:
            writer.writerow([repr(lam), repr(bpp), repr(score), repr(ms_ssim_db(score))])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    pts = sorted((b, ms_ssim_db(s)) for _, b, s in rows)
    ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=args.mode or "full")
    ax.set_xlabel("rate [bpp]")
    ax.set_ylabel("MS-SSIM [dB]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), dpi=120)
    plt.close(fig)
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return 0


def _parse_named(items: list[str], flag: str) -> list[tuple[str, str]]:
    named = []
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name or not value:
            raise UsageError(f"{flag} expects NAME=VALUE, got {item!r}")
        named.append((name, value))
    return named


def cmd_ablate(args) -> int:
    curves: list[RDCurve] = []
    for name, path in _parse_named(args.curve or [], "--curve"):
        try:
            curves.append(read_curve(path, name))
        except (OSError, ValueError) as exc:
            raise RuntimeFailure(f"curve {name!r}: {exc}") from exc
    sets = _parse_named(args.set or [], "--set")
    if sets:
        dataset = open_dataset(_data_root(args), seed=args.seed or 0)
        for name, value in sets:
            mode = name if name in MODES else None
            curve, _ = _curve_from_checkpoints(value.split(","), dataset, mode, name)
            curves.append(curve)
    if len(curves) < 2:
        raise UsageError("ablate needs an anchor and at least one variant (--curve/--set)")
    anchor, variants = curves[0], curves[1:]
    rows = []
    for curve in variants:
        try:
            cell = f"{bd_rate(anchor, curve):+.2f}"
        except DomainError:
            cell = "N/A"
        rows.append((curve.label, cell))
    width = max(len(r[0]) for r in rows)
    print(f"BD-rate vs {anchor.label} (%)")
    for label, cell in rows:
        print(f"{label:<{width}}  {cell}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "anchor", "bd_rate_percent"])
            for label, cell in rows:
                writer.writerow([label, anchor.label, cell])
    return 0


def cmd_diagnose(args) -> int:
    model = _load_model(args.ckpt, args.mode)
    pair = FramePair(_read_ycbcr(args.reference), _read_ycbcr(args.current))
    stream, result = encode_pframe(pair, model, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cur = torch.from_numpy(pair.current.data).to(result.recon.dtype)
    alpha = result.alpha
    save_frame(alpha.double().numpy(), out / "alpha.png")
    save_frame(flow_to_color(result.flow), out / "flow.png")
    _save_ycbcr(alpha * cur, out / "codec_in.png")
    _save_ycbcr((1 - alpha) * result.pred, out / "skip_in.png")
    save_frame(_normalised(result.rate_map_codec), out / "rate_codec.png")
    save_frame(_normalised(result.rate_map_mof), out / "rate_mof.png")
    _save_ycbcr(result.recon, out / "recon.png")
    h, w = stream.height, stream.width
    score = float(ms_ssim(result.recon.double(), cur.double()))
    print(f"MS-SSIM = {score:.4f}, codec rate = {result.rate_c / (h * w):.4f} bpp, "
          f"motion rate = {result.rate_m / (h * w):.4f} bpp")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mofcodec", description="Learned P-frame codec with joint flow and mode coding.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--mode", choices=MODES, default=None)
        p.add_argument("--out", default=None)
        if data:
            p.add_argument("--data", default=None,
                           help=f"frame directory with manifest.json or synthetic:<count> (env {DATA_ENV})")

    p = sub.add_parser("train", help="run the three-phase training schedule")
    p.add_argument("--config", required=True)
    common(p, data=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="code one P-frame")
    p.add_argument("--reference", required=True)
    p.add_argument("--current", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--recon", default=None, help="also write the encoder-side reconstruction")
    common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="rebuild a P-frame from its stream")
    p.add_argument("--reference", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--ckpt", required=True)
    common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="average rate and MS-SSIM over a dataset")
    p.add_argument("--ckpt", required=True)
    common(p, data=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-curve", help="RD points for an ordered checkpoint list")
    p.add_argument("--ckpt", nargs="+", required=True)
    common(p, data=True)
    p.set_defaults(func=cmd_rd_curve)

    p = sub.add_parser("ablate", help="BD-rate of variants against the first curve")
    p.add_argument("--curve", action="append", help="NAME=curve.csv with bpp,ms_ssim_db columns")
    p.add_argument("--set", action="append", help="NAME=ckpt1,ckpt2,... evaluated on --data")
    common(p, data=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="dump alpha, flow, rate maps and reconstruction")
    p.add_argument("--reference", required=True)
    p.add_argument("--current", required=True)
    p.add_argument("--ckpt", required=True)
    common(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for required in ("out",):
            if args.command in ("encode", "decode", "rd-curve", "diagnose") and not getattr(args, required):
                raise UsageError(f"{args.command} requires --{required}")
        return args.func(args)
    except UsageError as exc:
        print(f"mofcodec: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeFailure as exc:
        print(f"mofcodec: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
