"""Learned P-frame coding with a jointly coded optical flow and skip/codec mode mask."""

from .config import ModelConfig, RunConfig, TrainSchedule
from .system import PFrameCoder, build_model, decode_pframe, encode_pframe, evaluate_pair

__all__ = [
    "ModelConfig",
    "PFrameCoder",
    "RunConfig",
    "TrainSchedule",
    "build_model",
    "decode_pframe",
    "encode_pframe",
    "evaluate_pair",
]
__version__ = "0.1.0"
