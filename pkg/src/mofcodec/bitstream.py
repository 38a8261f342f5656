"""P-frame bitstream container.

Layout (all integers big-endian)::

    magic    4 bytes  b"MOFC"
    version  u8
    lambda   u8       index into config.LAMBDA_TABLE, 255 if unlisted
    height   u16
    width    u16
    lengths  4 x u32  MOFNet hyper, MOFNet main, CodecNet hyper, CodecNet main
    payloads          concatenated in the same order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .entropy import DecodeError

MAGIC = b"MOFC"
VERSION = 1
_HEADER = struct.Struct(">4sBBHHIIII")
HEADER_SIZE = _HEADER.size

SLOT_NAMES = ("mof_hyper", "mof_main", "codec_hyper", "codec_main")


@dataclass(frozen=True)
class Bitstream:
    lambda_index: int
    height: int
    width: int
    payloads: tuple[bytes, bytes, bytes, bytes]

    def __post_init__(self):
        if len(self.payloads) != 4:
            raise ValueError("a bitstream carries exactly four payloads")
        if not (0 < self.height < 1 << 16 and 0 < self.width < 1 << 16):
            raise ValueError(f"frame size {self.height}x{self.width} not representable")
        if not 0 <= self.lambda_index < 256:
            raise ValueError("lambda index must fit in a byte")

    @property
    def payload_bits(self) -> int:
        return 8 * sum(len(p) for p in self.payloads)

    @property
    def total_bits(self) -> int:
        return 8 * HEADER_SIZE + self.payload_bits

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, VERSION, self.lambda_index, self.height, self.width,
                              *(len(p) for p in self.payloads))
        return header + b"".join(self.payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise DecodeError("stream shorter than its header")
        magic, version, lam, h, w, *lengths = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DecodeError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DecodeError(f"unsupported stream version {version}")
        if h == 0 or w == 0:
            raise DecodeError("zero frame dimension in header")
        expected = HEADER_SIZE + sum(lengths)
        if len(data) < expected:
            raise DecodeError(f"stream truncated: {len(data)} of {expected} bytes")
        if len(data) > expected:
            raise DecodeError(f"{len(data) - expected} unexpected trailing bytes")
        payloads, pos = [], HEADER_SIZE
        for n in lengths:
            payloads.append(bytes(data[pos:pos + n]))
            pos += n
        return cls(lam, h, w, tuple(payloads))
