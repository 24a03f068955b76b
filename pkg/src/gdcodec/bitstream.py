"""Wire format of a coded image.

All integers are big-endian::

    offset  size  field
    0       4     magic "GDC1"
    4       1     version (1)
    5       2     width
    7       2     height
    9       1     rate level
    10      8     sampling seed
    18      8     model checksum (truncated SHA-256 of the decoder-side checkpoints)
    26      2     renorm payload length R
    28      R     renorm payload
    28+R    4     hyper-latent payload length Z
    32+R    Z     hyper-latent range-coder bytes
    32+R+Z  4     main-latent payload length Y
    36+R+Z  Y     main-latent range-coder bytes

Fixed overhead is 36 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .codec_core import NUM_RATE_LEVELS
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    InvalidHeaderError,
    StreamTruncatedError,
    UnsupportedVersionError,
)

MAGIC = b"GDC1"
VERSION = 1
_HEAD = struct.Struct(">4sBHHBQ8s")
HEADER_OVERHEAD = _HEAD.size + 2 + 4 + 4
MAX_DIM = 65535
DIM_MULTIPLE = 16


@dataclass(frozen=True)
class CodedStream:
    width: int
    height: int
    rate_level: int
    seed: int
    checksum: bytes
    renorm: bytes
    hyper: bytes
    main: bytes

    @property
    def payload_bytes(self) -> int:
        """Entropy-coded latent bytes only."""
        return len(self.hyper) + len(self.main)

    def __len__(self) -> int:
        return HEADER_OVERHEAD + len(self.renorm) + self.payload_bytes


def _validate(stream: CodedStream) -> None:
    for name in ("width", "height"):
        v = getattr(stream, name)
        if not 0 < v <= MAX_DIM:
            raise ValueError(f"{name} {v} outside [1, {MAX_DIM}]")
    if not 0 <= stream.rate_level < NUM_RATE_LEVELS:
        raise ValueError(f"rate level {stream.rate_level} outside [0, {NUM_RATE_LEVELS - 1}]")
    if not 0 <= stream.seed < 2**64:
        raise ValueError("seed must fit in 64 unsigned bits")
    if len(stream.checksum) != 8:
        raise ValueError("checksum must be 8 bytes")
    if len(stream.renorm) > 0xFFFF:
        raise ValueError("renorm payload exceeds 65535 bytes")
    for name in ("hyper", "main"):
        if len(getattr(stream, name)) > 0xFFFFFFFF:
            raise ValueError(f"{name} payload too large")


def pack(stream: CodedStream) -> bytes:
    _validate(stream)
    head = _HEAD.pack(MAGIC, VERSION, stream.width, stream.height, stream.rate_level,
                      stream.seed, stream.checksum)
    return b"".join([
        head,
        struct.pack(">H", len(stream.renorm)), stream.renorm,
        struct.pack(">I", len(stream.hyper)), stream.hyper,
        struct.pack(">I", len(stream.main)), stream.main,
    ])


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise StreamTruncatedError(
                f"{what}: need {n} bytes at offset {self.pos}, stream has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def unpack(data: bytes, expected_checksum: bytes | None = None) -> CodedStream:
    """Parse and validate a stream; magic and version are checked before anything else."""
    data = bytes(data)
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 5:
        raise StreamTruncatedError("stream ends inside the header")
    if data[4] != VERSION:
        raise UnsupportedVersionError(f"stream version {data[4]}, decoder supports {VERSION}")
    cur = _Cursor(data)
    _, _, width, height, level, seed, checksum = _HEAD.unpack(cur.take(_HEAD.size, "header"))
    renorm = cur.take(struct.unpack(">H", cur.take(2, "renorm length"))[0], "renorm payload")
    hyper = cur.take(struct.unpack(">I", cur.take(4, "hyper length"))[0], "hyper payload")
    main = cur.take(struct.unpack(">I", cur.take(4, "main length"))[0], "main payload")
    if cur.pos != len(data):
        raise StreamTruncatedError(
            f"declared section lengths end at byte {cur.pos} but the stream has {len(data)} bytes"
        )
    if width == 0 or height == 0 or width % DIM_MULTIPLE or height % DIM_MULTIPLE:
        raise InvalidHeaderError(f"image size {width}x{height} is not a positive multiple of {DIM_MULTIPLE}")
    if level >= NUM_RATE_LEVELS:
        raise InvalidHeaderError(f"rate level {level} outside [0, {NUM_RATE_LEVELS - 1}]")
    if expected_checksum is not None and checksum != expected_checksum:
        raise ChecksumMismatchError(checksum, expected_checksum)
    return CodedStream(width, height, level, seed, checksum, renorm, hyper, main)
