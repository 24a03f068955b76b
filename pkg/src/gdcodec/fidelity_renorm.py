"""Block-wise color-moment renormalization of decoded images.

The encoder measures the mean and population standard deviation of every
channel inside every block of the original image and sends them as 6-bit
codes. The decoder measures the same statistics on its reconstruction and
rescales each block so its moments match the transmitted ones::

    out = (x_rec - m_rec) / max(s_rec, s_floor) * sigma + mu
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import RenormFormatError

LEVELS = 64
MU_RANGE = (0.0, 1.0)
SIGMA_RANGE = (0.0, 0.5)
S_FLOOR = 1e-4
DEFAULT_BLOCK = 16
PAPER_BLOCK = 64
CODE_BITS = 6
HEADER_BYTES = 5


def _step(lo_hi) -> float:
    lo, hi = lo_hi
    return (hi - lo) / (LEVELS - 1)


MU_STEP = _step(MU_RANGE)
SIGMA_STEP = _step(SIGMA_RANGE)


def quantize(values, lo_hi) -> np.ndarray:
    lo, hi = lo_hi
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return np.floor((v - lo) / _step(lo_hi) + 0.5).astype(np.uint8)


def dequantize(codes, lo_hi) -> np.ndarray:
    return lo_hi[0] + np.asarray(codes, dtype=np.float64) * _step(lo_hi)


@dataclass
class RenormParams:
    """6-bit mean/std codes per block and channel, ``[rows, cols, channels]``."""

    block_size: int
    mu_codes: np.ndarray
    sigma_codes: np.ndarray

    def __post_init__(self):
        self.mu_codes = np.asarray(self.mu_codes, dtype=np.uint8)
        self.sigma_codes = np.asarray(self.sigma_codes, dtype=np.uint8)
        if self.mu_codes.shape != self.sigma_codes.shape or self.mu_codes.ndim != 3:
            raise ValueError("mu and sigma code grids must share a [rows, cols, channels] shape")
        if min(self.mu_codes.shape) < 1:
            raise ValueError("renormalization grid must be at least 1x1")
        if self.mu_codes.max(initial=0) >= LEVELS or self.sigma_codes.max(initial=0) >= LEVELS:
            raise ValueError(f"codes must lie in [0, {LEVELS - 1}]")
        if not 1 <= self.block_size <= 255:
            raise ValueError(f"block size {self.block_size} outside [1, 255]")

    @property
    def grid(self) -> tuple[int, int]:
        return self.mu_codes.shape[:2]

    @property
    def mu(self) -> np.ndarray:
        return dequantize(self.mu_codes, MU_RANGE)

    @property
    def sigma(self) -> np.ndarray:
        return dequantize(self.sigma_codes, SIGMA_RANGE)

    @property
    def num_codes(self) -> int:
        return 2 * self.mu_codes.size

    def __eq__(self, other):
        return (
            isinstance(other, RenormParams)
            and self.block_size == other.block_size
            and np.array_equal(self.mu_codes, other.mu_codes)
            and np.array_equal(self.sigma_codes, other.sigma_codes)
        )


def grid_shape(height: int, width: int, block_size: int) -> tuple[int, int]:
    return math.ceil(height / block_size), math.ceil(width / block_size)


def _as_chw(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a [C, H, W] image, got shape {x.shape}")
    return x


def block_moments(x, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-block, per-channel mean and population std, ``[rows, cols, C]`` each.

    Edge blocks smaller than ``block_size`` use their actual pixel count.
    """
    x = _as_chw(x)
    c, h, w = x.shape
    rows, cols = grid_shape(h, w, block_size)
    mean = np.empty((rows, cols, c))
    std = np.empty((rows, cols, c))
    for i in range(rows):
        for j in range(cols):
            blk = x[:, i * block_size:(i + 1) * block_size, j * block_size:(j + 1) * block_size]
            flat = blk.reshape(c, -1)
            mean[i, j] = flat.mean(axis=1)
            std[i, j] = flat.std(axis=1)
    return mean, std


def compute_params(x, block_size: int = DEFAULT_BLOCK) -> RenormParams:
    mean, std = block_moments(x, block_size)
    return RenormParams(block_size, quantize(mean, MU_RANGE), quantize(std, SIGMA_RANGE))


def apply_renorm(x_rec, params: RenormParams, s_floor: float = S_FLOOR, clamp: bool = True) -> np.ndarray:
    """Match every block's channel moments to the transmitted targets."""
    x = _as_chw(x_rec)
    c, h, w = x.shape
    b = params.block_size
    if grid_shape(h, w, b) != params.grid or params.mu_codes.shape[2] != c:
        raise ValueError(
            f"renorm grid {params.mu_codes.shape} does not fit a {c}x{h}x{w} image with block {b}"
        )
    mu, sigma = params.mu, params.sigma
    out = np.empty_like(x)
    rows, cols = params.grid
    for i in range(rows):
        for j in range(cols):
            sl = (slice(None), slice(i * b, (i + 1) * b), slice(j * b, (j + 1) * b))
            blk = x[sl]
            flat = blk.reshape(c, -1)
            m = flat.mean(axis=1)[:, None, None]
            s = np.maximum(flat.std(axis=1), s_floor)[:, None, None]
            out[sl] = (blk - m) / s * sigma[i, j][:, None, None] + mu[i, j][:, None, None]
    return np.clip(out, 0.0, 1.0) if clamp else out


def payload_size(num_codes: int) -> int:
    return HEADER_BYTES + math.ceil(num_codes * CODE_BITS / 8)


def side_info_bits(height: int, width: int, block_size: int, channels: int = 3) -> int:
    rows, cols = grid_shape(height, width, block_size)
    return rows * cols * channels * 2 * CODE_BITS


def serialize_params(params: RenormParams) -> bytes:
    """Header ``(block, rows, cols)`` then 6-bit codes, MSB-first, 4 codes per 3 bytes.

    Codes are ordered row-major over blocks, then channels, then (mu, sigma).
    """
    rows, cols = params.grid
    codes = np.stack([params.mu_codes, params.sigma_codes], axis=-1).reshape(-1)
    bits = np.unpackbits(codes[:, None], axis=1)[:, 8 - CODE_BITS:].reshape(-1)
    header = struct.pack(">BHH", params.block_size, rows, cols)
    return header + np.packbits(bits).tobytes()


def deserialize_params(data: bytes, channels: int = 3) -> RenormParams:
    if len(data) < HEADER_BYTES:
        raise RenormFormatError(f"renorm payload of {len(data)} bytes is shorter than its header")
    block, rows, cols = struct.unpack(">BHH", data[:HEADER_BYTES])
    if block == 0 or rows == 0 or cols == 0:
        raise RenormFormatError(f"invalid renorm header: block={block}, grid={rows}x{cols}")
    n_codes = rows * cols * channels * 2
    expected = payload_size(n_codes)
    if len(data) != expected:
        raise RenormFormatError(
            f"renorm payload has {len(data)} bytes, header implies {expected}"
        )
    bits = np.unpackbits(np.frombuffer(data[HEADER_BYTES:], dtype=np.uint8))[: n_codes * CODE_BITS]
    weights = 1 << np.arange(CODE_BITS - 1, -1, -1)
    codes = (bits.reshape(-1, CODE_BITS) * weights).sum(axis=1).astype(np.uint8)
    codes = codes.reshape(rows, cols, channels, 2)
    return RenormParams(block, codes[..., 0], codes[..., 1])
