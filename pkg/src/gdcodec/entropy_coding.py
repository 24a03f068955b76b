"""Quantized Gaussian CDF tables and a carry-less 32-bit range coder.

The coder follows Subbotin's carry-less scheme: 32-bit ``low``/``range``
state, byte-wise output, 16-bit frequency precision. All state updates are
integer operations, so the produced byte strings are identical on every
platform. The inner loops are compiled with numba.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import ndtr

from .errors import CodecError

PRECISION = 16
TOTAL = 1 << PRECISION
SCALE_MIN = 0.04
SYMBOL_LO = -64
SYMBOL_HI = 63
# CDF values below Phi(-TAIL_Z) ~ 1e-19 are flushed to zero, mirroring the
# upper side where Phi(z) already rounds to exactly 1.0 beyond z = TAIL_Z.
TAIL_Z = 9.0

_TOP = 1 << 24
_BOT = 1 << 16
_MASK = (1 << 32) - 1
_MAX_PAD = 2


class EntropyCodingError(CodecError):
    """Base class for range coder failures."""


class SymbolRangeError(EntropyCodingError):
    def __init__(self, index: int, symbol: int, lo: int, hi: int):
        self.index = index
        self.symbol = symbol
        super().__init__(
            f"symbol {symbol} at position {index} outside table range [{lo}, {hi}]"
        )


class TruncatedStreamError(EntropyCodingError):
    def __init__(self, position: int, symbol_index: int):
        self.position = position
        self.symbol_index = symbol_index
        super().__init__(
            f"range decoder ran out of data at byte {position} "
            f"while decoding symbol {symbol_index}"
        )


@dataclass(frozen=True)
class CdfTable:
    """Integer CDF over the symbols ``lo..hi`` (inclusive), total ``2**16``."""

    symbols_lo: int
    symbols_hi: int
    cdf: np.ndarray = field(repr=False)
    mean: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        self.cdf.setflags(write=False)

    @property
    def num_symbols(self) -> int:
        return self.symbols_hi - self.symbols_lo + 1

    def freq(self, symbol: int) -> int:
        k = symbol - self.symbols_lo
        return int(self.cdf[k + 1] - self.cdf[k])

    def prob(self, symbol: int) -> float:
        return self.freq(symbol) / TOTAL

    def pmf(self) -> np.ndarray:
        return np.diff(self.cdf) / TOTAL


def _check_range(lo: int, hi: int) -> None:
    if lo >= hi:
        raise ValueError(f"invalid symbol range: lo={lo} must be < hi={hi}")
    if hi - lo + 1 >= TOTAL:
        raise ValueError(f"symbol range [{lo}, {hi}] too wide for {PRECISION}-bit tables")


def _flushed_ndtr(z: np.ndarray) -> np.ndarray:
    return np.where(z < -TAIL_Z, 0.0, ndtr(z))


def gaussian_pmf(means, scales, lo: int, hi: int) -> np.ndarray:
    """Discretized Gaussian masses with the tails folded into the end symbols.

    Returns an array of shape ``(N, hi - lo + 1)``.
    """
    _check_range(lo, hi)
    means = np.asarray(means, dtype=np.float64).reshape(-1, 1)
    scales = np.maximum(np.asarray(scales, dtype=np.float64).reshape(-1, 1), SCALE_MIN)
    k = np.arange(lo, hi + 1, dtype=np.float64)[None, :]
    upper = _flushed_ndtr((k + 0.5 - means) / scales)
    lower = _flushed_ndtr((k - 0.5 - means) / scales)
    upper[:, -1] = 1.0
    lower[:, 0] = 0.0
    return np.clip(upper - lower, 0.0, 1.0)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Turn rows of probabilities into integer CDFs summing to ``2**16``.

    Every symbol keeps a frequency of at least one; the leftover units are
    handed out by largest remainder so the result stays close to ``pmf``.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    n = pmf.shape[1]
    pmf = pmf / pmf.sum(axis=1, keepdims=True)
    spread = pmf * (TOTAL - n)
    base = np.floor(spread)
    freq = 1 + base.astype(np.int64)
    residual = TOTAL - freq.sum(axis=1)
    order = np.argsort(-(spread - base), axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(pmf.shape[0])[:, None]
    ranks[rows, order] = np.arange(n)[None, :]
    freq += ranks < residual[:, None]
    cdf = np.zeros((pmf.shape[0], n + 1), dtype=np.int32)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


# Cephes rational approximations behind scipy.special.ndtr, ported so the
# compiled table builder reproduces the reference tables bit for bit and only
# leans on libm for exp.
_ERFC_P = np.array([2.46196981473530512524e-10, 5.64189564831068821977e-1, 7.46321056442269912687e0,
                    4.86371970985681366614e1, 1.96520832956077098242e2, 5.26445194995477358631e2,
                    9.34528527171957607540e2, 1.02755188689515710272e3, 5.57535335369399327526e2])
_ERFC_Q = np.array([1.32281951154744992508e1, 8.67072140885989742329e1, 3.54937778887819891062e2,
                    9.75708501743205489753e2, 1.82390916687909736289e3, 2.24633760818710981792e3,
                    1.65666309194161350182e3, 5.57535340817727675546e2])
_ERFC_R = np.array([5.64189583547755073984e-1, 1.27536670759978104416e0, 5.01905042251180477414e0,
                    6.16021097993053585195e0, 7.40974269950448939160e0, 2.97886665372100240670e0])
_ERFC_S = np.array([2.26052863220117276590e0, 9.39603524938001434673e0, 1.20489539808096656605e1,
                    1.70814450747565897222e1, 9.60896809063285878198e0, 3.36907645100081516050e0])
_ERF_T = np.array([9.60497373987051638749e0, 9.00260197203842689217e1, 2.23200534594684319226e3,
                   7.00332514112805075473e3, 5.55923013010394962768e4])
_ERF_U = np.array([3.35617141647503099647e1, 5.21357949780152679795e2, 4.59432382970980127987e3,
                   2.26290000613890934246e4, 4.92673942608635921086e4])
_MAXLOG = 7.09782712893383996843e2
_SQRTH = 7.07106781186547524401e-1


@numba.njit(cache=True)
def _polevl(x, coef):
    acc = coef[0]
    for i in range(1, coef.shape[0]):
        acc = acc * x + coef[i]
    return acc


@numba.njit(cache=True)
def _p1evl(x, coef):
    acc = x + coef[0]
    for i in range(1, coef.shape[0]):
        acc = acc * x + coef[i]
    return acc


@numba.njit(cache=True)
def _erfc_tail(a):
    """erfc for |a| >= 1."""
    x = abs(a)
    z = -a * a
    if z < -_MAXLOG:
        return 2.0 if a < 0 else 0.0
    z = math.exp(z)
    if x < 8.0:
        y = z * _polevl(x, _ERFC_P) / _p1evl(x, _ERFC_Q)
    else:
        y = z * _polevl(x, _ERFC_R) / _p1evl(x, _ERFC_S)
    if a < 0:
        y = 2.0 - y
    if y == 0.0:
        return 2.0 if a < 0 else 0.0
    return y


@numba.njit(cache=True)
def _erf(x):
    if abs(x) > 1.0:
        return 1.0 - _erfc_tail(x)
    z = x * x
    return x * _polevl(z, _ERF_T) / _p1evl(z, _ERF_U)


@numba.njit(cache=True)
def _ndtr(a):
    """Standard normal CDF, identical to ``scipy.special.ndtr``."""
    x = a * _SQRTH
    z = abs(x)
    if z < _SQRTH:
        return 0.5 + 0.5 * _erf(x)
    y = 0.5 * (1.0 - _erf(z) if z < 1.0 else _erfc_tail(z))
    return 1.0 - y if x > 0 else y


@numba.njit(cache=True)
def _select(buf, k):
    """Return the k-th smallest entry of ``buf``, reordering it in place."""
    left, right = 0, buf.shape[0] - 1
    while left < right:
        pivot = buf[(left + right) // 2]
        i, j = left, right
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                buf[i], buf[j] = buf[j], buf[i]
                i += 1
                j -= 1
        if k <= j:
            right = j
        elif k >= i:
            left = i
        else:
            break
    return buf[k]


@numba.njit(cache=True)
def _gaussian_cdf_kernel(means, scales, lo, n, out):
    """Compiled ``quantize_pmf(gaussian_pmf(...))``, one row per (mean, scale).

    Entries whose flushed Gaussian mass is zero get the one-count floor and a
    zero remainder, so the per-entry work is confined to the window
    ``[first, last)`` that carries mass.
    """
    upper = np.empty(n)
    spread = np.zeros(n)
    frac = np.zeros(n)
    scratch = np.empty(n)
    freq = np.ones(n, dtype=np.int64)
    budget = TOTAL - n
    for i in range(means.shape[0]):
        m = means[i]
        s = max(scales[i], SCALE_MIN)
        first, last = -1, n
        for k in range(n - 1):
            z = (lo + k + 0.5 - m) / s
            if z < -TAIL_Z:
                upper[k] = 0.0
                continue
            if z > TAIL_Z or (k > 0 and upper[k - 1] == 1.0):
                last = k + 1
                break
            upper[k] = _ndtr(z)
            if first < 0 and upper[k] > 0.0:
                first = k
        if first < 0 or first >= last:
            first = last - 1
        if last == n:
            upper[n - 1] = 1.0
        else:
            upper[last - 1] = 1.0
        total = 0.0
        prev = upper[first - 1] if first > 0 else 0.0
        for k in range(first, last):
            p = min(max(upper[k] - prev, 0.0), 1.0)
            prev = upper[k]
            spread[k] = p
            total += p
        used = n
        negative = 0
        for k in range(first, last):
            v = spread[k] / total * budget
            b = math.floor(v)
            frac[k] = -(v - b)
            freq[k] = 1 + np.int64(b)
            used += np.int64(b)
            negative += frac[k] < 0.0
        # largest remainders first, ties broken by index (stable sort order)
        extra = TOTAL - used
        if extra > 0:
            if extra <= negative:
                lo_k, hi_k = first, last
            else:
                lo_k, hi_k = 0, n
            width = hi_k - lo_k
            scratch[:width] = frac[lo_k:hi_k]
            cut = _select(scratch[:width], extra - 1)
            for k in range(lo_k, hi_k):
                if frac[k] < cut:
                    freq[k] += 1
                    extra -= 1
            for k in range(lo_k, hi_k):
                if extra == 0:
                    break
                if frac[k] == cut:
                    freq[k] += 1
                    extra -= 1
        acc = 0
        out[i, 0] = 0
        for k in range(n):
            acc += freq[k]
            out[i, k + 1] = acc
        for k in range(first, last):
            spread[k] = 0.0
            frac[k] = 0.0
            freq[k] = 1


def build_cdfs(means, scales, lo: int = SYMBOL_LO, hi: int = SYMBOL_HI) -> np.ndarray:
    """Vectorized :func:`build_cdf`; returns an ``int32`` array ``(N, hi-lo+2)``."""
    _check_range(lo, hi)
    means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1)
    scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(-1)
    if means.shape != scales.shape:
        raise ValueError("means and scales must have the same number of entries")
    n = hi - lo + 1
    out = np.empty((len(means), n + 1), dtype=np.int32)
    _gaussian_cdf_kernel(means, scales, lo, n, out)
    return out


def build_cdf(mean: float, scale: float, lo: int = SYMBOL_LO, hi: int = SYMBOL_HI) -> CdfTable:
    cdf = build_cdfs([mean], [scale], lo, hi)[0]
    return CdfTable(lo, hi, cdf, float(mean), float(max(scale, SCALE_MIN)))


def _stack_tables(tables) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tables, CdfTable):
        raise TypeError("expected a sequence of CdfTable, got a single table")
    if isinstance(tables, tuple) and len(tables) == 2 and isinstance(tables[0], np.ndarray):
        cdfs, offsets = tables
        return np.ascontiguousarray(cdfs, dtype=np.int32), np.ascontiguousarray(
            np.broadcast_to(offsets, (len(cdfs),)), dtype=np.int64
        )
    tables = list(tables)
    if not tables:
        return np.zeros((0, 2), dtype=np.int32), np.zeros(0, dtype=np.int64)
    width = max(t.num_symbols for t in tables) + 1
    cdfs = np.full((len(tables), width), TOTAL, dtype=np.int32)
    offsets = np.empty(len(tables), dtype=np.int64)
    for i, t in enumerate(tables):
        cdfs[i, : t.num_symbols + 1] = t.cdf
        offsets[i] = t.symbols_lo
    return cdfs, offsets


@numba.njit(cache=True)
def _encode_kernel(symbols, cdfs, offsets, out, state):
    """Encode a chunk; ``state = [low, range, bytes_written]`` is updated in place.

    Returns ``-(i + 1)`` if symbol ``i`` is outside its table, else 0.
    """
    low = state[0]
    rng = state[1]
    pos = state[2]
    n_sym = cdfs.shape[1] - 1
    for i in range(symbols.shape[0]):
        k = symbols[i] - offsets[i]
        if k < 0 or k >= n_sym or cdfs[i, k + 1] == cdfs[i, k]:
            return -(i + 1)
        c = np.int64(cdfs[i, k])
        f = np.int64(cdfs[i, k + 1]) - c
        r = rng >> PRECISION
        low += r * c
        if c + f < TOTAL:
            rng = r * f
        else:
            rng -= r * c
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            out[pos] = (low >> 24) & 0xFF
            pos += 1
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
    state[0] = low
    state[1] = rng
    state[2] = pos
    return 0


@numba.njit(cache=True)
def _decode_kernel(data, cdfs, offsets, out, state):
    """Decode a chunk; ``state = [code, low, range, bytes_read]``.

    Returns ``-(i + 1)`` when the data ran out at symbol ``i``, else 0. The
    encoder drops the final two (zero) bytes of its flush; needing more
    padding than that means the stream was cut short.
    """
    n_data = data.shape[0]
    code = state[0]
    low = state[1]
    rng = state[2]
    pos = state[3]
    n_sym = cdfs.shape[1] - 1
    for i in range(out.shape[0]):
        r = rng >> PRECISION
        v = (code - low) // r
        if v >= TOTAL:
            v = TOTAL - 1
        if v < 0:
            v = 0
        # binary search for the last k with cdf[k] <= v
        a = 0
        b = n_sym
        while b - a > 1:
            m = (a + b) >> 1
            if cdfs[i, m] <= v:
                a = m
            else:
                b = m
        c = np.int64(cdfs[i, a])
        f = np.int64(cdfs[i, a + 1]) - c
        out[i] = a + offsets[i]
        low += r * c
        if c + f < TOTAL:
            rng = r * f
        else:
            rng -= r * c
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            if pos >= n_data + _MAX_PAD:
                return -(i + 1)
            byte = np.int64(data[pos]) if pos < n_data else np.int64(0)
            code = ((code << 8) | byte) & _MASK
            pos += 1
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
    state[0] = code
    state[1] = low
    state[2] = rng
    state[3] = pos
    return 0


class RangeEncoder:
    """Incremental encoder; feed symbol chunks with their tables, then :meth:`finish`."""

    def __init__(self):
        self._state = np.array([0, _MASK, 0], dtype=np.int64)
        self._chunks: list[bytes] = []
        self._count = 0
        self._finished = False

    def encode(self, symbols, tables) -> None:
        if self._finished:
            raise RuntimeError("encoder already finished")
        symbols = np.ascontiguousarray(np.asarray(symbols).reshape(-1), dtype=np.int64)
        cdfs, offsets = _stack_tables(tables)
        if len(symbols) != len(cdfs):
            raise ValueError(f"got {len(symbols)} symbols but {len(cdfs)} tables")
        out = np.empty(3 * len(symbols) + 8, dtype=np.uint8)
        self._state[2] = 0
        err = _encode_kernel(symbols, cdfs, offsets, out, self._state)
        if err < 0:
            i = -err - 1
            lo = int(offsets[i])
            hi = lo + int(np.count_nonzero(np.diff(cdfs[i]))) - 1
            self._finished = True
            raise SymbolRangeError(self._count + i, int(symbols[i]), lo, hi)
        self._chunks.append(out[: self._state[2]].tobytes())
        self._count += len(symbols)

    def finish(self) -> bytes:
        # two bytes pin a value inside [low, low + range) since range >= 2**16;
        # the decoder pads the remaining two bytes with zeros
        low = int(self._state[0])
        v = ((low + _BOT - 1) >> 16) << 16
        self._finished = True
        return b"".join(self._chunks) + bytes([(v >> 24) & 0xFF, (v >> 16) & 0xFF])


class RangeDecoder:
    """Incremental decoder mirroring :class:`RangeEncoder`."""

    def __init__(self, data: bytes):
        self._data = np.frombuffer(bytes(data), dtype=np.uint8)
        head = self._data[:4].tolist() + [0] * max(0, 4 - len(self._data))
        code = int.from_bytes(bytes(head), "big")
        self._state = np.array([code, 0, _MASK, 4], dtype=np.int64)
        self._count = 0

    def decode(self, tables) -> np.ndarray:
        cdfs, offsets = _stack_tables(tables)
        out = np.empty(len(cdfs), dtype=np.int64)
        err = _decode_kernel(self._data, cdfs, offsets, out, self._state)
        if err < 0:
            raise TruncatedStreamError(len(self._data), self._count - err - 1)
        self._count += len(cdfs)
        return out

    @property
    def bytes_consumed(self) -> int:
        return int(min(self._state[3], len(self._data)))


def range_encode(symbols, tables) -> bytes:
    """Encode ``symbols[i]`` with ``tables[i]``.

    ``tables`` is either a sequence of :class:`CdfTable` or a pair
    ``(cdfs, offsets)`` as produced by :func:`build_cdfs` plus the symbol
    lower bound(s). Out-of-range symbols raise :class:`SymbolRangeError`.
    """
    enc = RangeEncoder()
    enc.encode(symbols, tables)
    return enc.finish()


def range_decode(data: bytes, tables) -> np.ndarray:
    """Inverse of :func:`range_encode`; returns an ``int64`` array."""
    return RangeDecoder(data).decode(tables)


def ideal_bits(symbols, tables) -> float:
    """Sum of ``-log2 p`` under the quantized table probabilities."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    cdfs, offsets = _stack_tables(tables)
    k = symbols - offsets
    rows = np.arange(len(symbols))
    freq = cdfs[rows, k + 1].astype(np.int64) - cdfs[rows, k]
    return float(-np.log2(freq / TOTAL).sum())
