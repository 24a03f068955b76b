"""Mutation fuzzing of coded streams against a parser."""

from __future__ import annotations

from collections import Counter
from typing import Callable, Sequence

import numpy as np

from . import bitstream
from .errors import CodecError

MUTATIONS = ("bit_flips", "header_flip", "truncate", "random_body", "splice")


def mutate(data: bytes, kind: str, rng: np.random.Generator) -> bytes:
    """Return a corrupted copy of ``data`` using one of :data:`MUTATIONS`."""
    out = bytearray(data)
    if kind == "bit_flips":
        for _ in range(int(rng.integers(1, 4))):
            pos = int(rng.integers(len(out)))
            out[pos] ^= 1 << int(rng.integers(8))
    elif kind == "header_flip":
        # aim at the fixed header and the first length fields
        pos = int(rng.integers(min(len(out), 48)))
        out[pos] ^= 1 << int(rng.integers(8))
    elif kind == "truncate":
        out = out[:int(rng.integers(len(out)))]
    elif kind == "random_body":
        out = bytearray(bitstream.MAGIC + bytes([bitstream.VERSION]) + rng.bytes(int(rng.integers(0, 200))))
    elif kind == "splice":
        pos = int(rng.integers(len(out)))
        out[pos:pos + 4] = rng.bytes(4)
    else:
        raise ValueError(f"unknown mutation {kind!r}; choose from {MUTATIONS}")
    return bytes(out)


def fuzz_parse(parse: Callable[[bytes], object], bases: Sequence[bytes], trials: int,
               seed: int = 0) -> Counter:
    """Feed mutated streams to ``parse`` and tally the outcomes.

    Keys are ``"ok"``, the class name of each typed :class:`CodecError`, and
    ``"unhandled:<name>"`` for any other exception. A typed error with an
    empty message also counts as unhandled.
    """
    if not bases:
        raise ValueError("fuzzing needs at least one valid stream")
    rng = np.random.default_rng(seed)
    outcomes: Counter = Counter()
    for trial in range(trials):
        data = mutate(bases[trial % len(bases)], MUTATIONS[trial % len(MUTATIONS)], rng)
        try:
            parse(data)
            outcomes["ok"] += 1
        except CodecError as err:
            name = type(err).__name__
            outcomes[name if str(err) else f"unhandled:{name}"] += 1
        except Exception as err:  # noqa: BLE001 - the point is to catch everything
            outcomes[f"unhandled:{type(err).__name__}"] += 1
    return outcomes


def unhandled(outcomes: Counter) -> int:
    return sum(n for k, n in outcomes.items() if k.startswith("unhandled:"))
