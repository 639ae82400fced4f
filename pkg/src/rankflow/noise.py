"""Addressable Gaussian noise.

Every increment has an address ``(replica, series, name, step)``.  The
production source gives each ``(replica, series, name)`` triple its own
Philox stream, keyed by

    key = [seed, series << 56 | replica << 32 | zigzag(name)]

and the ``step``-th standard normal drawn from that stream is the increment.
Adding replicas or particles therefore never perturbs existing ones, and
chunked reads see the same numbers as one long read.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import PreconditionError

__all__ = ["SERIES", "noise_key", "NoiseStream", "PhiloxNoise", "ScriptedNoise"]

# series identifiers; stable because they are part of every stream key
SERIES = {"particle": 1, "rank": 2, "init": 3, "outer": 4}

_MAX_REPLICA = 1 << 24
_MAX_NAME = 1 << 31


def _zigzag(name: int) -> int:
    return (name << 1) if name >= 0 else ((-name << 1) - 1)


def noise_key(seed: int, replica: int, series: str, name: int) -> list:
    if series not in SERIES:
        raise PreconditionError(f"unknown noise series {series!r}")
    if not 0 <= replica < _MAX_REPLICA:
        raise PreconditionError(f"replica index {replica} out of range")
    if not -_MAX_NAME <= name < _MAX_NAME:
        raise PreconditionError(f"name {name} out of range")
    packed = (SERIES[series] << 56) | (replica << 32) | _zigzag(int(name))
    return [int(seed) & (2**64 - 1), packed]


class NoiseStream:
    """Interface: ``block`` returns increments for a run of consecutive steps."""

    def block(self, replica: int, series: str, names, start: int, count: int) -> np.ndarray:
        """Array of shape ``(count, len(names))`` for steps ``start .. start + count - 1``."""
        raise NotImplementedError

    def generator(self, replica: int, series: str, name: int = 0) -> np.random.Generator:
        """A generator owned by one address, for non-increment randomness (initial gaps)."""
        raise NotImplementedError


class PhiloxNoise(NoiseStream):
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams = {}

    def _stream(self, replica, series, name, start):
        addr = (replica, series, int(name))
        entry = self._streams.get(addr)
        if entry is None or entry[1] > start:
            entry = [self.generator(replica, series, name), 0]
            self._streams[addr] = entry
        if entry[1] < start:
            # skip forward; normals are drawn one per step so this stays aligned
            entry[0].standard_normal(start - entry[1])
            entry[1] = start
        return entry

    def block(self, replica, series, names, start, count):
        out = np.empty((len(names), count))
        for j, name in enumerate(names):
            entry = self._stream(replica, series, name, start)
            out[j] = entry[0].standard_normal(count)
            entry[1] += count
        return np.ascontiguousarray(out.T)

    def generator(self, replica, series, name=0):
        return np.random.Generator(np.random.Philox(key=noise_key(self.seed, replica, series, name)))

    def release(self, replica: int):
        """Drop cached streams of a finished replica."""
        for addr in [a for a in self._streams if a[0] == replica]:
            del self._streams[addr]


class ScriptedNoise(NoiseStream):
    """A finite table of increments keyed by ``(replica, name, step)``; absent entries are ``default``.

    The series is ignored so one script can drive any engine.
    """

    def __init__(self, table: Mapping | None = None, default: float = 0.0, seed: int = 0):
        self.table = dict(table or {})
        self.default = float(default)
        self.seed = int(seed)

    def block(self, replica, series, names, start, count):
        out = np.full((count, len(names)), self.default)
        for (r, name, step), value in self.table.items():
            if r == replica and start <= step < start + count:
                where = [j for j, n in enumerate(names) if n == name]
                out[step - start, where] = value
        return out

    def generator(self, replica, series, name=0):
        return np.random.Generator(np.random.Philox(key=noise_key(self.seed, replica, series, name)))
