"""Deterministic random streams.

All stochastic behaviour in the package flows through :class:`Rng`, a thin
wrapper around numpy's PCG64 bit generator.  A given (seed, numpy version)
pair produces an identical stream on every platform, which is what makes
whole training runs bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class Rng:
    """Named deterministic generator (PCG64) with spawnable substreams."""

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        if _ss is None:
            if not (0 <= int(seed) < 2**64):
                raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
            _ss = np.random.SeedSequence(int(seed))
        self.seed = int(seed)
        self._ss = _ss
        self.gen = np.random.Generator(np.random.PCG64(_ss))

    def spawn(self, n: int) -> list["Rng"]:
        """Derive ``n`` independent substreams (init / noise / batching ...)."""
        return [Rng(self.seed, _ss=child) for child in self._ss.spawn(n)]

    def normal(self, std: float, shape, dtype=np.float64) -> np.ndarray:
        out = self.gen.standard_normal(size=shape, dtype=np.float64) * std
        return out.astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def choice(self, a, size=None, replace=True) -> np.ndarray:
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    # PCG64 state as plain uint64 words so checkpoints can persist and
    # restore mid-run streams exactly.
    def state_words(self) -> np.ndarray:
        st = self.gen.bit_generator.state
        s = st["state"]["state"]
        inc = st["state"]["inc"]
        words = [
            s & 0xFFFFFFFFFFFFFFFF,
            (s >> 64) & 0xFFFFFFFFFFFFFFFF,
            inc & 0xFFFFFFFFFFFFFFFF,
            (inc >> 64) & 0xFFFFFFFFFFFFFFFF,
            int(st["has_uint32"]),
            int(st["uinteger"]),
        ]
        return np.array(words, dtype=np.uint64)

    def set_state_words(self, words: np.ndarray) -> None:
        w = [int(x) for x in np.asarray(words, dtype=np.uint64)]
        if len(w) != 6:
            raise ConfigError(f"PCG64 state needs 6 words, got {len(w)}")
        self.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
            "has_uint32": w[4],
            "uinteger": w[5],
        }
