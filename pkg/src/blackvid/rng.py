"""Seeded random streams.

Every stochastic choice in the toolkit (parameter init, mask draws, mixing
weights, shuffles, synthetic data) flows through an RngState so that a run is
fully determined by its seed.  Substreams derived via ``spawn`` are stable
across runs and independent of call order in the parent stream.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ConfigError


def _key_ints(keys) -> list[int]:
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode("utf-8")))
        else:
            out.append(int(k) & 0xFFFFFFFFFFFFFFFF)
    return out


class RngState:
    """A deterministic random stream: a seed plus an advancing position.

    Identical seed and identical call sequence produce identical outputs.
    Not shareable across threads during a training step.
    """

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        ss = _ss if _ss is not None else np.random.SeedSequence(self.seed)
        self._ss = ss
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *keys) -> "RngState":
        """Derive an independent substream from (seed, keys).

        Strings are hashed stably (crc32), so per-video substreams keyed by id
        are reproducible across processes.
        """
        ss = np.random.SeedSequence([self.seed, *_key_ints(keys)])
        return RngState(self.seed, _ss=ss)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def beta(self, a: float, b: float, size=None):
        return self._gen.beta(a, b, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngState(seed={self.seed})"


def beta_sample(alpha: float, rng: RngState) -> float:
    """Draw one value in [0, 1] from Beta(alpha, alpha)."""
    if not (alpha > 0):
        raise ConfigError(f"beta_sample requires alpha > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))
