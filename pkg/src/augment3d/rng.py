"""Counter-based random streams addressed by ``(seed, path)``.

A stream's key is derived by hashing the seed together with a path of
context labels (epoch, sample index, operator index, ...). Draws come from
a Philox4x64 counter generator keyed by that hash, so a given
``(seed, path)`` yields the same sequence no matter which worker, process
or platform asks for it.

Only the raw 64-bit output of Philox is used; the conversion to uniform
and normal deviates is done here with fixed arithmetic (53-bit uniforms,
Box-Muller) so results do not depend on numpy's distribution code.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Tuple, Union

import numpy as np

Label = Union[int, str]

_MASK64 = (1 << 64) - 1


def _label_word(label: Label) -> int:
    if isinstance(label, (bool, np.bool_)):
        label = int(label)
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_key(seed: int, path: Iterable[Label]) -> Tuple[int, int]:
    """Hash ``seed`` and ``path`` into a 128-bit Philox key (two words)."""
    h = _splitmix64((int(seed) & _MASK64) ^ 0x243F6A8885A308D3)
    n = 0
    for n, label in enumerate(path, start=1):
        # mix the running state before absorbing so labels never cancel seeds
        h = _splitmix64(_splitmix64(h) ^ _label_word(label))
    h = _splitmix64(h ^ n)
    return h, _splitmix64(h ^ 0xD1B54A32D192ED03)


class RngStream:
    """Deterministic random source for one ``(seed, path)`` address.

    Successive draws on the same object advance its counter; use
    :meth:`child` to obtain independent substreams.
    """

    def __init__(self, seed: int, path: Iterable[Label] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        for label in self.path:
            _label_word(label)
        k0, k1 = derive_key(self.seed, self.path)
        self._gen = np.random.Philox(key=np.array([k0, k1], dtype=np.uint64))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    def child(self, *labels: Label) -> "RngStream":
        return RngStream(self.seed, self.path + labels)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._gen.random_raw(int(n)), dtype=np.uint64)

    def random(self, n: int = None):
        """Uniform deviates in [0, 1) with 53 bits of resolution."""
        count = 1 if n is None else int(n)
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if n is None else u

    def uniform(self, lo: float, hi: float, n: int = None):
        u = self.random(n)
        out = lo + (hi - lo) * np.asarray(u)
        # lo + (hi-lo)*u can round up to hi; clamp keeps draws inside [lo, hi]
        out = np.minimum(np.maximum(out, lo), hi)
        return float(out) if n is None else out

    def normal(self, sigma: float = 1.0, n: int = None):
        """Gaussian deviates N(0, sigma^2) via the Box-Muller transform."""
        count = 1 if n is None else int(n)
        pairs = (count + 1) // 2
        u1 = 1.0 - self.random(pairs)  # (0, 1], keeps log finite
        u2 = self.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = sigma * z[:count]
        return float(z[0]) if n is None else z

    def bernoulli(self, p: float) -> bool:
        return bool(self.random() < p)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        idx = np.arange(n)
        if n < 2:
            return idx
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx
