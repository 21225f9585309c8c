"""Text and image embedding providers.

Two providers share one interface (``text(tokens)`` / ``image(key)``):

* ``ToyProvider`` - hermetic, deterministic.  Every string is mapped to a
  pseudo-random unit vector by :func:`hash_project`; text is the renormalized
  sum of its token vectors (a bag of words, so order-invariant).
* ``FileProvider`` - precomputed vectors read from a CG3D container, returned
  bit-for-bit.  Text keys are the lowercase space-joined token string.

``hash_project`` seeds a SplitMix64 stream with an 8-byte BLAKE2b digest of
``seed || data`` and turns it into Gaussians with Box-Muller, so results only
depend on IEEE double arithmetic and are stable across platforms.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from crossground import container

DEFAULT_DIM = 728

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class EmbeddingError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of SplitMix64 started at ``state``."""
    with np.errstate(over="ignore"):
        z = np.uint64(state & _MASK64) + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _stream_state(data: bytes, seed: int) -> int:
    digest = hashlib.blake2b((seed & _MASK64).to_bytes(8, "little") + data, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_project(data: bytes | str, dim: int, seed: int = 0) -> np.ndarray:
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if isinstance(data, str):
        data = data.encode("utf-8")
    half = (dim + 1) // 2
    raw = splitmix64(_stream_state(data, seed), 2 * half)
    # 53-bit uniforms in the open interval (0, 1)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u[:half]))
    theta = 2.0 * np.pi * u[half:]
    g = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:dim]
    return g / np.linalg.norm(g)


def text_key(tokens: Sequence[str]) -> str:
    return " ".join(t.lower() for t in tokens)


class ToyProvider:
    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim < 2:
            raise ValueError("embedding dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self._token = lru_cache(maxsize=65536)(self._project)

    def _project(self, s: str) -> np.ndarray:
        v = hash_project(s, self.dim, self.seed)
        v.setflags(write=False)
        return v

    def text(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            raise ValueError("cannot embed an empty token list")
        total = np.zeros(self.dim)
        for tok in tokens:
            total += self._token(tok.lower())
        norm = np.linalg.norm(total)
        if norm == 0.0:
            return self._token(text_key(tokens)).copy()
        return total / norm

    def image(self, key: str) -> np.ndarray:
        if not key:
            raise EmbeddingError("empty embedding key")
        return self._token(key).copy()


class FileProvider:
    def __init__(self, tensors: Mapping[str, np.ndarray], dim: int | None = None):
        self._tensors = dict(tensors)
        if dim is None and self._tensors:
            dim = len(next(iter(self._tensors.values())).reshape(-1))
        self.dim = dim
        for name, vec in self._tensors.items():
            if vec.reshape(-1).shape != (self.dim,):
                raise EmbeddingError(f"embedding {name!r} has shape {vec.shape}, expected ({self.dim},)")

    @classmethod
    def from_path(cls, path: str | os.PathLike, dim: int | None = None) -> "FileProvider":
        return cls(container.load(path), dim)

    def text(self, tokens: Sequence[str]) -> np.ndarray:
        key = text_key(tokens)
        if key not in self._tensors:
            raise EmbeddingError(f"unknown text key {key!r}")
        return self._tensors[key].reshape(-1).copy()

    def image(self, key: str) -> np.ndarray:
        if key not in self._tensors:
            raise EmbeddingError(f"unknown image key {key!r}")
        return self._tensors[key].reshape(-1).copy()

    def __contains__(self, key):
        return key in self._tensors


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = DEFAULT_DIM
    provider: str = "toy"  # "toy" | "file"
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dim must be >= 2")
        if self.provider not in ("toy", "file"):
            raise ValueError(f"unknown embedding provider {self.provider!r}")
        if self.provider == "file" and not self.path:
            raise ValueError("file provider needs a container path")


@lru_cache(maxsize=32)
def make_provider(config: EmbeddingConfig):
    if config.provider == "toy":
        return ToyProvider(config.dim, config.seed)
    return FileProvider.from_path(config.path, config.dim)


def embed_text(config: EmbeddingConfig, tokens: Sequence[str]) -> np.ndarray:
    return make_provider(config).text(tokens)


def image_embedding(config: EmbeddingConfig, embedding_key: str) -> np.ndarray:
    return make_provider(config).image(embedding_key)
