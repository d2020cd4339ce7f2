"""Dense text-embedding storage and a deterministic synthetic embedder.

Embeddings are produced offline (see the extractor tool) and exchanged
through a small binary format so this package never depends on a text
encoder at runtime.

Binary format (little-endian): magic ``RGEM``, u32 version=1, u64 row
count, u32 dim, then count*dim float32 values row-major. A companion
UTF-8 keys file names row i on line i.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, ValidationError

MAGIC = b"RGEM"
VERSION = 1


@dataclass
class EmbeddingMatrix:
    keys: list[str]
    data: np.ndarray  # (len(keys), dim) float32

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError(f"embedding data must be 2-D, got shape {self.data.shape}")
        if len(self.keys) != self.data.shape[0]:
            raise ConsistencyError(
                f"{len(self.keys)} keys but {self.data.shape[0]} embedding rows"
            )
        if self.dim <= 0:
            raise ValidationError("embedding dim must be positive")
        if len(set(self.keys)) != len(self.keys):
            raise ValidationError("duplicate keys in embedding matrix")
        if not np.isfinite(self.data).all():
            raise ValidationError("embedding matrix contains NaN or Inf")

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.keys)

    def row(self, key: str) -> np.ndarray:
        return self.data[self.keys.index(key)]

    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.keys)}


def save_embeddings(matrix: EmbeddingMatrix, matrix_path: str | Path, keys_path: str | Path) -> None:
    matrix_path, keys_path = Path(matrix_path), Path(keys_path)
    n, dim = matrix.data.shape
    with open(matrix_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQI", VERSION, n, dim))
        f.write(matrix.data.astype("<f4").tobytes())
    keys_path.write_text("".join(k + "\n" for k in matrix.keys), encoding="utf-8")


def load_embeddings(matrix_path: str | Path, keys_path: str | Path) -> EmbeddingMatrix:
    with open(matrix_path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        header = f.read(16)
        if len(header) != 16:
            raise FormatError("truncated header")
        version, n, dim = struct.unpack("<IQI", header)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        payload = f.read()
    expected = n * dim * 4
    if len(payload) != expected:
        raise ConsistencyError(f"payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, dim).copy()
    keys = Path(keys_path).read_text(encoding="utf-8").splitlines()
    if len(keys) != n:
        raise ConsistencyError(f"keys file has {len(keys)} lines but header count is {n}")
    return EmbeddingMatrix(keys=keys, data=data)


def synthetic_embed(text: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic stand-in for a text encoder.

    Hashes (text, seed) into an RNG stream and draws a unit-norm gaussian
    vector. The empty string maps to the all-zeros vector, reserved for
    missing reviews.
    """
    if dim <= 0:
        raise ValidationError("dim must be positive")
    if text == "":
        return np.zeros(dim, dtype=np.float32)
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return v.astype(np.float32)


def synthetic_embed_corpus(texts: dict[str, str], dim: int, seed: int) -> EmbeddingMatrix:
    """Embed a key->text corpus with synthetic_embed, preserving key order."""
    keys = list(texts)
    data = np.stack([synthetic_embed(texts[k], dim, seed) for k in keys]) if keys else np.zeros((0, dim), np.float32)
    return EmbeddingMatrix(keys=keys, data=data)
