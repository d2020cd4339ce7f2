"""Batch text embedding into the RGEM binary format.

Reads JSON-lines records of {"key": ..., "text": ...}, encodes the text
with a sentence encoder, and writes PREFIX.rgem (binary float32 matrix)
plus PREFIX.keys (one key per line, same order as the rows).

Two encoder families:
  - any sentence-transformers model name (needs the model available
    locally or a reachable hub)
  - "hash:<dim>", a deterministic offline fallback that hashes the text
    into a seeded unit gaussian; useful for air-gapped runs and tests
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RGEM"
VERSION = 1


class InputError(ValueError):
    """Malformed or inconsistent input records."""


class EncoderError(RuntimeError):
    """The requested encoder could not be loaded."""


def read_records(path: str | Path) -> list[tuple[str, str]]:
    """Parse the JSONL input; keys must be unique, text may be empty."""
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: invalid JSON ({exc})") from None
            if not isinstance(obj, dict) or "key" not in obj:
                raise InputError(f"line {lineno}: record must be an object with a 'key'")
            key = str(obj["key"])
            if key == "":
                raise InputError(f"line {lineno}: empty key")
            if key in seen:
                raise InputError(f"line {lineno}: duplicate key {key!r}")
            seen.add(key)
            records.append((key, str(obj.get("text", ""))))
    if not records:
        raise InputError(f"no records in {path}")
    return records


def truncate_text(text: str, max_tokens: int) -> str:
    """Keep the first max_tokens whitespace-separated tokens."""
    parts = text.split()
    if len(parts) <= max_tokens:
        return text
    return " ".join(parts[:max_tokens])


class HashEncoder:
    """Deterministic offline encoder: sha256 of the text seeds a unit
    gaussian vector. Empty text encodes to the zero vector."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise EncoderError(f"hash encoder dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            if not text:
                continue
            digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            v = rng.standard_normal(self.dim)
            out[i] = (v / np.linalg.norm(v)).astype(np.float32)
        return out


class SentenceEncoder:
    """Wrapper over a sentence-transformers model."""

    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderError(f"sentence-transformers not installed: {exc}") from None
        try:
            self.model = SentenceTransformer(model_name)
        except Exception as exc:
            raise EncoderError(f"cannot load encoder {model_name!r}: {exc}") from None
        self.dim = int(self.model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str]) -> np.ndarray:
        rows = self.model.encode(texts, convert_to_numpy=True, show_progress_bar=False)
        rows = np.asarray(rows, dtype=np.float32)
        # enforce the empty-text sentinel regardless of model behavior
        for i, text in enumerate(texts):
            if not text:
                rows[i] = 0.0
        return rows


def make_encoder(model_name: str):
    if model_name.startswith("hash:"):
        parts = model_name.split(":")
        try:
            dim = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError):
            raise EncoderError(f"bad hash encoder spec {model_name!r}, want hash:<dim>[:<seed>]") from None
        return HashEncoder(dim, seed)
    return SentenceEncoder(model_name)


def write_rgem(keys: list[str], data: np.ndarray, prefix: str | Path) -> tuple[Path, Path]:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] != len(keys):
        raise InputError(f"matrix shape {data.shape} does not match {len(keys)} keys")
    emb_path = Path(str(prefix) + ".rgem")
    keys_path = Path(str(prefix) + ".keys")
    with open(emb_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQI", VERSION, data.shape[0], data.shape[1]))
        f.write(data.astype("<f4").tobytes())
    with open(keys_path, "w", encoding="utf-8") as f:
        for key in keys:
            f.write(key + "\n")
    return emb_path, keys_path


def extract(
    input_path: str | Path,
    model_name: str,
    batch_size: int,
    out_prefix: str | Path,
    max_tokens: int = 256,
) -> tuple[Path, Path]:
    """Full run: read, encode in batches, write. Row order = input order."""
    if batch_size < 1:
        raise InputError("batch size must be >= 1")
    records = read_records(input_path)
    encoder = make_encoder(model_name)
    keys = [k for k, _ in records]
    texts = [truncate_text(t, max_tokens) for _, t in records]
    chunks = [
        encoder.encode(texts[start : start + batch_size])
        for start in range(0, len(texts), batch_size)
    ]
    return write_rgem(keys, np.concatenate(chunks, axis=0), out_prefix)
