"""Flat INI-style run configuration with a fixed schema.

Unknown sections or keys are rejected so a typo cannot silently fall
back to a default. Values are plain scalars; list-valued settings are
comma-separated strings parsed by the consumer.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path

from .errors import ConfigError

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "seed": (int, 0),
        "out": (str, "runs"),
    },
    "data": {
        "input": (str, ""),
        "format": (str, "json-lines"),
        "k_core": (int, 5),
        "embedding_dim": (int, 32),
        # optional externally produced embedding files (prefix without extension);
        # when empty, ingest falls back to the deterministic hash encoder
        "item_embeddings": (str, ""),
        "review_embeddings": (str, ""),
        # synthetic dataset knobs
        "num_users": (int, 200),
        "num_items": (int, 100),
        "seq_len_min": (int, 5),
        "seq_len_max": (int, 10),
        "signal_strength": (float, 0.9),
        "clusters": (int, 8),
        "noise_scale": (float, 0.05),
    },
    "tokenizer": {
        "hidden_dims": (str, "64,32"),
        "code_dim": (int, 16),
        "levels": (int, 4),
        "codebook_size": (int, 64),
        "beta_commit": (float, 0.25),
        "rec_target": (str, "input"),
        "lr": (float, 1e-3),
        "batch_size": (int, 2048),
        "epochs": (int, 50),
        "weight_decay": (float, 1e-4),
        "kmeans_iters": (int, 100),
    },
    "genrec": {
        "mode": (str, "item-only"),
        "d_model": (int, 64),
        "n_heads": (int, 4),
        "n_layers_enc": (int, 2),
        "n_layers_dec": (int, 2),
        "d_ff": (int, 0),  # 0 means 4 * d_model
        "max_positions": (int, 256),
        "dropout": (float, 0.1),
        "lr": (float, 1e-3),
        "batch_size": (int, 256),
        "epochs": (int, 20),
        "warmup_ratio": (float, 0.01),
        "weight_decay": (float, 0.01),
        "label_smoothing": (float, 0.0),
        "max_items": (int, 20),
    },
    "align": {
        "beta_dpo": (float, 0.6),
        "lr": (float, 1e-6),
        "epochs": (int, 1),
        "batch_size": (int, 256),
    },
    "eval": {
        "ks": (str, "5,10,20"),
        "split": (str, "test"),
        "chunk_size": (int, 256),
        "checkpoint": (str, ""),  # defaults to the --mode checkpoint
    },
    "sweep": {
        "sid_levels": (str, "3,4,5"),
        "dpo_betas": (str, "0.4,0.6,0.8"),
        "dpo_epochs": (str, "1,2"),
    },
}


def default_config() -> dict[str, dict[str, object]]:
    return {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }


def _convert(section: str, key: str, raw: str) -> object:
    typ, _ = SCHEMA[section][key]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None


def load_config(path: str | Path | None) -> dict[str, dict[str, object]]:
    """Read an INI file over the schema defaults; None gives pure defaults."""
    config = default_config()
    if path is None:
        return config
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            config[section][key] = _convert(section, key, raw)
    return config


def set_value(config: dict, dotted: str, raw: str) -> None:
    """Apply one section.key=value override."""
    if "." not in dotted:
        raise ConfigError(f"override key must be section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    config[section][key] = _convert(section, key, raw)


def int_list(config: dict, section: str, key: str) -> list[int]:
    raw = str(config[section][key])
    try:
        return [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"{section}.{key} must be comma-separated integers: {raw!r}") from None


def float_list(config: dict, section: str, key: str) -> list[float]:
    raw = str(config[section][key])
    try:
        return [float(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"{section}.{key} must be comma-separated numbers: {raw!r}") from None


def canonical_text(config: dict) -> str:
    lines = []
    for section in sorted(config):
        for key in sorted(config[section]):
            lines.append(f"{section}.{key}={config[section][key]}")
    return "\n".join(lines) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_text(config).encode("utf-8")).hexdigest()


def derive_seed(master_seed: int, stage: str) -> int:
    """Per-stage seed from the master seed, stable across runs."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")
