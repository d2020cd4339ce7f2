"""Raw review ingestion, k-core filtering, chronological sequences, and
the leave-one-out split, plus a synthetic dataset generator with a
plantable review signal.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import ConfigError, EmptyDatasetError, ValidationError


@dataclass(frozen=True)
class Interaction:
    user_key: str
    item_key: str
    timestamp: int
    review_text: str = ""

    def __post_init__(self) -> None:
        if not self.user_key or not self.item_key:
            raise ValidationError("user_key and item_key must be non-empty")
        if self.timestamp < 0:
            raise ValidationError("timestamp must be >= 0")


@dataclass
class UserSequence:
    user_key: str
    interactions: list[Interaction]


@dataclass
class EvalCase:
    """A (context, target) pair for validation or test."""

    user_key: str
    context: list[Interaction]
    target: Interaction


@dataclass
class DatasetSplit:
    train: dict[str, list[Interaction]]
    validation: dict[str, EvalCase]
    test: dict[str, EvalCase]


@dataclass
class ParseResult:
    interactions: list[Interaction]
    skipped: int


def parse_reviews(path: str | Path, format: str = "json-lines") -> ParseResult:
    """Parse a raw review file into interactions.

    json-lines records need reviewerID, asin and unixReviewTime; the review
    text is taken from reviewText, falling back to summary, else "".
    TSV files need a header with columns user, item, timestamp, review.
    Records missing a required field are skipped and counted.
    """
    if format not in ("json-lines", "tsv"):
        raise ConfigError(f"unknown input format {format!r}")
    interactions: list[Interaction] = []
    skipped = 0
    with open(path, encoding="utf-8") as f:
        if format == "json-lines":
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    user = rec["reviewerID"]
                    item = rec["asin"]
                    ts = int(rec["unixReviewTime"])
                    text = rec.get("reviewText") or rec.get("summary") or ""
                    interactions.append(Interaction(user, item, ts, text))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError):
                    skipped += 1
        else:
            reader = csv.DictReader(f, delimiter="\t")
            for rec in reader:
                try:
                    interactions.append(
                        Interaction(
                            rec["user"],
                            rec["item"],
                            int(rec["timestamp"]),
                            rec.get("review") or "",
                        )
                    )
                except (KeyError, TypeError, ValueError, ValidationError):
                    skipped += 1
    if not interactions:
        raise EmptyDatasetError(f"{path}: no parseable records")
    return ParseResult(interactions, skipped)


def k_core_filter(interactions: list[Interaction], k: int) -> list[Interaction]:
    """Iteratively drop users and items with fewer than k interactions
    until a fixed point is reached."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    current = list(interactions)
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for it in current:
            user_counts[it.user_key] = user_counts.get(it.user_key, 0) + 1
            item_counts[it.item_key] = item_counts.get(it.item_key, 0) + 1
        kept = [
            it
            for it in current
            if user_counts[it.user_key] >= k and item_counts[it.item_key] >= k
        ]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyDatasetError(f"k-core filtering with k={k} removed every interaction")
    return current


def build_sequences(interactions: list[Interaction]) -> list[UserSequence]:
    """Group interactions per user, sorted by (timestamp, item_key).

    Users with fewer than 3 interactions are dropped so that train,
    validation and test portions all exist.
    """
    by_user: dict[str, list[Interaction]] = {}
    for it in interactions:
        by_user.setdefault(it.user_key, []).append(it)
    sequences = []
    for user in sorted(by_user):
        items = sorted(by_user[user], key=lambda it: (it.timestamp, it.item_key))
        if len(items) >= 3:
            sequences.append(UserSequence(user, items))
    return sequences


def leave_one_out_split(sequences: list[UserSequence]) -> DatasetSplit:
    """Per user: last interaction -> test, second-to-last -> validation,
    the rest -> train. Contexts contain all strictly earlier interactions."""
    train: dict[str, list[Interaction]] = {}
    validation: dict[str, EvalCase] = {}
    test: dict[str, EvalCase] = {}
    for seq in sequences:
        if len(seq.interactions) < 3:
            raise ValidationError(
                f"user {seq.user_key} has {len(seq.interactions)} interactions, need >= 3"
            )
        *prefix, val_target, test_target = seq.interactions
        train[seq.user_key] = prefix
        validation[seq.user_key] = EvalCase(seq.user_key, list(prefix), val_target)
        test[seq.user_key] = EvalCase(seq.user_key, prefix + [val_target], test_target)
    return DatasetSplit(train=train, validation=validation, test=test)


SEQUENCE_TSV_COLUMNS = ["user_key", "item_key", "timestamp", "review_text"]


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def save_sequences_tsv(interactions: list[Interaction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(SEQUENCE_TSV_COLUMNS) + "\n")
        for it in interactions:
            f.write(
                f"{it.user_key}\t{it.item_key}\t{it.timestamp}\t{_escape(it.review_text)}\n"
            )


def load_sequences_tsv(path: str | Path) -> list[Interaction]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != SEQUENCE_TSV_COLUMNS:
        raise EmptyDatasetError(f"{path}: missing or wrong sequence TSV header")
    out = []
    for line in lines[1:]:
        user, item, ts, review = line.split("\t")
        out.append(Interaction(user, item, int(ts), _unescape(review)))
    if not out:
        raise EmptyDatasetError(f"{path}: no interactions")
    return out


def review_key(user_key: str, step: int) -> str:
    """Stable key for the review at 1-based position `step` of a user's
    chronological sequence; used to index review embeddings and SIDs."""
    return f"{user_key}::{step}"


@dataclass
class SynthConfig:
    num_users: int = 1000
    num_items: int = 200
    seq_len_range: tuple[int, int] = (5, 10)
    signal_strength: float = 1.0
    seed: int = 0
    num_clusters: int = 8
    dim: int = 32
    noise_scale: float = 0.05


@dataclass
class SynthData:
    interactions: list[Interaction]
    item_embeddings: EmbeddingMatrix
    review_embeddings: EmbeddingMatrix
    # ground-truth diagnostics, not consumed by the pipeline
    item_cluster: dict[str, int] = field(default_factory=dict)
    review_cluster: dict[str, int] = field(default_factory=dict)


def generate_synthetic(config: SynthConfig) -> SynthData:
    """Generate a clustered item catalog and user histories whose review
    embeddings encode the coarse cluster of the *next* item with
    probability signal_strength (uniform noise cluster otherwise)."""
    cfg = config
    if cfg.num_items < 10:
        raise ConfigError("num_items must be >= 10")
    lo, hi = cfg.seq_len_range
    if lo < 3 or hi < lo:
        raise ConfigError("seq_len_range must satisfy 3 <= lo <= hi")
    if not 0.0 <= cfg.signal_strength <= 1.0:
        raise ConfigError("signal_strength must be in [0, 1]")
    if cfg.num_clusters < 2 or cfg.num_clusters > cfg.num_items:
        raise ConfigError("num_clusters must be in [2, num_items]")

    rng = np.random.default_rng(cfg.seed)
    centroids = rng.standard_normal((cfg.num_clusters, cfg.dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    centroids *= 4.0  # well-separated relative to noise_scale

    item_keys = [f"it{idx:05d}" for idx in range(cfg.num_items)]
    item_cluster_arr = np.arange(cfg.num_items) % cfg.num_clusters
    item_data = (
        centroids[item_cluster_arr]
        + cfg.noise_scale * rng.standard_normal((cfg.num_items, cfg.dim))
    ).astype(np.float32)
    items_by_cluster = [
        [i for i in range(cfg.num_items) if item_cluster_arr[i] == c]
        for c in range(cfg.num_clusters)
    ]

    interactions: list[Interaction] = []
    review_keys: list[str] = []
    review_rows: list[np.ndarray] = []
    review_cluster: dict[str, int] = {}
    for u in range(cfg.num_users):
        user = f"u{u:05d}"
        length = int(rng.integers(lo, hi + 1))
        clusters = rng.integers(0, cfg.num_clusters, size=length)
        for t in range(1, length + 1):
            item_idx = int(rng.choice(items_by_cluster[clusters[t - 1]]))
            if t < length and rng.random() < cfg.signal_strength:
                rc = int(clusters[t])  # reveal the next item's cluster
            else:
                rc = int(rng.integers(0, cfg.num_clusters))
            rkey = review_key(user, t)
            review_keys.append(rkey)
            review_cluster[rkey] = rc
            review_rows.append(
                (centroids[rc] + cfg.noise_scale * rng.standard_normal(cfg.dim)).astype(
                    np.float32
                )
            )
            interactions.append(
                Interaction(user, item_keys[item_idx], t, f"synthetic review {rkey}")
            )

    return SynthData(
        interactions=interactions,
        item_embeddings=EmbeddingMatrix(item_keys, item_data),
        review_embeddings=EmbeddingMatrix(review_keys, np.stack(review_rows)),
        item_cluster={item_keys[i]: int(item_cluster_arr[i]) for i in range(cfg.num_items)},
        review_cluster=review_cluster,
    )
