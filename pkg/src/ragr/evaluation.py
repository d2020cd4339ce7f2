"""Leave-one-out ranking metrics, the evaluation loop, and SID frequency
diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .dataio import DatasetSplit, EvalCase
from .decode import SidTrie, batch_constrained_beam_search
from .errors import ConfigError, ValidationError
from .genrec import GenRecModel
from .rqvae import SemanticId
from .sequence import SequenceMode, TokenVocabulary, serialize_history, sid_history


def hit_at_k(ranked: list[str], target: str, k: int) -> int:
    if k <= 0:
        raise ConfigError("k must be positive")
    return 1 if target in ranked[:k] else 0


def ndcg_at_k(ranked: list[str], target: str, k: int) -> float:
    """Single-ground-truth NDCG: 1/log2(rank+1) inside the cutoff, else 0.
    Ideal DCG is 1, so the value lies in [0, 1]."""
    if k <= 0:
        raise ConfigError("k must be positive")
    try:
        rank = ranked[:k].index(target) + 1
    except ValueError:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricsTable:
    num_users: int
    hit: dict[int, float]
    ndcg: dict[int, float]


def evaluate(
    model: GenRecModel,
    trie: SidTrie,
    split: DatasetSplit,
    item_sids: dict[str, SemanticId],
    review_sids: dict[str, SemanticId],
    vocab: TokenVocabulary,
    mode: SequenceMode,
    ks: tuple[int, ...] = (5, 10, 20),
    max_items: int = 20,
    which: str = "test",
    chunk_size: int = 256,
) -> MetricsTable:
    """Mean HIT@K / NDCG@K over all users of the chosen split portion.

    Contexts are serialized in the same mode the model was trained with;
    recommendations come from constrained beam search with width
    max(2*max(ks), 20) capped at the catalog size."""
    if which == "test":
        cases: dict[str, EvalCase] = split.test
    elif which == "validation":
        cases = split.validation
    else:
        raise ConfigError(f"unknown split portion {which!r}")
    users = sorted(cases)
    for user in users:
        if cases[user].target.item_key not in item_sids:
            raise ValidationError(f"test target {cases[user].target.item_key!r} not in catalog")
    k_max = max(ks)
    if k_max > trie.size:
        raise ConfigError(f"K={k_max} exceeds catalog size {trie.size}")
    beam_width = min(max(2 * k_max, 20), trie.size)

    hit_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    for start in range(0, len(users), chunk_size):
        chunk = users[start : start + chunk_size]
        contexts = [
            serialize_history(
                sid_history(cases[u].context, item_sids, review_sids), vocab, mode, max_items
            )
            for u in chunk
        ]
        rankings = batch_constrained_beam_search(model, contexts, trie, beam_width)
        for user, ranking in zip(chunk, rankings):
            ranked_keys = [key for key, _ in ranking]
            target = cases[user].target.item_key
            for k in ks:
                hit_sums[k] += hit_at_k(ranked_keys, target, k)
                ndcg_sums[k] += ndcg_at_k(ranked_keys, target, k)
    n = len(users)
    return MetricsTable(
        num_users=n,
        hit={k: hit_sums[k] / n for k in ks},
        ndcg={k: ndcg_sums[k] / n for k in ks},
    )


def sid_frequency(
    sids: dict[str, SemanticId], top_n: int = 10
) -> dict[int, list[tuple[int, int]]]:
    """Per level (1-based): the top_n most frequent codes as (code, count),
    sorted by count descending then code ascending."""
    if not sids:
        return {}
    levels = next(iter(sids.values())).levels
    out: dict[int, list[tuple[int, int]]] = {}
    for m in range(levels):
        counts: dict[int, int] = {}
        for sid in sids.values():
            counts[sid.codes[m]] = counts.get(sid.codes[m], 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        out[m + 1] = ranked[:top_n]
    return out
