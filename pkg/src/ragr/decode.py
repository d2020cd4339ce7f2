"""Prefix-trie constrained beam search over the item catalog.

Generation is restricted to token sequences that spell a valid catalog
item, so every emitted recommendation is a real item key.
"""

from __future__ import annotations

import torch

from .errors import CatalogError, ConfigError, ValidationError
from .genrec import GenRecModel, pad_batch
from .rqvae import SemanticId
from .sequence import BOS, EOS, SerializedContext, TokenVocabulary


class TrieNode:
    __slots__ = ("children", "item_key")

    def __init__(self) -> None:
        self.children: dict[int, TrieNode] = {}
        self.item_key: str | None = None


class SidTrie:
    def __init__(self, depth: int):
        self.root = TrieNode()
        self.depth = depth  # number of tokens on every root-to-terminal path
        self.size = 0

    def insert(self, tokens: list[int], item_key: str) -> None:
        if len(tokens) != self.depth:
            raise ValidationError(
                f"item {item_key!r}: path length {len(tokens)} != trie depth {self.depth}"
            )
        node = self.root
        for t in tokens:
            node = node.children.setdefault(t, TrieNode())
        if node.item_key is not None:
            raise ValidationError(
                f"duplicate full SID for items {node.item_key!r} and {item_key!r}"
            )
        node.item_key = item_key
        self.size += 1

    def items(self) -> dict[str, list[int]]:
        """Depth-first enumeration of all (item_key, token path) entries."""
        out: dict[str, list[int]] = {}

        def walk(node: TrieNode, path: list[int]) -> None:
            if node.item_key is not None:
                out[node.item_key] = list(path)
            for token in sorted(node.children):
                walk(node.children[token], path + [token])

        walk(self.root, [])
        return out


def build_trie(item_sids: dict[str, SemanticId], vocab: TokenVocabulary) -> SidTrie:
    """Build the catalog trie from disambiguated item SIDs."""
    trie = SidTrie(depth=vocab.levels + 1)
    for key in sorted(item_sids):
        trie.insert(vocab.item_tokens(item_sids[key]), key)
    return trie


def batch_constrained_beam_search(
    model: GenRecModel,
    contexts: list[SerializedContext],
    trie: SidTrie,
    beam_width: int,
) -> list[list[tuple[str, float]]]:
    """Beam search for many contexts at once.

    At each step only tokens with a trie child are admissible; raw
    (unrenormalized) softmax log-probabilities are accumulated, and the
    terminal EOS log-probability is included so scores equal
    sequence_log_prob of the item's full target sequence. Final ranking
    is by log-prob descending, ties broken by item_key ascending.
    """
    if trie.size == 0:
        raise CatalogError("empty item catalog trie")
    if beam_width < 1:
        raise ConfigError("beam_width must be >= 1")
    was_training = model.training
    model.eval()
    try:
        return _beam_search_impl(model, contexts, trie, beam_width)
    finally:
        model.train(was_training)


def _beam_search_impl(
    model: GenRecModel,
    contexts: list[SerializedContext],
    trie: SidTrie,
    beam_width: int,
) -> list[list[tuple[str, float]]]:
    n_ctx = len(contexts)
    with torch.no_grad():
        enc = pad_batch([c.tokens for c in contexts])
        memory, mem_mask = model.encode_memory(enc)

        # per context: list of (node, tokens, logp)
        beams: list[list[tuple[TrieNode, list[int], float]]] = [
            [(trie.root, [], 0.0)] for _ in range(n_ctx)
        ]
        for _ in range(trie.depth):
            ctx_index = []
            prefixes = []
            for ci, ctx_beams in enumerate(beams):
                for node, tokens, logp in ctx_beams:
                    ctx_index.append(ci)
                    prefixes.append([BOS] + tokens)
            idx = torch.as_tensor(ctx_index, dtype=torch.long)
            logits = model.decode_logits(
                memory[idx], mem_mask[idx], pad_batch(prefixes)
            )
            logp_rows = torch.log_softmax(logits[:, -1, :].double(), dim=-1)

            new_beams: list[list[tuple[TrieNode, list[int], float]]] = [[] for _ in range(n_ctx)]
            row = 0
            for ci, ctx_beams in enumerate(beams):
                candidates = []
                for node, tokens, logp in ctx_beams:
                    for token, child in node.children.items():
                        candidates.append(
                            (logp + float(logp_rows[row, token]), tokens + [token], child)
                        )
                    row += 1
                candidates.sort(key=lambda c: (-c[0], c[1]))
                new_beams[ci] = [(c[2], c[1], c[0]) for c in candidates[:beam_width]]
            beams = new_beams

        # all beams are terminal; append the EOS score
        ctx_index, prefixes = [], []
        for ci, ctx_beams in enumerate(beams):
            for node, tokens, logp in ctx_beams:
                ctx_index.append(ci)
                prefixes.append([BOS] + tokens)
        idx = torch.as_tensor(ctx_index, dtype=torch.long)
        logits = model.decode_logits(memory[idx], mem_mask[idx], pad_batch(prefixes))
        logp_rows = torch.log_softmax(logits[:, -1, :].double(), dim=-1)

        results: list[list[tuple[str, float]]] = []
        row = 0
        for ctx_beams in beams:
            ranked = []
            for node, tokens, logp in ctx_beams:
                assert node.item_key is not None
                ranked.append((node.item_key, logp + float(logp_rows[row, EOS])))
                row += 1
            ranked.sort(key=lambda r: (-r[1], r[0]))
            results.append(ranked)
        return results


def constrained_beam_search(
    model: GenRecModel,
    context: SerializedContext,
    trie: SidTrie,
    beam_width: int,
) -> list[tuple[str, float]]:
    return batch_constrained_beam_search(model, [context], trie, beam_width)[0]


def recommend_top_k(
    model: GenRecModel, context: SerializedContext, trie: SidTrie, k: int
) -> list[str]:
    """Top-k item keys via constrained beam search with width max(2k, 20)."""
    if k > trie.size:
        raise ConfigError(f"k={k} exceeds catalog size {trie.size}")
    ranked = constrained_beam_search(model, context, trie, beam_width=max(2 * k, 20))
    return [key for key, _ in ranked[:k]]
