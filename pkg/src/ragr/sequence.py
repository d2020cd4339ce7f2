"""Token vocabulary, history serialization, and training-instance
construction over interleaved item/review semantic IDs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .dataio import DatasetSplit, Interaction, review_key
from .errors import ConfigError, LookupError_
from .rqvae import SemanticId

PAD, BOS, EOS = 0, 1, 2


class SequenceMode(str, Enum):
    ITEM_ONLY = "item-only"
    INPUT_AUGMENTED = "input"
    TASK_AUGMENTED = "task"


class InstanceKind(str, Enum):
    NEXT_ITEM = "next-item"
    NEXT_REVIEW = "next-review"


@dataclass(frozen=True)
class TokenVocabulary:
    """Flat token layout: 3 specials, then M blocks of K code tokens,
    then D disambiguation tokens."""

    levels: int
    codebook_size: int
    num_disambig: int

    def __post_init__(self) -> None:
        if self.levels < 1 or self.codebook_size < 1 or self.num_disambig < 1:
            raise ConfigError("vocabulary dimensions must be >= 1")
        if self.vocab_size > 2**31 - 1:
            raise ConfigError("token id range overflow")

    @property
    def vocab_size(self) -> int:
        return 3 + self.levels * self.codebook_size + self.num_disambig

    def code_token(self, level: int, code: int) -> int:
        """level is 1-based; code in [0, K)."""
        if not (1 <= level <= self.levels and 0 <= code < self.codebook_size):
            raise ConfigError(f"code token out of range: level={level} code={code}")
        return 3 + (level - 1) * self.codebook_size + code

    def disambig_token(self, d: int) -> int:
        if not 0 <= d < self.num_disambig:
            raise ConfigError(f"disambig index {d} out of range")
        return 3 + self.levels * self.codebook_size + d

    def decode_token(self, token: int) -> tuple[str, object]:
        if token in (PAD, BOS, EOS):
            return ("special", token)
        t = token - 3
        if t < self.levels * self.codebook_size:
            return ("code", (t // self.codebook_size + 1, t % self.codebook_size))
        d = t - self.levels * self.codebook_size
        if d < self.num_disambig:
            return ("disambig", d)
        raise ConfigError(f"token id {token} outside vocabulary")

    def item_tokens(self, sid: SemanticId) -> list[int]:
        if sid.disambig is None:
            raise ConfigError("item SIDs must be disambiguated before tokenization")
        return [self.code_token(m + 1, c) for m, c in enumerate(sid.codes)] + [
            self.disambig_token(sid.disambig)
        ]

    def review_tokens(self, sid: SemanticId) -> list[int]:
        # reviews are context, never retrieval targets: no disambig token
        return [self.code_token(m + 1, c) for m, c in enumerate(sid.codes)]


def build_vocabulary(levels: int, codebook_size: int, max_disambig: int) -> TokenVocabulary:
    return TokenVocabulary(levels=levels, codebook_size=codebook_size, num_disambig=max_disambig + 1)


@dataclass
class SerializedContext:
    tokens: list[int]


@dataclass
class TrainingInstance:
    kind: InstanceKind
    input_tokens: list[int]
    target_tokens: list[int]
    user_key: str
    step: int


def serialize_history(
    history: list[tuple[SemanticId, SemanticId | None]],
    vocab: TokenVocabulary,
    mode: SequenceMode,
    max_items: int = 20,
) -> SerializedContext:
    """Serialize the last max_items (item SID, review SID) pairs.

    Item-only mode emits item tokens only; augmented modes interleave
    item and review token groups chronologically. A None review (empty
    review text) contributes no tokens. BOS is prepended.
    """
    tokens = [BOS]
    for item_sid, rev_sid in history[-max_items:]:
        tokens.extend(vocab.item_tokens(item_sid))
        if mode != SequenceMode.ITEM_ONLY and rev_sid is not None:
            tokens.extend(vocab.review_tokens(rev_sid))
    return SerializedContext(tokens=tokens)


def _lookup(sids: dict[str, SemanticId], key: str, corpus: str) -> SemanticId:
    try:
        return sids[key]
    except KeyError:
        raise LookupError_(f"no {corpus} SID for key {key!r}") from None


def sid_history(
    interactions: list[Interaction],
    item_sids: dict[str, SemanticId],
    review_sids: dict[str, SemanticId],
) -> list[tuple[SemanticId, SemanticId | None]]:
    """Resolve interactions to (item SID, review SID or None) pairs.

    Review SIDs are keyed by position in the user's chronological
    sequence; interactions must be the untruncated prefix of that
    sequence so positions line up."""
    out = []
    for t, it in enumerate(interactions, start=1):
        item_sid = _lookup(item_sids, it.item_key, "item")
        rev_sid = None
        if it.review_text:
            rev_sid = _lookup(review_sids, review_key(it.user_key, t), "review")
        out.append((item_sid, rev_sid))
    return out


def make_instances(
    split: DatasetSplit,
    item_sids: dict[str, SemanticId],
    review_sids: dict[str, SemanticId],
    vocab: TokenVocabulary,
    mode: SequenceMode,
    max_items: int = 20,
) -> list[TrainingInstance]:
    """Emit next-item (and, under task augmentation, next-review)
    instances for every step t >= 2 of each user's train prefix."""
    instances: list[TrainingInstance] = []
    for user in sorted(split.train):
        prefix = split.train[user]
        pairs = sid_history(prefix, item_sids, review_sids)
        for t in range(2, len(prefix) + 1):
            item_sid, rev_sid = pairs[t - 1]
            context = serialize_history(pairs[: t - 1], vocab, mode, max_items)
            target = vocab.item_tokens(item_sid) + [EOS]
            instances.append(
                TrainingInstance(InstanceKind.NEXT_ITEM, context.tokens, target, user, t)
            )
            if mode == SequenceMode.TASK_AUGMENTED and rev_sid is not None:
                review_input = context.tokens + vocab.item_tokens(item_sid)
                review_target = vocab.review_tokens(rev_sid) + [EOS]
                instances.append(
                    TrainingInstance(
                        InstanceKind.NEXT_REVIEW, review_input, review_target, user, t
                    )
                )
    return instances


def dump_instances(instances: list[TrainingInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(
                json.dumps(
                    {
                        "kind": inst.kind.value,
                        "user": inst.user_key,
                        "step": inst.step,
                        "input": inst.input_tokens,
                        "target": inst.target_tokens,
                    }
                )
                + "\n"
            )
