"""Item-vs-review preference pairs and DPO alignment against a frozen
reference copy of the sequence-trained model."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .dataio import DatasetSplit
from .errors import ConfigError, TrainingError
from .genrec import GenRecModel, batch_log_probs, sequence_log_prob
from .rqvae import SemanticId
from .sequence import (
    EOS,
    SequenceMode,
    TokenVocabulary,
    serialize_history,
    sid_history,
)


@dataclass
class PreferencePair:
    context_tokens: list[int]
    preferred_tokens: list[int]  # item SID target
    rejected_tokens: list[int]  # review SID target
    user_key: str
    step: int


@dataclass
class DpoConfig:
    beta_dpo: float = 0.6
    lr: float = 1e-6
    epochs: int = 1
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta_dpo <= 0:
            raise ConfigError("beta_dpo must be positive")


def build_preference_pairs(
    split: DatasetSplit,
    item_sids: dict[str, SemanticId],
    review_sids: dict[str, SemanticId],
    vocab: TokenVocabulary,
    max_items: int = 20,
) -> list[PreferencePair]:
    """One pair per train step with a non-empty review: review-augmented
    context, preferred = next item SID, rejected = that step's review SID.

    The context matches the next-item instance input at the same (user,
    step) under task augmentation."""
    pairs: list[PreferencePair] = []
    for user in sorted(split.train):
        prefix = split.train[user]
        history = sid_history(prefix, item_sids, review_sids)
        for t in range(2, len(prefix) + 1):
            item_sid, rev_sid = history[t - 1]
            if rev_sid is None:
                continue
            context = serialize_history(
                history[: t - 1], vocab, SequenceMode.TASK_AUGMENTED, max_items
            )
            pairs.append(
                PreferencePair(
                    context_tokens=context.tokens,
                    preferred_tokens=vocab.item_tokens(item_sid) + [EOS],
                    rejected_tokens=vocab.review_tokens(rev_sid) + [EOS],
                    user_key=user,
                    step=t,
                )
            )
    return pairs


def dpo_delta(policy: GenRecModel, reference: GenRecModel, pair: PreferencePair) -> float:
    """Relative preference score: how much more the policy prefers the
    item continuation over the review continuation, versus the reference."""
    lp_pos = sequence_log_prob(policy, pair.context_tokens, pair.preferred_tokens)
    lp_neg = sequence_log_prob(policy, pair.context_tokens, pair.rejected_tokens)
    ref_pos = sequence_log_prob(reference, pair.context_tokens, pair.preferred_tokens)
    ref_neg = sequence_log_prob(reference, pair.context_tokens, pair.rejected_tokens)
    return (lp_pos - ref_pos) - (lp_neg - ref_neg)


def dpo_loss(delta: float, beta_dpo: float) -> float:
    """-log sigmoid(beta * delta), via the overflow-safe softplus form."""
    if beta_dpo <= 0:
        raise ConfigError("beta_dpo must be positive")
    x = -beta_dpo * delta
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def preference_accuracy(model: GenRecModel, pairs: list[PreferencePair]) -> float:
    """Fraction of pairs where the model scores the item continuation
    above the review continuation."""
    with torch.no_grad():
        pos = batch_log_probs(
            model, [p.context_tokens for p in pairs], [p.preferred_tokens for p in pairs]
        )
        neg = batch_log_probs(
            model, [p.context_tokens for p in pairs], [p.rejected_tokens for p in pairs]
        )
    return float((pos > neg).float().mean())


def train_dpo(
    policy: GenRecModel, pairs: list[PreferencePair], config: DpoConfig
) -> list[dict[str, float]]:
    """Align the policy with DPO against a frozen deep copy of itself.

    Reference scores are computed once up front (the reference never
    moves). Returns the per-epoch loss history."""
    if not pairs:
        raise TrainingError("no preference pairs")
    cfg = config
    reference = copy.deepcopy(policy)
    reference.eval()
    for param in reference.parameters():
        param.requires_grad_(False)

    contexts = [p.context_tokens for p in pairs]
    preferred = [p.preferred_tokens for p in pairs]
    rejected = [p.rejected_tokens for p in pairs]
    with torch.no_grad():
        ref_pos = batch_log_probs(reference, contexts, preferred)
        ref_neg = batch_log_probs(reference, contexts, rejected)

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(policy.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(pairs)
    history: list[dict[str, float]] = []
    policy.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen).tolist()
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            pos = batch_log_probs(policy, [contexts[i] for i in idx], [preferred[i] for i in idx])
            neg = batch_log_probs(policy, [contexts[i] for i in idx], [rejected[i] for i in idx])
            delta = (pos - ref_pos[idx]) - (neg - ref_neg[idx])
            loss = F.softplus(-cfg.beta_dpo * delta).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite DPO loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach().double()) * len(idx)
        history.append({"epoch": float(epoch), "loss": loss_sum / n})
    policy.eval()
    return history


def dump_pairs(pairs: list[PreferencePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(
                json.dumps(
                    {
                        "user": p.user_key,
                        "step": p.step,
                        "context": p.context_tokens,
                        "preferred": p.preferred_tokens,
                        "rejected": p.rejected_tokens,
                    }
                )
                + "\n"
            )
