import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragr.dataio import Interaction, build_sequences, leave_one_out_split
from ragr.errors import ConfigError, LookupError_
from ragr.rqvae import SemanticId
from ragr.sequence import (
    BOS,
    EOS,
    PAD,
    InstanceKind,
    SequenceMode,
    TokenVocabulary,
    build_vocabulary,
    make_instances,
    serialize_history,
    sid_history,
)


def item_sid(*codes, d=0):
    return SemanticId(tuple(codes), disambig=d)


def rev_sid(*codes):
    return SemanticId(tuple(codes))


class TestVocabulary:
    def test_reference_sizes(self):
        vocab = build_vocabulary(4, 256, 15)
        assert vocab.vocab_size == 3 + 4 * 256 + 16 == 1043
        assert (PAD, BOS, EOS) == (0, 1, 2)
        assert vocab.code_token(1, 0) == 3
        assert vocab.code_token(4, 255) == 3 + 4 * 256 - 1
        assert vocab.disambig_token(0) == 3 + 4 * 256
        assert vocab.disambig_token(15) == vocab.vocab_size - 1

    def test_exhaustive_round_trip(self):
        vocab = build_vocabulary(2, 4, 2)
        seen = set()
        for level in (1, 2):
            for code in range(4):
                t = vocab.code_token(level, code)
                assert vocab.decode_token(t) == ("code", (level, code))
                seen.add(t)
        for d in range(3):
            t = vocab.disambig_token(d)
            assert vocab.decode_token(t) == ("disambig", d)
            seen.add(t)
        assert seen == set(range(3, vocab.vocab_size))

    def test_out_of_range(self):
        vocab = build_vocabulary(2, 4, 0)
        with pytest.raises(ConfigError):
            vocab.code_token(3, 0)
        with pytest.raises(ConfigError):
            vocab.code_token(1, 4)
        with pytest.raises(ConfigError):
            vocab.disambig_token(1)
        with pytest.raises(ConfigError):
            vocab.decode_token(vocab.vocab_size)

    def test_item_tokens_require_disambig(self):
        vocab = build_vocabulary(2, 4, 1)
        with pytest.raises(ConfigError):
            vocab.item_tokens(SemanticId((0, 1)))
        assert vocab.item_tokens(item_sid(0, 1, d=1)) == [3, 3 + 4 + 1, 3 + 8 + 1]
        assert vocab.review_tokens(rev_sid(2, 3)) == [3 + 2, 3 + 4 + 3]

    def test_invalid_dimensions(self):
        with pytest.raises(ConfigError):
            TokenVocabulary(0, 4, 1)
        with pytest.raises(ConfigError):
            TokenVocabulary(2, 4, 0)


class TestSerializeHistory:
    vocab = build_vocabulary(2, 4, 2)

    def test_item_only_layout(self):
        history = [(item_sid(0, 1, d=0), rev_sid(2, 2)), (item_sid(3, 3, d=1), None)]
        ctx = serialize_history(history, self.vocab, SequenceMode.ITEM_ONLY)
        a = self.vocab.item_tokens(history[0][0])
        b = self.vocab.item_tokens(history[1][0])
        assert ctx.tokens == [BOS] + a + b

    def test_augmented_interleaves(self):
        history = [(item_sid(0, 1, d=0), rev_sid(2, 2)), (item_sid(3, 3, d=1), None)]
        for mode in (SequenceMode.INPUT_AUGMENTED, SequenceMode.TASK_AUGMENTED):
            ctx = serialize_history(history, self.vocab, mode)
            assert ctx.tokens == (
                [BOS]
                + self.vocab.item_tokens(history[0][0])
                + self.vocab.review_tokens(history[0][1])
                + self.vocab.item_tokens(history[1][0])
            )

    def test_truncation_counts_interactions(self):
        history = [(item_sid(i % 4, 0, d=0), rev_sid(i % 4, 1)) for i in range(30)]
        ctx = serialize_history(history, self.vocab, SequenceMode.TASK_AUGMENTED, max_items=20)
        # 20 interactions kept: each is 3 item tokens + 2 review tokens
        assert len(ctx.tokens) == 1 + 20 * (3 + 2)
        expected_first = self.vocab.item_tokens(history[10][0])
        assert ctx.tokens[1:4] == expected_first

    def test_empty_history(self):
        ctx = serialize_history([], self.vocab, SequenceMode.ITEM_ONLY)
        assert ctx.tokens == [BOS]


def toy_split(reviews: bool):
    text = "r" if reviews else ""
    inter = [
        Interaction("u1", f"i{t}", t, text) for t in range(1, 6)
    ] + [Interaction("u2", f"i{t}", t, text) for t in range(1, 4)]
    return leave_one_out_split(build_sequences(inter))


def toy_sids(vocab):
    item_sids = {f"i{t}": item_sid(t % 4, (t + 1) % 4, d=t % 2) for t in range(1, 6)}
    review_sids = {}
    for user, length in (("u1", 5), ("u2", 3)):
        for t in range(1, length + 1):
            review_sids[f"{user}::{t}"] = rev_sid((t + 2) % 4, t % 4)
    return item_sids, review_sids


class TestSidHistory:
    vocab = build_vocabulary(2, 4, 2)

    def test_resolves_positions(self):
        item_sids, review_sids = toy_sids(self.vocab)
        inter = [Interaction("u1", f"i{t}", t, "r") for t in range(1, 4)]
        pairs = sid_history(inter, item_sids, review_sids)
        assert [p[0] for p in pairs] == [item_sids[f"i{t}"] for t in range(1, 4)]
        assert [p[1] for p in pairs] == [review_sids[f"u1::{t}"] for t in range(1, 4)]

    def test_empty_review_gives_none(self):
        item_sids, review_sids = toy_sids(self.vocab)
        inter = [Interaction("u1", "i1", 1, "")]
        assert sid_history(inter, item_sids, review_sids) == [(item_sids["i1"], None)]

    def test_missing_sid_raises(self):
        with pytest.raises(LookupError_):
            sid_history([Interaction("u1", "zzz", 1, "")], {}, {})


class TestMakeInstances:
    vocab = build_vocabulary(2, 4, 2)

    def test_counts_per_mode(self):
        split = toy_split(reviews=True)
        item_sids, review_sids = toy_sids(self.vocab)
        # train prefixes: u1 has 3 interactions, u2 has 1 (too short -> none)
        n_item = 2  # u1 steps t=2,3
        for mode, expected in (
            (SequenceMode.ITEM_ONLY, n_item),
            (SequenceMode.INPUT_AUGMENTED, n_item),
            (SequenceMode.TASK_AUGMENTED, 2 * n_item),
        ):
            got = make_instances(split, item_sids, review_sids, self.vocab, mode)
            assert len(got) == expected

    def test_next_item_targets(self):
        split = toy_split(reviews=True)
        item_sids, review_sids = toy_sids(self.vocab)
        inst = make_instances(
            split, item_sids, review_sids, self.vocab, SequenceMode.ITEM_ONLY
        )
        for i in inst:
            assert i.kind is InstanceKind.NEXT_ITEM
            assert i.target_tokens[-1] == EOS
            assert len(i.target_tokens) == 3 + 1  # 2 codes + disambig + EOS
        # step 2 for u1 predicts i2 from [i1]
        first = inst[0]
        assert first.user_key == "u1" and first.step == 2
        assert first.input_tokens == [BOS] + self.vocab.item_tokens(item_sids["i1"])
        assert first.target_tokens == self.vocab.item_tokens(item_sids["i2"]) + [EOS]

    def test_review_instance_input_extends_item_context(self):
        split = toy_split(reviews=True)
        item_sids, review_sids = toy_sids(self.vocab)
        inst = make_instances(
            split, item_sids, review_sids, self.vocab, SequenceMode.TASK_AUGMENTED
        )
        by_kind = {}
        for i in inst:
            by_kind.setdefault((i.user_key, i.step, i.kind), i)
        for (user, step, kind), i in by_kind.items():
            if kind is not InstanceKind.NEXT_REVIEW:
                continue
            mate = by_kind[(user, step, InstanceKind.NEXT_ITEM)]
            # next-review input = next-item input + the target item's tokens
            assert i.input_tokens == mate.input_tokens + mate.target_tokens[:-1]
            assert i.target_tokens == (
                self.vocab.review_tokens(review_sids[f"{user}::{step}"]) + [EOS]
            )

    def test_no_reviews_degrades_to_item_only(self):
        split = toy_split(reviews=False)
        item_sids, review_sids = toy_sids(self.vocab)
        task = make_instances(
            split, item_sids, review_sids, self.vocab, SequenceMode.TASK_AUGMENTED
        )
        plain = make_instances(
            split, item_sids, review_sids, self.vocab, SequenceMode.ITEM_ONLY
        )
        key = lambda i: (i.user_key, i.step, tuple(i.input_tokens), tuple(i.target_tokens))
        assert sorted(map(key, task)) == sorted(map(key, plain))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2)),
        min_size=1,
        max_size=25,
    ),
    st.sampled_from(list(SequenceMode)),
    st.integers(1, 20),
)
def test_serialize_history_token_budget(raw, mode, max_items):
    """Every emitted token is in range and the context length matches the
    per-interaction token arithmetic exactly."""
    vocab = build_vocabulary(2, 4, 3)
    history = []
    for a, b, d in raw:
        rev = rev_sid(b, a) if (a + b) % 2 == 0 else None
        history.append((item_sid(a, b, d=d), rev))
    ctx = serialize_history(history, vocab, mode, max_items)
    kept = history[-max_items:]
    expected = 1 + sum(
        3 + (2 if (mode != SequenceMode.ITEM_ONLY and rev is not None) else 0)
        for _, rev in kept
    )
    assert len(ctx.tokens) == expected
    assert all(0 <= t < vocab.vocab_size for t in ctx.tokens)
    assert ctx.tokens[0] == BOS and BOS not in ctx.tokens[1:]
