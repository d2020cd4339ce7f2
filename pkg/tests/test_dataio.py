import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragr.dataio import (
    DatasetSplit,
    Interaction,
    SynthConfig,
    build_sequences,
    generate_synthetic,
    k_core_filter,
    leave_one_out_split,
    load_sequences_tsv,
    parse_reviews,
    save_sequences_tsv,
)
from ragr.errors import ConfigError, EmptyDatasetError, ValidationError


def make(user, item, ts, text=""):
    return Interaction(user, item, ts, text)


class TestParseReviews:
    def test_field_mapping(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        path.write_text(
            json.dumps(
                {"reviewerID": "u1", "asin": "i1", "unixReviewTime": 100, "reviewText": "good"}
            )
            + "\n"
        )
        result = parse_reviews(path, "json-lines")
        assert result.interactions == [Interaction("u1", "i1", 100, "good")]
        assert result.skipped == 0

    def test_summary_fallback(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        path.write_text(
            json.dumps(
                {"reviewerID": "u1", "asin": "i1", "unixReviewTime": 5, "summary": "ok"}
            )
            + "\n"
        )
        assert parse_reviews(path).interactions[0].review_text == "ok"

    def test_missing_asin_skipped(self, tmp_path):
        path = tmp_path / "reviews.jsonl"
        records = [
            {"reviewerID": "u1", "asin": "i1", "unixReviewTime": 1, "reviewText": "a"},
            {"reviewerID": "u2", "unixReviewTime": 2, "reviewText": "b"},
            {"reviewerID": "u3", "asin": "i3", "unixReviewTime": 3, "reviewText": "c"},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
        result = parse_reviews(path)
        assert len(result.interactions) == 2
        assert result.skipped == 1

    def test_tsv(self, tmp_path):
        path = tmp_path / "reviews.tsv"
        path.write_text("user\titem\ttimestamp\treview\nu1\ti1\t42\tnice\n")
        result = parse_reviews(path, "tsv")
        assert result.interactions == [Interaction("u1", "i1", 42, "nice")]

    def test_empty_file_raises(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("not json\n")
        with pytest.raises(EmptyDatasetError):
            parse_reviews(path)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(OSError):
            parse_reviews(tmp_path / "nope.jsonl")


class TestKCore:
    def test_k1_noop(self):
        inter = [make("u1", "i1", 1), make("u2", "i2", 2)]
        assert k_core_filter(inter, 1) == inter

    def test_star_graph_emptied(self):
        inter = [make("u1", f"i{j}", j) for j in range(5)]
        with pytest.raises(EmptyDatasetError):
            k_core_filter(inter, 5)

    def test_bipartite_clique_unchanged(self):
        inter = [make(f"u{a}", f"i{b}", a * 5 + b) for a in range(5) for b in range(5)]
        assert k_core_filter(inter, 5) == inter

    def test_idempotent(self, rng):
        inter = [
            make(f"u{rng.integers(6)}", f"i{rng.integers(6)}", int(t)) for t in range(60)
        ]
        once = k_core_filter(inter, 3)
        assert k_core_filter(once, 3) == once

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            k_core_filter([make("u", "i", 1)], 0)


class TestBuildSequences:
    def test_sorted_by_timestamp(self):
        inter = [make("u1", "a", 3), make("u1", "b", 1), make("u1", "c", 2)]
        [seq] = build_sequences(inter)
        assert [it.timestamp for it in seq.interactions] == [1, 2, 3]

    def test_tiebreak_by_item_key(self):
        inter = [make("u1", "z", 5), make("u1", "a", 5), make("u1", "m", 1)]
        [seq] = build_sequences(inter)
        assert [it.item_key for it in seq.interactions] == ["m", "a", "z"]

    def test_short_user_dropped(self):
        inter = [make("u1", "a", 1), make("u1", "b", 2)]
        assert build_sequences(inter) == []

    def test_preserves_multiset(self, rng):
        inter = [
            make(f"u{rng.integers(4)}", f"i{rng.integers(9)}", int(rng.integers(50)))
            for _ in range(80)
        ]
        seqs = build_sequences(inter)
        surviving_users = {s.user_key for s in seqs}
        expected = sorted(
            (it.user_key, it.item_key, it.timestamp)
            for it in inter
            if it.user_key in surviving_users
        )
        got = sorted(
            (it.user_key, it.item_key, it.timestamp)
            for s in seqs
            for it in s.interactions
        )
        assert got == expected


class TestLeaveOneOut:
    def test_four_interaction_protocol(self):
        inter = [make("u1", c, t) for t, c in enumerate("abcd", 1)]
        split = leave_one_out_split(build_sequences(inter))
        assert [it.item_key for it in split.train["u1"]] == ["a", "b"]
        assert split.validation["u1"].target.item_key == "c"
        assert [it.item_key for it in split.validation["u1"].context] == ["a", "b"]
        assert split.test["u1"].target.item_key == "d"
        assert [it.item_key for it in split.test["u1"].context] == ["a", "b", "c"]

    def test_minimal_case(self):
        inter = [make("u1", c, t) for t, c in enumerate("abc", 1)]
        split = leave_one_out_split(build_sequences(inter))
        assert [it.item_key for it in split.train["u1"]] == ["a"]
        assert split.validation["u1"].target.item_key == "b"
        assert split.test["u1"].target.item_key == "c"

    def test_counts_match_user_count(self):
        inter = [
            make(f"u{u}", f"i{t}", t) for u in range(7) for t in range(1, 5)
        ]
        split = leave_one_out_split(build_sequences(inter))
        assert len(split.validation) == len(split.test) == 7

    def test_short_sequence_rejected(self):
        from ragr.dataio import UserSequence

        seq = UserSequence("u1", [make("u1", "a", 1), make("u1", "b", 2)])
        with pytest.raises(ValidationError):
            leave_one_out_split([seq])

    def test_target_not_in_context(self, rng):
        inter = [
            make(f"u{u}", f"i{rng.integers(40)}", t)
            for u in range(10)
            for t in range(1, int(rng.integers(4, 9)))
        ]
        split = leave_one_out_split(build_sequences(inter))
        for user, case in split.test.items():
            context_pairs = {(it.item_key, it.timestamp) for it in case.context}
            assert (case.target.item_key, case.target.timestamp) not in context_pairs


class TestSequenceTsv:
    def test_round_trip_with_escapes(self, tmp_path):
        inter = [make("u1", "i1", 1, "line\nwith\ttabs\\and\rcr"), make("u1", "i2", 2, "")]
        path = tmp_path / "seq.tsv"
        save_sequences_tsv(inter, path)
        assert load_sequences_tsv(path) == inter


class TestGenerateSynthetic:
    def test_determinism(self):
        cfg = SynthConfig(num_users=20, num_items=30, seed=7)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert [i for i in a.interactions] == [i for i in b.interactions]
        assert np.array_equal(a.item_embeddings.data, b.item_embeddings.data)
        assert np.array_equal(a.review_embeddings.data, b.review_embeddings.data)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(num_items=5))
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(signal_strength=1.5))

    def _cooccurrence(self, data):
        counts = np.zeros((8, 8))
        by_user = {}
        for it in data.interactions:
            by_user.setdefault(it.user_key, []).append(it)
        from ragr.dataio import review_key

        for user, items in by_user.items():
            for t in range(1, len(items)):
                rc = data.review_cluster[review_key(user, t)]
                nc = data.item_cluster[items[t].item_key]
                counts[rc, nc] += 1
        return counts

    def test_zero_signal_independent(self):
        from scipy.stats import chi2_contingency

        data = generate_synthetic(
            SynthConfig(num_users=400, num_items=64, signal_strength=0.0, seed=11)
        )
        counts = self._cooccurrence(data)
        _, p, _, _ = chi2_contingency(counts)
        assert p > 0.01  # fails to reject independence

    def test_full_signal_deterministic_mapping(self):
        data = generate_synthetic(
            SynthConfig(num_users=200, num_items=64, signal_strength=1.0, seed=11)
        )
        counts = self._cooccurrence(data)
        # each review cluster maps to exactly one next-item cluster
        for row in counts:
            assert (row > 0).sum() == 1

    def test_item_clusters_separated(self):
        data = generate_synthetic(SynthConfig(num_users=10, num_items=40, seed=3))
        emb = data.item_embeddings
        clusters = data.item_cluster
        for i, ki in enumerate(emb.keys):
            for j, kj in enumerate(emb.keys):
                if i < j:
                    d = np.linalg.norm(emb.data[i] - emb.data[j])
                    if clusters[ki] == clusters[kj]:
                        assert d < 1.0
                    else:
                        assert d > 1.0


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 5), st.integers(0, 8), st.integers(0, 30)),
        min_size=1,
        max_size=60,
    ),
    st.integers(1, 4),
)
def test_k_core_property(raw, k):
    inter = [make(f"u{u}", f"i{i}", t) for u, i, t in raw]
    try:
        kept = k_core_filter(inter, k)
    except EmptyDatasetError:
        return
    users = {}
    items = {}
    for it in kept:
        users[it.user_key] = users.get(it.user_key, 0) + 1
        items[it.item_key] = items.get(it.item_key, 0) + 1
    assert all(c >= k for c in users.values())
    assert all(c >= k for c in items.values())
    assert k_core_filter(kept, k) == kept
