import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from counterfactual_ir.contrastive import ReferenceEncoder
from counterfactual_ir.corpus import Document, Query
from counterfactual_ir.scoring import (
    AffineScorer,
    Bm25Index,
    Bm25Scorer,
    EmbeddingScorer,
    EmbeddingStore,
    RemoteEncoder,
    RemoteScorer,
    RemoteScorerError,
    StoreEncoder,
    embed_text,
    rank_corpus,
    read_embeddings,
    write_embeddings,
)


def q(text):
    return Query.from_text("q", text)


class TestBm25:
    def test_no_query_terms(self, bm25):
        assert bm25.score(q("zebra"), ("the", "cat")) == 0.0

    def test_empty_text(self, bm25):
        assert bm25.score(q("cat"), ()) == 0.0

    def test_hand_computed_two_doc_corpus(self):
        docs = [Document.from_text("1", "cat cat dog"), Document.from_text("2", "dog bird")]
        scorer = Bm25Scorer(Bm25Index.build(docs))
        # N=2, df(cat)=1, avgdl=2.5, tf=2, |d|=3, k1=0.9, b=0.4
        idf = math.log(1 + (2 - 1 + 0.5) / (1 + 0.5))
        norm = 0.9 * (1 - 0.4 + 0.4 * 3 / 2.5)
        expected = idf * 2 * (0.9 + 1) / (2 + norm)
        assert scorer.score(q("cat"), docs[0].tokens) == pytest.approx(expected, rel=1e-12)

    def test_index_invariants(self, docs):
        index = Bm25Index.build(docs.values())
        assert index.avgdl > 0
        assert all(v <= index.num_docs for v in index.df.values())
        assert index.idf("unseen") > index.idf("the") >= 0

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            Bm25Index.build([])

    def test_raw_string_query_rejected(self, bm25):
        with pytest.raises(TypeError):
            bm25.score("cat", ("cat",))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(["cat", "dog", "the", "mat", "sun"]), min_size=1, max_size=30), st.data())
    def test_monotone_in_query_term_occurrences(self, tokens, data):
        scorer = Bm25Scorer(Bm25Index.build([("x", ["cat", "dog"]), ("y", ["the", "mat", "sun"])]))
        query = q("cat dog")
        positions = [i for i, t in enumerate(tokens) if t not in ("cat", "dog")]
        if not positions:
            return
        pos = data.draw(st.sampled_from(positions))
        boosted = list(tokens)
        boosted[pos] = data.draw(st.sampled_from(["cat", "dog"]))
        assert scorer.score(query, boosted) >= scorer.score(query, tokens)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.sampled_from(["cat", "dog", "the", "a"]), max_size=8), min_size=1, max_size=6))
    def test_coalition_scores_match_direct_scoring(self, passages):
        scorer = Bm25Scorer(Bm25Index.build([("x", ["cat", "the"]), ("y", ["dog", "a", "a"])]))
        query = q("cat dog cat")
        masks = np.arange(1 << len(passages))
        fast = scorer.coalition_scores(query, passages, masks)
        for m, f in zip(masks, fast):
            text = [t for i, p in enumerate(passages) if m >> i & 1 for t in p]
            assert f == pytest.approx(scorer.score(query, text), abs=1e-12)


class TestEmbeddings:
    def test_cosine_identities(self):
        store = EmbeddingStore(3, {"q": [1, 0, 0], "same": [2, 0, 0], "orth": [0, 5, 0]})
        enc = StoreEncoder(store, key=lambda toks: toks[0])
        scorer = EmbeddingScorer(enc)
        assert scorer.score(["q"], ["same"]) == pytest.approx(1.0)
        assert scorer.score(["q"], ["orth"]) == pytest.approx(0.0)

    def test_empty_text_scores_zero(self):
        scorer = EmbeddingScorer(ReferenceEncoder.random(32, 4, seed=1))
        assert scorer.score(["a"], []) == 0.0

    def test_dot_similarity(self):
        store = EmbeddingStore(2, {"q": [1, 2], "d": [3, 4]})
        scorer = EmbeddingScorer(StoreEncoder(store, key=lambda t: t[0]), similarity="dot")
        assert scorer.score(["q"], ["d"]) == pytest.approx(11.0)

    def test_missing_embedding(self):
        scorer = EmbeddingScorer(StoreEncoder(EmbeddingStore(2, {"q": [1, 0]})))
        with pytest.raises(KeyError, match="missing embedding"):
            scorer.score(["q"], ["absent"])

    def test_lookup_is_bit_exact(self):
        vec = np.array([0.1, -2.5, 3.333333], dtype=np.float32)
        store = EmbeddingStore(3, {"x": vec})
        out = embed_text(StoreEncoder(store, key=lambda t: t[0]), ["x"])
        assert out.tobytes() == vec.tobytes()

    def test_store_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            EmbeddingStore(3, {"x": [1.0, 2.0]})

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4),
           st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4))
    def test_cosine_bounds(self, a, b):
        store = EmbeddingStore(4, {"a": a, "b": b})
        s = EmbeddingScorer(StoreEncoder(store, key=lambda t: t[0])).score(["a"], ["b"])
        assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


class TestEmbeddingFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        store = EmbeddingStore(5, {"doc-1": rng.normal(size=5), "ünï": rng.normal(size=5)})
        path = tmp_path / "emb.bin"
        write_embeddings(path, store)
        raw = path.read_bytes()
        assert raw[:8] == b"CFRKEMB1"
        assert struct.unpack_from("<IQ", raw, 8) == (5, 2)
        (idlen,) = struct.unpack_from("<H", raw, 20)
        assert raw[22:22 + idlen] == b"doc-1"
        again = read_embeddings(path)
        for k in store.vectors:
            assert again.get(k).tobytes() == store.get(k).tobytes()
        write_embeddings(tmp_path / "again.bin", again)
        assert (tmp_path / "again.bin").read_bytes() == raw

    def test_layout_by_hand(self, tmp_path):
        raw = b"CFRKEMB1" + struct.pack("<IQ", 2, 1) + struct.pack("<H", 1) + b"k" + struct.pack("<2f", 1.5, -2.0)
        path = tmp_path / "e.bin"
        path.write_bytes(raw)
        store = read_embeddings(path)
        assert store.dimension == 2
        np.testing.assert_array_equal(store.get("k"), np.array([1.5, -2.0], dtype=np.float32))

    def test_truncated_record_is_dimension_error(self, tmp_path):
        raw = b"CFRKEMB1" + struct.pack("<IQ", 3, 1) + struct.pack("<H", 1) + b"k" + struct.pack("<2f", 1, 2)
        path = tmp_path / "e.bin"
        path.write_bytes(raw)
        with pytest.raises(ValueError, match="dimension mismatch"):
            read_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.bin"
        path.write_bytes(b"NOTMAGIC" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            read_embeddings(path)


class TestRanking:
    def test_single_candidate(self, bm25):
        ranked = rank_corpus(bm25, q("cat"), {"a": ("cat",)})
        assert ranked.rank("a") == 1

    def test_all_equal_scores_sorted_by_id(self, bm25):
        ranked = rank_corpus(bm25, q("zebra"), {"c": ("x",), "a": ("y",), "b": ("z",)})
        assert ranked.doc_ids == ["a", "b", "c"]

    def test_matches_brute_force_sort(self, bm25, docs):
        query = q("the cat")
        cands = {k: d.tokens for k, d in docs.items()}
        ranked = rank_corpus(bm25, query, cands)
        scores = {k: bm25.score(query, v) for k, v in cands.items()}
        oracle = sorted(scores, key=lambda k: (-scores[k], k))
        assert ranked.doc_ids == oracle
        assert [ranked.rank(k) for k in oracle] == list(range(1, 6))
        values = [s for _, s in ranked.entries]
        assert values == sorted(values, reverse=True)

    def test_increasing_transform_preserves_order(self, bm25, docs):
        query = q("the cat")
        cands = {k: d.tokens for k, d in docs.items()}
        base = rank_corpus(bm25, query, cands).doc_ids
        assert rank_corpus(AffineScorer(bm25, 3.0, -7.0), query, cands).doc_ids == base

    def test_empty_candidates(self, bm25):
        with pytest.raises(ValueError):
            rank_corpus(bm25, q("cat"), {})


class TestRemote:
    def test_scores_and_batching(self, http_server):
        scorer = RemoteScorer(http_server.url, batch_size=2)
        texts = [("cat", "dog"), ("cat",), (), ("bird",), ("cat", "cat")]
        assert scorer.score_batch(["cat"], texts) == [1.0, 1.0, 0.0, 0.0, 2.0]
        # empty text is not sent; 4 texts in batches of 2
        assert http_server.requests.count("/score") == 2

    def test_identical_requests_identical_scores(self, http_server):
        scorer = RemoteScorer(http_server.url)
        a = scorer.score_batch(["cat"], [("cat", "x")] * 3)
        b = scorer.score_batch(["cat"], [("cat", "x")] * 3)
        assert a == b

    def test_in_flight_cap(self, http_server):
        http_server.delay = 0.05
        scorer = RemoteScorer(http_server.url, batch_size=1, max_in_flight=3)
        scorer.score_batch(["a"], [("a",)] * 12)
        assert 1 <= http_server.max_in_flight <= 3

    def test_non_200_is_error_with_status(self, http_server):
        http_server.respond = lambda path, body: (400, {"error": "bad"})
        scorer = RemoteScorer(http_server.url, max_retries=3, backoff=0.0)
        with pytest.raises(RemoteScorerError) as info:
            scorer.score(["a"], ["a"])
        assert info.value.status == 400
        assert not info.value.retryable
        assert len(http_server.requests) == 1

    def test_server_error_retried(self, http_server):
        calls = []

        def flaky(path, body):
            calls.append(path)
            if len(calls) < 3:
                return 503, {}
            return 200, {"scores": [0.5] * len(body["texts"])}

        http_server.respond = flaky
        scorer = RemoteScorer(http_server.url, max_retries=2, backoff=0.0)
        assert scorer.score(["a"], ["b"]) == 0.5
        assert len(calls) == 3

    def test_server_error_exhausts_retries(self, http_server):
        http_server.respond = lambda path, body: (500, {})
        scorer = RemoteScorer(http_server.url, max_retries=1, backoff=0.0)
        with pytest.raises(RemoteScorerError) as info:
            scorer.score(["a"], ["b"])
        assert info.value.status == 500 and info.value.retryable

    def test_length_mismatch(self, http_server):
        http_server.respond = lambda path, body: (200, {"scores": [1.0]})
        scorer = RemoteScorer(http_server.url, max_retries=0)
        with pytest.raises(RemoteScorerError, match="length"):
            scorer.score_batch(["a"], [("a",), ("b",)])

    def test_unreachable_endpoint(self):
        scorer = RemoteScorer("http://127.0.0.1:9", max_retries=0, timeout=1.0)
        with pytest.raises(RemoteScorerError) as info:
            scorer.score(["a"], ["b"])
        assert info.value.status is None and info.value.retryable

    def test_remote_encoder(self, http_server):
        enc = RemoteEncoder(http_server.url, dimension=3)
        np.testing.assert_array_equal(enc.encode(["ab"]), np.array([2.0, 1.0, 0.0], dtype=np.float32))
        scorer = EmbeddingScorer(enc)
        assert scorer.score(["ab"], ["cd"]) == pytest.approx(1.0)

    def test_remote_encoder_dimension_mismatch(self, http_server):
        enc = RemoteEncoder(http_server.url, dimension=4)
        with pytest.raises(ValueError, match="dimension mismatch"):
            enc.encode(["ab"])
