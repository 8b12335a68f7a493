import itertools
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from counterfactual_ir.evaluation import (
    EvalRecord,
    mrr_at_k,
    ndcg_at_k,
    ndcg_query,
    parse_pct,
    passage_extraction_eval,
    rank_passages,
    reciprocal_rank,
    render_pct,
    robustness_report,
    write_report,
)


def brute_rr(ranking, gold, k):
    # scan oracle: walk the list, count positions explicitly
    pos = 0
    for item in ranking:
        pos += 1
        if item == gold:
            return 1.0 / pos if pos <= k else 0.0
    return 0.0


def brute_ndcg(ranking, gains, k):
    got = 0.0
    for i in range(min(k, len(ranking))):
        got += gains.get(ranking[i], 0) / math.log2(i + 2)
    best = 0.0
    for perm in itertools.permutations(gains):
        best = max(best, sum(gains[p] / math.log2(i + 2) for i, p in enumerate(perm[:k])))
    return got / best if best else 0.0


class TestMRR:
    def test_examples(self):
        assert reciprocal_rank(["g", "a"], "g") == 1.0
        assert reciprocal_rank(["a", "b", "g"], "g") == pytest.approx(1 / 3)
        assert reciprocal_rank([str(i) for i in range(10)] + ["g"], "g", k=10) == 0.0

    def test_absent_gold(self):
        assert reciprocal_rank(["a", "b"], None) == 0.0

    def test_duplicates_raise(self):
        with pytest.raises(ValueError, match="duplicate"):
            mrr_at_k([EvalRecord("q", ("a", "a"), "a")])

    def test_empty(self):
        with pytest.raises(ValueError):
            mrr_at_k([])

    @pytest.mark.parametrize("n", range(1, 7))
    def test_all_permutations(self, n):
        items = list(range(n))
        for perm in itertools.permutations(items):
            for gold in items:
                for k in (1, 3, 10):
                    assert reciprocal_rank(perm, gold, k) == brute_rr(perm, gold, k)
        records = [EvalRecord(str(i), p, 0) for i, p in enumerate(itertools.permutations(items))]
        mean = sum(brute_rr(r.ranking, 0, 10) for r in records) / len(records)
        assert mrr_at_k(records) == pytest.approx(mean, abs=1e-12)


class TestNDCG:
    def test_single_relevant_top(self):
        assert ndcg_query(["a", "b"], {"a": 1}) == 1.0

    def test_zero_gains(self):
        assert ndcg_query(["a", "b"], {"a": 0, "b": 0}) == 0.0
        assert ndcg_query(["a"], {}) == 0.0

    def test_graded_four_doc_oracle(self):
        gains = {"a": 3, "b": 2, "c": 0, "d": 1}
        ranking = ["c", "a", "d", "b"]
        dcg = 0 / 1 + 3 / math.log2(3) + 1 / math.log2(4) + 2 / math.log2(5)
        idcg = 3 / 1 + 2 / math.log2(3) + 1 / math.log2(4) + 0
        assert ndcg_query(ranking, gains) == pytest.approx(dcg / idcg, abs=1e-12)

    def test_negative_gain(self):
        with pytest.raises(ValueError):
            ndcg_query(["a"], {"a": -1})

    @pytest.mark.parametrize("n", range(1, 7))
    def test_all_permutations(self, n):
        gains = {i: (i * 7) % 4 for i in range(n)}
        for perm in itertools.permutations(range(n)):
            for k in (2, 10):
                assert ndcg_query(perm, gains, k) == pytest.approx(brute_ndcg(perm, gains, k), abs=1e-12)

    def test_mean_and_range(self):
        recs = [(["a", "b"], {"b": 1}), (["a"], {"a": 2})]
        v = ndcg_at_k(recs)
        assert v == pytest.approx((1 / math.log2(3) + 1) / 2)
        assert 0 <= v <= 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=2, max_size=8, unique=True))
    def test_monotone_transform_invariance(self, scores):
        ids = list(range(len(scores)))
        gains = {i: i % 3 for i in ids}

        def rank_by(vals):
            return sorted(ids, key=lambda i: (-vals[i], i))

        transformed = [s ** 3 + 4 * s + 1 for s in scores]  # strictly increasing, exact on ints
        assert ndcg_query(rank_by(scores), gains) == ndcg_query(rank_by(transformed), gains)
        assert reciprocal_rank(rank_by(scores), 0) == reciprocal_rank(rank_by(transformed), 0)


class TestPassageEval:
    def rec(self, qid, values, did="d"):
        return {"query_id": qid, "doc_id": did, "values": values}

    def test_rank_passages(self):
        assert rank_passages([1.0, 3.0, 3.0, None, 0.5]) == [1, 2, 0, 4]

    def test_always_argmax(self):
        recs = [self.rec("q1", [0.1, 0.9, 0.2]), self.rec("q2", [5.0, 1.0])]
        out = passage_extraction_eval(recs, {("q1", "d"): 1, ("q2", "d"): 0})
        assert out.mrr == 1.0 and out.evaluated == 2

    def test_always_second(self):
        recs = [self.rec("q1", [0.1, 0.9, 0.2]), self.rec("q2", [5.0, 1.0])]
        assert passage_extraction_eval(recs, {("q1", "d"): 2, ("q2", "d"): 1}).mrr == 0.5

    def test_mixed_fixture(self):
        recs = [
            self.rec("q1", [0.3, 0.3, 0.1, 0.0]),   # ties: 0, 1, 2, 3 -> positive 1 at rank 2
            self.rec("q2", [None, 2.0, None, 4.0]),  # ranked 3, 1 -> positive 1 at rank 2
            self.rec("q3", [0.0] * 12),             # positive 11 at rank 12 -> 0
            self.rec("q4", [1.0, 2.0, 3.0]),        # positive 0 at rank 3
            self.rec("q5", [1.0]),                  # uncovered gold -> skipped
        ]
        pos = {("q1", "d"): 1, ("q2", "d"): 1, ("q3", "d"): 11, ("q4", "d"): 0, ("q5", "d"): None}
        out = passage_extraction_eval(recs, pos)
        assert out.mrr == pytest.approx((1 / 2 + 1 / 2 + 0 + 1 / 3) / 4)
        assert out.evaluated == 4 and out.skipped == [("q5", "d")]

    def test_accepts_objects(self):
        class R:
            query_id, doc_id, values = "q", "d", (0.0, 1.0)

        assert passage_extraction_eval([R()], {("q", "d"): 1}).mrr == 1.0

    def test_missing_positive(self):
        with pytest.raises(KeyError):
            passage_extraction_eval([self.rec("q", [1.0])], {})

    def test_nothing_evaluable(self):
        with pytest.raises(ValueError):
            passage_extraction_eval([self.rec("q", [1.0])], {("q", "d"): None})


class TestRobustness:
    def test_table_values(self):
        assert robustness_report(0.613, 0.584).rendered == "-4.7%"
        assert robustness_report(0.632, 0.570).rendered == "-9.8%"
        assert robustness_report(0.5, 0.5).rendered == "0.0%"

    def test_increase_and_tiny_negative(self):
        assert render_pct(0.1234) == "+12.3%"
        assert render_pct(-0.0004) == "0.0%"

    def test_zero_before(self):
        with pytest.raises(ValueError):
            robustness_report(0.0, 0.3)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.001, 1.0), st.floats(0.0, 1.0))
    def test_round_trip(self, before, after):
        rep = robustness_report(before, after)
        assert abs(parse_pct(rep.rendered) - rep.pct_change) <= 0.05 / 100 + 1e-12

    def test_parse_rejects(self):
        with pytest.raises(ValueError):
            parse_pct("4.7")


def test_write_report(tmp_path):
    rows = [{"method": "shapley", "resolution": "merge", "metric": "mrr@10p", "value": 0.5},
            {"attack": "ts", "before": 0.613, "after": 0.584, "pct_change": "-4.7%"}]
    tsv, js = write_report(tmp_path, rows)
    lines = tsv.read_text().splitlines()
    assert lines[0].split("\t") == ["method", "resolution", "metric", "value", "attack", "before", "after", "pct_change"]
    assert lines[2].endswith("-4.7%")
    assert json.loads(js.read_text()) == rows
