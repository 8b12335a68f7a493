"""Corpus-level orchestration shared by the command line and batch experiments.

Every function here works per triple and returns records in input order;
``jobs`` > 1 fans the per-triple work out over a thread pool.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .attribution import DEFAULT_PERMUTATIONS, _derived_seed, attribute, counterfactuals, non_overlap_positive
from .contrastive import (
    ContrastiveExample,
    LossWeights,
    ReferenceEncoder,
    ScoreBundle,
    _bundle_of,
    grad_check,
    relevance_to_unit,
    total_loss,
    weights,
)
from .corpus import Document, Query, SegmentedDocument, Triple, segment, tokenize
from .counterfactual import ModificationMode, adversarial, full_counterfactual, partial_counterfactual, term_spam
from .evaluation import EvalRecord, mrr_at_k, passage_extraction_eval, robustness_report
from .scoring import Bm25Index, Bm25Scorer, EmbeddingScorer, rank_corpus

@dataclass(frozen=True)
class Prepared:
    """One triple with its document segmented and the positive passage located."""

    index: int
    triple: Triple
    query: Query
    document: Document
    seg: SegmentedDocument


@dataclass
class RecordError:
    index: int
    query_id: str
    doc_id: str
    error: str

    def to_json(self) -> dict:
        return {"index": self.index, "query_id": self.query_id, "doc_id": self.doc_id, "error": self.error}


def run_ordered(fn: Callable, items: Sequence, jobs: int = 1):
    """Apply ``fn`` to every item, results in input order.

    Exceptions are caught per item and returned in place of the result, so
    one failing record does not abort the batch.
    """

    def safe(item):
        try:
            return fn(item)
        except Exception as exc:  # noqa: BLE001 - reported per record
            return exc

    if jobs <= 1 or len(items) <= 1:
        return [safe(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(safe, items))


def split_errors(prepared: Sequence[Prepared], results):
    ok, errors = [], []
    for p, r in zip(prepared, results):
        if isinstance(r, Exception):
            errors.append(RecordError(p.index, p.triple.query_id, p.triple.doc_id, f"{type(r).__name__}: {r}"))
        else:
            ok.append(r)
    return ok, errors


def prepare(documents: Mapping[str, Document], queries: Mapping[str, Query], triples: Sequence[Triple],
            window_size: int, overlap_ratio: float) -> list[Prepared]:
    """Segment each triple's document and locate its positive passage (cached per document)."""
    cache: dict[str, SegmentedDocument] = {}
    out = []
    for i, t in enumerate(triples):
        doc = documents[t.doc_id]
        if t.doc_id not in cache:
            cache[t.doc_id] = segment(doc, window_size, overlap_ratio)
        seg = cache[t.doc_id].with_positive(tokenize(t.relevant_passage_text))
        out.append(Prepared(i, t, queries[t.query_id], doc, seg))
    return out


def evaluation_positive(seg: SegmentedDocument, resolution: str) -> Optional[int]:
    """Positive index used for passage MRR; ``None`` when the gold is not covered."""
    if seg.positive_index is None:
        return None
    if resolution == "non_overlap":
        return non_overlap_positive(seg)
    return seg.positive_index


def bm25_pools(prepared: Sequence[Prepared], documents: Mapping[str, Document], index: Bm25Index,
               pool_size: int = 100) -> dict[str, dict[str, tuple[str, ...]]]:
    """Top-``pool_size`` BM25 candidates per query, always including the triple's own document."""
    scorer = Bm25Scorer(index)
    all_tokens = {d: doc.tokens for d, doc in documents.items()}
    pools: dict[str, dict[str, tuple[str, ...]]] = {}
    for p in prepared:
        qid = p.triple.query_id
        if qid not in pools:
            ranked = rank_corpus(scorer, p.query, all_tokens, qid)
            pools[qid] = {d: all_tokens[d] for d in ranked.doc_ids[:pool_size]}
    return {
        f"{p.triple.query_id}\t{p.triple.doc_id}": {**pools[p.triple.query_id], p.triple.doc_id: p.document.tokens}
        for p in prepared
    }


def attribute_all(prepared: Sequence[Prepared], scorer, method: str = "shapley", resolution: str = "merge",
                  mode="deletion", num_permutations: int = DEFAULT_PERMUTATIONS, seed: int = 42,
                  pools: Optional[Mapping[str, Mapping]] = None, jobs: int = 1):
    """Attribution record per triple (JSON-ready) plus per-record errors."""

    def work(p: Prepared):
        pool = pools[f"{p.triple.query_id}\t{p.triple.doc_id}"] if pools is not None else None
        res = attribute(p.query, p.seg, scorer, method, resolution, mode, num_permutations,
                        _derived_seed(seed, p.index), pool)
        return res.to_json(p.triple.query_id, p.triple.doc_id)

    return split_errors(prepared, run_ordered(work, prepared, jobs))


def passage_mrr(prepared: Sequence[Prepared], records: Sequence[dict], k: int = 10):
    """MRR@k of the located positive passage, keyed by each record's resolution."""
    by_key = {(p.triple.query_id, p.triple.doc_id): p.seg for p in prepared}
    positives = {}
    for r in records:
        key = (r["query_id"], r["doc_id"])
        if key not in by_key:
            raise KeyError(f"attribution for unknown triple {key}")
        positives[key] = evaluation_positive(by_key[key], r["resolution"])
    return passage_extraction_eval(records, positives, k)


def counterfactual_records(p: Prepared, scorer, key_index: Optional[int], mode="deletion",
                           epsilon: float = 0.05, num_candidates: int = 32, seed: int = 42,
                           per_passage: bool = True) -> list[dict]:
    """Partial, full and adversarial counterfactuals of one positive, plus per-passage ``d_i*``.

    ``key_index`` selects the key passage; ``None`` uses the located gold span.
    """
    base = _derived_seed(seed, p.index)
    span = p.seg.gold_span if key_index is None else p.seg.passages[key_index].span
    if span is None:
        raise ValueError("no key span")
    head = {"query_id": p.triple.query_id}
    out = [
        {**head, **partial_counterfactual(p.document, span, base).to_json()},
        {**head, **full_counterfactual(p.document, span).to_json()},
        {**head, **adversarial(p.document, p.query, scorer, epsilon, num_candidates, base).to_json()},
    ]
    if per_passage:
        out += [{**head, **d.to_json()} for d in counterfactuals(p.seg, ModificationMode.coerce(mode), base)]
    return out


def term_spam_attack(prepared: Sequence[Prepared], documents: Mapping[str, Document], scorer,
                     ratio: float = 0.05, num_targets: int = 1, pool_size: int = 100, k: int = 10,
                     seed: int = 42):
    """Term-spam non-relevant documents and measure MRR@k (document level) before and after.

    Per query the candidate set is the top-``pool_size`` of ``scorer`` over the
    corpus; ``num_targets`` non-gold documents are drawn from it and get
    ``ceil(ratio * len)`` positions overwritten with query terms.
    Returns ``(report, attacked_records)``.
    """
    all_tokens = {d: doc.tokens for d, doc in documents.items()}
    before, after, attacked = [], [], []
    for p in prepared:
        ranked = rank_corpus(scorer, p.query, all_tokens, p.triple.query_id)
        pool = ranked.doc_ids[:pool_size]
        if p.triple.doc_id not in pool:
            pool = pool + [p.triple.doc_id]
        before.append(EvalRecord(p.triple.query_id, tuple(pool), p.triple.doc_id))

        rng = np.random.default_rng(_derived_seed(seed, p.index))
        others = [d for d in pool if d != p.triple.doc_id]
        targets = sorted(rng.choice(len(others), size=min(num_targets, len(others)), replace=False).tolist())
        cand = {d: all_tokens[d] for d in pool}
        for j, t in enumerate(targets):
            did = others[t]
            spam = term_spam(documents[did], p.query, math.ceil(ratio * len(all_tokens[did])),
                             _derived_seed(seed, p.index * 1000 + j))
            cand[did] = spam.tokens
            attacked.append({"query_id": p.triple.query_id, **spam.to_json()})
        after.append(EvalRecord(p.triple.query_id, tuple(rank_corpus(scorer, p.query, cand).doc_ids),
                                p.triple.doc_id))
    return robustness_report(mrr_at_k(before, k), mrr_at_k(after, k)), attacked


def contrastive_batch(prepared: Sequence[Prepared], documents: Mapping[str, Document], encoder: ReferenceEncoder,
                      index: Bm25Index, num_negatives: int = 7, epsilon: float = 0.05, num_candidates: int = 32,
                      seed: int = 42) -> list[ContrastiveExample]:
    """Training examples from triples: BM25 hard negatives, gold-span counterfactuals, adversarial doc."""
    bm25 = Bm25Scorer(index)
    scorer = EmbeddingScorer(encoder)
    all_tokens = {d: doc.tokens for d, doc in documents.items()}
    batch = []
    for p in prepared:
        base = _derived_seed(seed, p.index)
        ranked = rank_corpus(bm25, p.query, all_tokens, p.triple.query_id)
        negs = [all_tokens[d] for d in ranked.doc_ids if d != p.triple.doc_id][:num_negatives]
        if not negs:
            raise ValueError("corpus has no negative documents")
        batch.append(ContrastiveExample(
            p.query.tokens,
            p.document.tokens,
            partial_counterfactual(p.document, p.seg.gold_span, base).tokens,
            full_counterfactual(p.document, p.seg.gold_span).tokens,
            adversarial(p.document, p.query, scorer, epsilon, num_candidates, base).tokens,
            tuple(negs),
        ))
    return batch


def random_contrastive_batch(seed: int = 0, size: int = 4, num_negatives: int = 3,
                             vocab: int = 40) -> list[ContrastiveExample]:
    """Seeded batch of random token sequences, for checking gradients without a corpus."""
    rng = np.random.default_rng(seed)
    words = [f"t{i}" for i in range(vocab)]

    def text(n):
        return tuple(rng.choice(words, size=n).tolist())

    return [ContrastiveExample(text(3), text(12), text(10), text(8), text(12),
                               tuple(text(12) for _ in range(num_negatives)))
            for _ in range(size)]


def weight_fn(strategy: str, alpha: Optional[float] = None, beta: Optional[float] = None,
              shapley_share: Optional[float] = None):
    """Weight callable on a :class:`ScoreBundle`; ``rel`` reads ``s_full`` as a cosine."""
    if strategy == "rel":
        return lambda b: weights("rel", r=relevance_to_unit(b.s_full))
    if strategy == "shapley":
        if shapley_share is None:
            raise ValueError("shapley strategy needs the key passage's normalized Shapley value")
        return lambda b: weights("shapley", s=shapley_share)
    return lambda b: weights("plugin", alpha=alpha, beta=beta)


def loss_summary(encoder: ReferenceEncoder, batch: Sequence[ContrastiveExample], ws: Sequence[Callable],
                 epsilon_fd: float = 1e-5, seed: int = 0) -> dict:
    """Batch-mean loss terms and weights, plus the finite-difference gradient check.

    ``ws`` holds one weight callable per example.
    """
    bundles = [_bundle_of(encoder, ex) for ex in batch]
    losses = [total_loss(b, w(b)) for b, w in zip(bundles, ws)]
    n = len(losses)
    out = {k: sum(getattr(lb, k) for lb in losses) / n for k in ("l_cla", "l_neg", "l_pos", "l_adv")}
    out["alpha"] = sum(lb.alpha for lb in losses) / n
    out["beta"] = sum(lb.beta for lb in losses) / n
    out["total"] = sum(lb.total for lb in losses) / n
    out["grad_check_max_rel_err"] = grad_check(encoder, batch, epsilon_fd, w=list(ws), seed=seed)
    return out


def direct_loss(scores: Mapping, w: LossWeights) -> dict:
    """Loss terms for an explicit score bundle (no encoder)."""
    bundle = ScoreBundle(float(scores["s_pos"]), float(scores["s_partial"]), float(scores["s_full"]),
                         float(scores["s_adv"]), tuple(float(x) for x in scores["s_negs"]))
    return total_loss(bundle, w).to_json()
