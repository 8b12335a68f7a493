"""Passage attribution: rank change, relevance change and Shapley values.

Shapley values treat passages as players in a coalitional game whose value
is the relevance score of the document built from a coalition's passages
(kept in document order). The empty coalition scores 0.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .corpus import SegmentedDocument
from .counterfactual import DELETION, ModificationMode, construct

METHODS = ("delta_rank", "delta_rel", "shapley", "shapley_exact", "shapley_mc")
RESOLUTIONS = ("none", "non_overlap", "merge")
EXACT_MAX_PLAYERS = 12
DEFAULT_PERMUTATIONS = 5000


@dataclass(frozen=True)
class AttributionResult:
    method: str
    resolution: str
    values: tuple[Optional[float], ...]
    key_index: int
    coalition_evals: int = 0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def to_json(self, query_id: str = "", doc_id: str = "") -> dict:
        return {
            "query_id": query_id,
            "doc_id": doc_id,
            "method": self.method,
            "resolution": self.resolution,
            "values": [None if v is None else float(v) for v in self.values],
            "key_index": self.key_index,
            "coalition_evals": self.coalition_evals,
        }


def key_passage(values: Sequence[Optional[float]]) -> int:
    """Index of the largest value; ``None`` entries are skipped, ties go to the lowest index."""
    best, best_val = -1, -math.inf
    for i, v in enumerate(values):
        if v is not None and v > best_val:
            best, best_val = i, v
    if best < 0:
        raise ValueError("no values to rank")
    return best


class CoalitionValue:
    """Memoized ``v(P)`` keyed by passage bitmask.

    Thread-safe: concurrent callers may both score a missing coalition,
    but the memo only ever holds one value per key.
    """

    def __init__(self, scorer, query, passages: Sequence[Sequence[str]], memoize: bool = True, fast: bool = True):
        self.scorer = scorer
        self.query = query
        self.passages = [tuple(p) for p in passages]
        self.n = len(self.passages)
        self.memoize = memoize
        # scorers offering coalition_scores (BM25) evaluate masks without building text
        self.fast = fast
        self.evals = 0
        # memo as sorted parallel arrays so bulk lookups stay vectorized
        self._keys = np.empty(0, dtype=np.int64)
        self._vals = np.empty(0, dtype=np.float64)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._keys)

    def tokens(self, mask: int) -> tuple[str, ...]:
        out: tuple[str, ...] = ()
        for i in range(self.n):
            if mask >> i & 1:
                out += self.passages[i]
        return out

    def _lookup(self, masks: np.ndarray):
        keys = self._keys
        idx = np.searchsorted(keys, masks)
        idx_c = np.minimum(idx, max(len(keys) - 1, 0))
        found = (idx < len(keys)) & (keys[idx_c] == masks) if len(keys) else np.zeros(len(masks), bool)
        return idx_c, found

    def values(self, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64).ravel()
        if not self.memoize:
            return np.asarray(self._score(masks.tolist()), dtype=np.float64)
        uniq = np.unique(masks)
        with self._lock:
            _, found = self._lookup(uniq)
        missing = uniq[~found]
        scored = np.asarray(self._score(missing.tolist()), dtype=np.float64)
        with self._lock:
            if len(missing):
                # another thread may have filled some keys meanwhile; keep the first value
                _, already = self._lookup(missing)
                keys = np.concatenate([self._keys, missing[~already]])
                vals = np.concatenate([self._vals, scored[~already]])
                order = np.argsort(keys, kind="stable")
                self._keys, self._vals = keys[order], vals[order]
            idx, _ = self._lookup(masks)
            return self._vals[idx]

    def _score(self, masks):
        if not masks:
            return []
        if self.fast and hasattr(self.scorer, "coalition_scores"):
            scored = self.scorer.coalition_scores(self.query, self.passages, masks)
            with self._lock:
                self.evals += sum(1 for m in masks if m)
            return scored
        texts = [self.tokens(m) for m in masks]
        out = [0.0 if not t else None for t in texts]
        todo = [i for i, t in enumerate(texts) if t]
        if todo:
            scores = self.scorer.score_batch(self.query, [texts[i] for i in todo])
            for i, s in zip(todo, scores):
                out[i] = float(s)
        with self._lock:
            self.evals += len(todo)
        return out


def _popcount(masks: np.ndarray) -> np.ndarray:
    counts = np.zeros_like(masks)
    m = masks.copy()
    while np.any(m):
        counts += m & 1
        m >>= 1
    return counts


def shapley_exact(query, passage_group: Sequence[Sequence[str]], scorer,
                  value: Optional[CoalitionValue] = None) -> tuple[np.ndarray, int]:
    """Exact Shapley values by enumerating all ``2**n`` coalitions.

    Returns ``(values, coalition_evals)``.
    """
    n = len(passage_group)
    if n == 0:
        raise ValueError("empty passage group")
    if n > EXACT_MAX_PLAYERS:
        raise ValueError(f"group of {n} passages is too large for exact enumeration; use shapley_mc")
    v_fn = value or CoalitionValue(scorer, query, passage_group)
    masks = np.arange(1 << n, dtype=np.int64)
    v = v_fn.values(masks)
    size = _popcount(masks)
    fact = [math.factorial(k) for k in range(n + 1)]
    weight = np.array([fact[k] * fact[n - k - 1] / fact[n] for k in range(n)] + [0.0])
    phi = np.empty(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weight[size[without]] * (v[without | bit] - v[without]))
    return phi, v_fn.evals


def shapley_mc(query, passage_group: Sequence[Sequence[str]], scorer, num_permutations: int = DEFAULT_PERMUTATIONS,
               seed: int = 0, exhaustive: bool = False, memoize: bool = True,
               value: Optional[CoalitionValue] = None) -> tuple[np.ndarray, int]:
    """Permutation-sampling Shapley estimate.

    Each sampled ordering credits every passage with ``v(predecessors + p) -
    v(predecessors)``; the estimate is the mean over orderings. With
    ``exhaustive=True`` all ``n!`` orderings are used once and the result is
    the exact value. Returns ``(values, coalition_evals)``.
    """
    n = len(passage_group)
    if n == 0:
        raise ValueError("empty passage group")
    if num_permutations < 1:
        raise ValueError("num_permutations must be >= 1")
    v_fn = value or CoalitionValue(scorer, query, passage_group, memoize=memoize)

    if exhaustive:
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        perms = rng.permuted(np.tile(np.arange(n, dtype=np.int64), (num_permutations, 1)), axis=1)

    bits = np.left_shift(np.int64(1), perms)
    prefix = np.zeros((len(perms), n + 1), dtype=np.int64)
    np.cumsum(bits, axis=1, out=prefix[:, 1:])
    v = v_fn.values(prefix.ravel()).reshape(prefix.shape)
    marginal = np.diff(v, axis=1)
    totals = np.zeros(n)
    np.add.at(totals, perms, marginal)
    return totals / len(perms), v_fn.evals


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def counterfactuals(seg_doc: SegmentedDocument, mode=DELETION, seed: int = 0, vocabulary=None):
    """One ``d_i*`` per passage."""
    return [
        construct(seg_doc.tokens, seg_doc.passages, i, mode, _derived_seed(seed, i), vocabulary, seg_doc.doc_id)
        for i in range(len(seg_doc.passages))
    ]


def delta_rel(query, seg_doc: SegmentedDocument, scorer, mode=DELETION, seed: int = 0,
              vocabulary=None) -> AttributionResult:
    """``f(q, d) - f(q, d_i*)`` for every passage."""
    if not seg_doc.passages:
        raise ValueError("document has no passages")
    mode = ModificationMode.coerce(mode)
    docs = counterfactuals(seg_doc, mode, seed, vocabulary)
    scores = scorer.score_batch(query, [seg_doc.tokens] + [d.tokens for d in docs])
    values = tuple(scores[0] - s for s in scores[1:])
    return AttributionResult("delta_rel", "none", values, key_passage(values), len(scores),
                             {"mode": mode.kind})


def _rank_among(score: float, doc_id: str, others: Mapping[str, float]) -> int:
    return 1 + sum(1 for oid, s in others.items() if s > score or (s == score and oid < doc_id))


def delta_rank(query, seg_doc: SegmentedDocument, candidate_pool: Mapping[str, Sequence[str]], scorer,
               mode=DELETION, seed: int = 0, vocabulary=None) -> AttributionResult:
    """Rank drop of the document within ``candidate_pool`` when each passage is altered.

    ``candidate_pool`` maps doc id to tokens and must include the document
    itself. Values are ``rank(d_i*) - rank(d)``; larger means more important.
    """
    if seg_doc.doc_id not in candidate_pool:
        raise ValueError("candidate pool must contain the original document")
    if len(candidate_pool) < 2:
        raise ValueError("candidate pool needs at least 2 documents")
    mode = ModificationMode.coerce(mode)
    other_ids = [d for d in candidate_pool if d != seg_doc.doc_id]
    other_scores = dict(zip(other_ids, scorer.score_batch(query, [candidate_pool[d] for d in other_ids])))
    docs = counterfactuals(seg_doc, mode, seed, vocabulary)
    scores = scorer.score_batch(query, [seg_doc.tokens] + [d.tokens for d in docs])
    base_rank = _rank_among(scores[0], seg_doc.doc_id, other_scores)
    values = tuple(float(_rank_among(s, seg_doc.doc_id, other_scores) - base_rank) for s in scores[1:])
    return AttributionResult("delta_rank", "none", values, key_passage(values),
                             len(scores) + len(other_ids), {"mode": mode.kind, "base_rank": base_rank})


def interleave(values_a: Sequence[float], values_b: Sequence[float]) -> list[float]:
    out = []
    for i in range(len(values_a) + len(values_b)):
        out.append(values_a[i // 2] if i % 2 == 0 else values_b[i // 2])
    return out


def moving_average3(psi: Sequence[float]) -> list[float]:
    """Unweighted mean over ``[i-1, i+1]``, truncated at the ends."""
    n = len(psi)
    return [float(np.mean(psi[max(0, i - 1):min(n, i + 2)])) for i in range(n)]


def resolve_overlap(seg_doc: SegmentedDocument, strategy: str, values_a: Sequence[float],
                    values_b: Optional[Sequence[float]] = None, method: str = "shapley") -> AttributionResult:
    """Combine per-group values (group A = even passages, group B = odd) into one result."""
    n = len(seg_doc.passages)
    n_a, n_b = (n + 1) // 2, n // 2
    if len(values_a) != n_a:
        raise ValueError(f"group A expects {n_a} values, got {len(values_a)}")
    if strategy == "non_overlap":
        values = tuple(float(values_a[i // 2]) if i % 2 == 0 else None for i in range(n))
    elif strategy == "merge":
        values_b = values_b if values_b is not None else []
        if len(values_b) != n_b:
            raise ValueError(f"group B expects {n_b} values, got {len(values_b)}")
        psi = interleave(values_a, values_b)
        values = tuple(psi) if n < 2 else tuple(moving_average3(psi))
    else:
        raise ValueError(f"unknown resolution strategy {strategy!r}")
    return AttributionResult(method, strategy, values, key_passage(values))


def split_groups(seg_doc: SegmentedDocument) -> tuple[list[tuple[str, ...]], list[tuple[str, ...]]]:
    if seg_doc.overlap_ratio > 0.5:
        raise ValueError("even/odd passage groups overlap when overlap_ratio > 0.5")
    group_a = [seg_doc.passage_tokens(i) for i in range(0, len(seg_doc.passages), 2)]
    group_b = [seg_doc.passage_tokens(i) for i in range(1, len(seg_doc.passages), 2)]
    return group_a, group_b


def _shapley_group(query, group, scorer, method, num_permutations, seed):
    if method == "shapley_exact" or (method == "shapley" and len(group) <= EXACT_MAX_PLAYERS):
        values, evals = shapley_exact(query, group, scorer)
        return values, evals, "shapley_exact"
    values, evals = shapley_mc(query, group, scorer, num_permutations, seed)
    return values, evals, "shapley_mc"


def attribute(query, seg_doc: SegmentedDocument, scorer, method: str = "shapley", resolution: str = "merge",
              mode=DELETION, num_permutations: int = DEFAULT_PERMUTATIONS, seed: int = 0,
              candidate_pool: Optional[Mapping[str, Sequence[str]]] = None, vocabulary=None) -> AttributionResult:
    """Attribute relevance to the passages of ``seg_doc`` with the chosen method.

    ``method="shapley"`` picks exact enumeration up to 12 passages per group
    and permutation sampling above. Shapley over overlapping windows needs
    ``resolution`` ``non_overlap`` or ``merge``; ``none`` requires
    non-overlapping segmentation.
    """
    if method not in METHODS:
        raise ValueError(f"unknown attribution method {method!r}")
    if resolution not in RESOLUTIONS:
        raise ValueError(f"unknown resolution {resolution!r}")
    if method == "delta_rel":
        return delta_rel(query, seg_doc, scorer, mode, seed, vocabulary)
    if method == "delta_rank":
        if candidate_pool is None:
            raise ValueError("delta_rank needs a candidate pool")
        return delta_rank(query, seg_doc, candidate_pool, scorer, mode, seed, vocabulary)

    if resolution == "none":
        if seg_doc.overlap_ratio != 0.0:
            raise ValueError("Shapley values need non-overlapping passages; use non_overlap or merge")
        group = [seg_doc.passage_tokens(i) for i in range(len(seg_doc.passages))]
        values, evals, used = _shapley_group(query, group, scorer, method, num_permutations, seed)
        vals = tuple(float(x) for x in values)
        return AttributionResult(used, "none", vals, key_passage(vals), evals)

    group_a, group_b = split_groups(seg_doc)
    values_a, evals_a, used = _shapley_group(query, group_a, scorer, method, num_permutations, seed)
    values_b, evals_b = np.array([]), 0
    if resolution == "merge" and group_b:
        values_b, evals_b, used_b = _shapley_group(query, group_b, scorer, method, num_permutations, seed + 1)
        if used_b != used:
            used = "shapley_mc"
    res = resolve_overlap(seg_doc, resolution, values_a, values_b if resolution == "merge" else None, used)
    return AttributionResult(res.method, res.resolution, res.values, res.key_index, evals_a + evals_b,
                             {"group_sizes": [len(group_a), len(group_b)]})


def non_overlap_positive(seg_doc: SegmentedDocument) -> Optional[int]:
    """Remap the gold positive to the even-index passage covering most of the gold span."""
    if seg_doc.gold_span is None:
        return None
    start, end = seg_doc.gold_span
    best, best_cov = None, -1
    for p in seg_doc.passages[::2]:
        cov = max(0, min(end, p.token_end) - max(start, p.token_start))
        if cov > best_cov:
            best, best_cov = p.index, cov
    return best
