"""Counterfactual, partial/full, adversarial and term-spamming document construction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .scoring import query_tokens

DELETION = "deletion"
MODIFICATION = "modification"
REPLACEMENT = "replacement"
MODES = (DELETION, MODIFICATION, REPLACEMENT)
DEFAULT_WORD_RATIO = 0.15
DEFAULT_NUM_CANDIDATES = 32


@dataclass(frozen=True)
class ModificationMode:
    kind: str = DELETION
    word_ratio: float = DEFAULT_WORD_RATIO

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown modification mode {self.kind!r}")
        if not 0.0 < self.word_ratio <= 1.0:
            raise ValueError("word_ratio must be in (0, 1]")

    @classmethod
    def coerce(cls, mode) -> "ModificationMode":
        return mode if isinstance(mode, cls) else cls(mode)


@dataclass(frozen=True)
class CounterfactualDoc:
    origin_doc_id: str
    kind: str
    tokens: tuple[str, ...]
    target_passage_index: Optional[int] = None
    seed: Optional[int] = None
    provenance: tuple[dict, ...] = ()
    flags: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_json(self) -> dict:
        return {
            "origin": self.origin_doc_id,
            "kind": self.kind,
            "seed": self.seed,
            "text": self.text,
            "provenance": list(self.provenance),
        }


@dataclass(frozen=True)
class AdversarialDoc:
    origin_doc_id: str
    epsilon: float
    candidates_examined: int
    tokens: tuple[str, ...]
    score_gain: float
    positions: tuple[int, ...] = ()
    candidate_gains: tuple[float, ...] = field(default=(), repr=False)
    seed: Optional[int] = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_json(self) -> dict:
        return {
            "origin": self.origin_doc_id,
            "kind": "adversarial",
            "seed": self.seed,
            "text": self.text,
            "provenance": [{"op": "replace", "positions": list(self.positions),
                            "epsilon": self.epsilon, "candidates": self.candidates_examined,
                            "score_gain": self.score_gain}],
        }


def _tokens_of(doc):
    return tuple(doc.tokens) if hasattr(doc, "tokens") else tuple(doc)


def _doc_id(doc, default=""):
    return getattr(doc, "id", None) or getattr(doc, "doc_id", None) or default


def _check_span(span, n):
    start, end = span
    if not 0 <= start < end <= n:
        raise ValueError(f"invalid span {span} for document of length {n}")
    return start, end


def construct(tokens: Sequence[str], passages, target_index: int, mode=DELETION, seed: int = 0,
              vocabulary: Optional[Sequence[str]] = None, doc_id: str = "") -> CounterfactualDoc:
    """Build ``d_i*``: the document with passage ``target_index`` deleted, modified or replaced.

    ``passages`` holds objects with ``token_start``/``token_end`` or plain
    ``(start, end)`` pairs. Modification draws substitutes from
    ``vocabulary`` (default: the document's own distinct tokens), never
    reusing the token being replaced when an alternative exists.
    """
    mode = ModificationMode.coerce(mode)
    tokens = tuple(tokens)
    spans = [(p.token_start, p.token_end) if hasattr(p, "token_start") else tuple(p) for p in passages]
    if not 0 <= target_index < len(spans):
        raise IndexError(f"target_index {target_index} out of range for {len(spans)} passages")
    start, end = _check_span(spans[target_index], len(tokens))
    rng = np.random.default_rng(seed)

    if mode.kind == DELETION:
        out = tokens[:start] + tokens[end:]
        prov = ({"op": "delete", "start": start, "end": end},)
    elif mode.kind == MODIFICATION:
        vocab = sorted(set(vocabulary if vocabulary is not None else tokens))
        if not vocab:
            raise ValueError("empty vocabulary")
        count = math.ceil(mode.word_ratio * (end - start))
        positions = np.sort(rng.choice(np.arange(start, end), size=count, replace=False))
        out_list = list(tokens)
        edits = []
        for pos in positions.tolist():
            choices = [w for w in vocab if w != tokens[pos]] or vocab
            new = choices[int(rng.integers(len(choices)))]
            edits.append({"op": "substitute", "position": pos, "old": tokens[pos], "new": new})
            out_list[pos] = new
        out = tuple(out_list)
        prov = tuple(edits)
    else:
        if len(spans) < 2:
            raise ValueError("no replacement source")
        others = [j for j in range(len(spans)) if j != target_index]
        source = others[int(rng.integers(len(others)))]
        s0, s1 = spans[source]
        out = tokens[:start] + tokens[s0:s1] + tokens[end:]
        prov = ({"op": "replace", "start": start, "end": end, "source_index": source,
                 "source_start": s0, "source_end": s1},)
    return CounterfactualDoc(doc_id, mode.kind, out, target_index, seed, prov)


def split_sentences(span: tuple[int, int], sentence_ends) -> list[tuple[int, int]]:
    """Maximal token runs within ``span`` ending at a sentence end or at the span end."""
    start, end = span
    out = []
    cur = start
    for i in range(start, end):
        if i in sentence_ends or i == end - 1:
            out.append((cur, i + 1))
            cur = i + 1
    return out


def partial_counterfactual(doc, positive_span: tuple[int, int], seed: int = 0) -> CounterfactualDoc:
    """``d'``: remove one uniformly chosen sentence of the positive passage from the document copy."""
    tokens = _tokens_of(doc)
    span = _check_span(positive_span, len(tokens))
    sentences = split_sentences(span, getattr(doc, "sentence_ends", frozenset()))
    rng = np.random.default_rng(seed)
    k = int(rng.integers(len(sentences)))
    s0, s1 = sentences[k]
    flags = ("single_sentence",) if len(sentences) == 1 else ()
    prov = ({"op": "delete_sentence", "start": s0, "end": s1, "sentence": k,
             "num_sentences": len(sentences), "single_sentence": len(sentences) == 1},)
    return CounterfactualDoc(_doc_id(doc), "partial", tokens[:s0] + tokens[s1:], None, seed, prov, flags)


def full_counterfactual(doc, positive_span: tuple[int, int]) -> CounterfactualDoc:
    """``d*``: the document without the positive passage."""
    if isinstance(doc, CounterfactualDoc) and doc.kind == "full":
        done = [p for p in doc.provenance if p.get("op") == "delete"]
        if any((p["start"], p["end"]) == tuple(positive_span) for p in done):
            raise ValueError("span already removed")
    tokens = _tokens_of(doc)
    start, end = _check_span(positive_span, len(tokens))
    if start == 0 and end == len(tokens):
        raise ValueError("document would be empty")
    origin = doc.origin_doc_id if isinstance(doc, CounterfactualDoc) else _doc_id(doc)
    return CounterfactualDoc(origin, "full", tokens[:start] + tokens[end:], None, None,
                             ({"op": "delete", "start": start, "end": end},))


def _replace_positions(tokens, n_positions, vocab, rng):
    out = list(tokens)
    positions = np.sort(rng.choice(len(tokens), size=n_positions, replace=False)) if n_positions else np.array([], int)
    picks = rng.integers(len(vocab), size=n_positions)
    for pos, w in zip(positions.tolist(), picks.tolist()):
        out[pos] = vocab[w]
    return tuple(out), tuple(positions.tolist())


def adversarial(doc, query, scorer, epsilon: float = 0.05, num_candidates: int = DEFAULT_NUM_CANDIDATES,
                seed: int = 0) -> AdversarialDoc:
    """Best-of-K search over the epsilon-replacement neighbourhood of ``doc``.

    Each candidate overwrites ``ceil(epsilon * len)`` distinct positions with
    query tokens; the candidate with the largest score gain wins, ties to the
    first sampled.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if num_candidates < 1:
        raise ValueError("num_candidates must be >= 1")
    tokens = _tokens_of(doc)
    vocab = list(query_tokens(query))
    m = math.ceil(epsilon * len(tokens))
    if m and not vocab:
        raise ValueError("empty query")
    rng = np.random.default_rng(seed)
    candidates = [_replace_positions(tokens, m, vocab, rng) for _ in range(num_candidates)]
    scores = scorer.score_batch(query, [tokens] + [c for c, _ in candidates])
    base = scores[0]
    gains = [s - base for s in scores[1:]]
    best = int(np.argmax(gains))
    return AdversarialDoc(_doc_id(doc), epsilon, num_candidates, candidates[best][0], gains[best],
                          candidates[best][1], tuple(gains), seed)


def term_spam(doc, query, num_positions: int, seed: int = 0) -> CounterfactualDoc:
    """Overwrite ``num_positions`` random positions with random query terms."""
    tokens = _tokens_of(doc)
    vocab = list(query_tokens(query))
    if not vocab:
        raise ValueError("empty query")
    if not 0 <= num_positions <= len(tokens):
        raise ValueError("num_positions must be in [0, document length]")
    rng = np.random.default_rng(seed)
    out, positions = _replace_positions(tokens, num_positions, vocab, rng)
    return CounterfactualDoc(_doc_id(doc), "ts", out, None, seed,
                             ({"op": "term_spam", "positions": list(positions)},))
