"""Corpus records, tokenization, sliding-window segmentation and positive-passage location."""

from __future__ import annotations

import csv
import json
import math
import unicodedata
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from pathlib import Path
from typing import Iterable, Optional, Sequence

POSITIVE_THRESHOLD = 0.9
SENTENCE_TERMINALS = frozenset(".!?")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize_with_boundaries(text: str) -> tuple[list[str], frozenset[int]]:
    """Lowercase, split on whitespace, strip surrounding punctuation.

    Returns the tokens and the set of token indices that end a sentence
    (the raw token carried a trailing ``.``, ``!`` or ``?``). Tokens made
    only of punctuation are dropped; a terminal among them marks the
    preceding token as a sentence end.
    """
    tokens: list[str] = []
    ends: set[int] = set()
    for raw in text.split():
        lo, hi = 0, len(raw)
        while lo < hi and _is_punct(raw[lo]):
            lo += 1
        while hi > lo and _is_punct(raw[hi - 1]):
            hi -= 1
        trailing = raw[hi:] if hi > lo else raw
        core = raw[lo:hi].lower()
        if core:
            tokens.append(core)
        if tokens and any(ch in SENTENCE_TERMINALS for ch in trailing):
            ends.add(len(tokens) - 1)
    return tokens, frozenset(ends)


def tokenize(text: str) -> list[str]:
    return tokenize_with_boundaries(text)[0]


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    tokens: tuple[str, ...]
    sentence_ends: frozenset[int] = frozenset()

    @classmethod
    def from_text(cls, id: str, text: str) -> "Document":
        if not id:
            raise ValueError("document id must be nonempty")
        tokens, ends = tokenize_with_boundaries(text)
        return cls(id=id, text=text, tokens=tuple(tokens), sentence_ends=ends)

    @property
    def normalized_text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    tokens: tuple[str, ...]

    @classmethod
    def from_text(cls, id: str, text: str) -> "Query":
        if not id:
            raise ValueError("query id must be nonempty")
        return cls(id=id, text=text, tokens=tuple(tokenize(text)))


@dataclass(frozen=True)
class Triple:
    query_id: str
    doc_id: str
    relevant_passage_text: str


@dataclass(frozen=True)
class Passage:
    index: int
    token_start: int
    token_end: int
    text: str

    @property
    def span(self) -> tuple[int, int]:
        return (self.token_start, self.token_end)

    def __len__(self) -> int:
        return self.token_end - self.token_start


@dataclass(frozen=True)
class SegmentedDocument:
    doc_id: str
    window_size: int
    overlap_ratio: float
    passages: tuple[Passage, ...]
    tokens: tuple[str, ...] = ()
    positive_index: Optional[int] = None
    positive_coverage: float = 0.0
    gold_span: Optional[tuple[int, int]] = None
    sentence_ends: frozenset[int] = field(default=frozenset(), repr=False)

    @property
    def stride(self) -> int:
        return _stride(self.window_size, self.overlap_ratio)

    def passage_tokens(self, index: int) -> tuple[str, ...]:
        p = self.passages[index]
        return self.tokens[p.token_start:p.token_end]

    def with_positive(self, gold_tokens: Sequence[str]) -> "SegmentedDocument":
        """Return a copy annotated with the located positive passage."""
        index, coverage, span = locate_positive(self, gold_tokens, return_span=True)
        return SegmentedDocument(
            doc_id=self.doc_id,
            window_size=self.window_size,
            overlap_ratio=self.overlap_ratio,
            passages=self.passages,
            tokens=self.tokens,
            positive_index=index if coverage >= POSITIVE_THRESHOLD else None,
            positive_coverage=coverage,
            gold_span=span,
            sentence_ends=self.sentence_ends,
        )

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "window_size": self.window_size,
            "overlap_ratio": self.overlap_ratio,
            "passages": [[p.token_start, p.token_end] for p in self.passages],
            "tokens": list(self.tokens),
            "sentence_ends": sorted(self.sentence_ends),
            "positive_index": self.positive_index,
            "positive_coverage": self.positive_coverage,
            "gold_span": list(self.gold_span) if self.gold_span is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SegmentedDocument":
        tokens = tuple(obj["tokens"])
        passages = tuple(
            Passage(i, s, e, " ".join(tokens[s:e])) for i, (s, e) in enumerate(obj["passages"])
        )
        gold = obj.get("gold_span")
        return cls(
            doc_id=obj["doc_id"],
            window_size=int(obj["window_size"]),
            overlap_ratio=float(obj["overlap_ratio"]),
            passages=passages,
            tokens=tokens,
            positive_index=obj.get("positive_index"),
            positive_coverage=float(obj.get("positive_coverage", 0.0)),
            gold_span=tuple(gold) if gold is not None else None,
            sentence_ends=frozenset(obj.get("sentence_ends", ())),
        )


@dataclass(frozen=True)
class CorpusStats:
    positive_psg_ratio: float
    average_psg_num: float

    def to_json(self) -> dict:
        return {"positive_psg_ratio": self.positive_psg_ratio, "average_psg_num": self.average_psg_num}


def _stride(window_size: int, overlap_ratio: float) -> int:
    raw = window_size * (1.0 - overlap_ratio)
    stride = round(raw)
    if stride < 1 or not math.isclose(raw, stride, abs_tol=1e-9):
        raise ValueError("invalid stride")
    return stride


def segment(doc: Document, window_size: int = 128, overlap_ratio: float = 0.5) -> SegmentedDocument:
    """Split a document into fixed-size overlapping windows.

    Windows start at multiples of the stride; the last one is truncated at
    the document end. A start offset yields a passage only if the window
    reaches past everything emitted so far.
    """
    if window_size < 2:
        raise ValueError("window_size must be >= 2")
    if not 0.0 <= overlap_ratio < 1.0:
        raise ValueError("overlap_ratio must be in [0, 1)")
    stride = _stride(window_size, overlap_ratio)
    n = len(doc.tokens)
    if n == 0:
        raise ValueError("empty document")

    passages = []
    covered = 0
    start = 0
    while covered < n:
        end = min(start + window_size, n)
        if end > covered:
            passages.append(Passage(len(passages), start, end, " ".join(doc.tokens[start:end])))
            covered = end
        start += stride
    return SegmentedDocument(
        doc_id=doc.id,
        window_size=window_size,
        overlap_ratio=overlap_ratio,
        passages=tuple(passages),
        tokens=doc.tokens,
        sentence_ends=doc.sentence_ends,
    )


def find_gold_span(doc_tokens: Sequence[str], gold_tokens: Sequence[str]) -> tuple[int, int]:
    """Token span of the longest contiguous match of ``gold_tokens`` in the document."""
    if not gold_tokens:
        raise ValueError("gold passage is empty")
    matcher = SequenceMatcher(None, list(doc_tokens), list(gold_tokens), autojunk=False)
    m = matcher.find_longest_match(0, len(doc_tokens), 0, len(gold_tokens))
    if m.size == 0:
        raise ValueError("gold span missing")
    return (m.a, m.a + m.size)


def locate_positive(seg: SegmentedDocument, gold_tokens: Sequence[str], return_span: bool = False):
    """Passage index covering the largest share of the gold passage.

    Coverage is measured in tokens: covered gold tokens over gold length,
    where gold tokens that could not be matched count as uncovered. Ties go
    to the lowest index. Callers flag coverage below ``POSITIVE_THRESHOLD``.
    """
    start, end = find_gold_span(seg.tokens, gold_tokens)
    gold_len = len(gold_tokens)
    best, best_cov = 0, -1.0
    for p in seg.passages:
        overlap = max(0, min(end, p.token_end) - max(start, p.token_start))
        cov = overlap / gold_len
        if cov > best_cov:
            best, best_cov = p.index, cov
    if return_span:
        return best, best_cov, (start, end)
    return best, best_cov


def corpus_stats(segmented: Iterable[SegmentedDocument]) -> CorpusStats:
    docs = list(segmented)
    if not docs:
        raise ValueError("empty collection")
    covered = sum(1 for d in docs if d.positive_coverage >= POSITIVE_THRESHOLD)
    return CorpusStats(
        positive_psg_ratio=covered / len(docs),
        average_psg_num=sum(len(d.passages) for d in docs) / len(docs),
    )


# -- file formats -------------------------------------------------------------


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def _unique(records, kind):
    out = {}
    for r in records:
        if r.id in out:
            raise ValueError(f"duplicate {kind} id {r.id!r}")
        out[r.id] = r
    return out


def load_documents(path) -> dict[str, Document]:
    return _unique((Document.from_text(str(o["id"]), o["text"]) for o in _read_jsonl(path)), "document")


def load_queries(path) -> dict[str, Query]:
    return _unique((Query.from_text(str(o["id"]), o["text"]) for o in _read_jsonl(path)), "query")


def load_triples(path, documents=None, queries=None) -> list[Triple]:
    triples = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(row)}")
            t = Triple(*row)
            if documents is not None and t.doc_id not in documents:
                raise ValueError(f"{path}:{lineno}: unknown doc id {t.doc_id!r}")
            if queries is not None and t.query_id not in queries:
                raise ValueError(f"{path}:{lineno}: unknown query id {t.query_id!r}")
            triples.append(t)
    return triples


def write_jsonl(path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    return list(_read_jsonl(path))
