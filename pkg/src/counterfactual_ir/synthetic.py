"""Planted-relevance synthetic corpora for tests, demos and smoke runs.

Each document is filler text except for one stride-aligned block that
carries its query's terms. The block is the gold relevant passage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Document, Query, Triple


@dataclass
class PlantedCorpus:
    documents: dict[str, Document]
    queries: dict[str, Query]
    triples: list[Triple]
    planted_spans: dict[str, tuple[int, int]]

    def write(self, directory) -> dict[str, Path]:
        """Write documents/queries JSONL and triples TSV; returns the paths."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"documents": d / "documents.jsonl", "queries": d / "queries.jsonl", "triples": d / "triples.tsv"}
        with open(paths["documents"], "w", encoding="utf-8") as fh:
            for doc in self.documents.values():
                fh.write(json.dumps({"id": doc.id, "text": doc.text}) + "\n")
        with open(paths["queries"], "w", encoding="utf-8") as fh:
            for q in self.queries.values():
                fh.write(json.dumps({"id": q.id, "text": q.text}) + "\n")
        with open(paths["triples"], "w", encoding="utf-8") as fh:
            for t in self.triples:
                fh.write(f"{t.query_id}\t{t.doc_id}\t{t.relevant_passage_text}\n")
        return paths


def _sentences(words: list[str], rng) -> str:
    """Join words into sentences of 4-9 words, each ending with a period."""
    out, i = [], 0
    while i < len(words):
        n = int(rng.integers(4, 10))
        out.append(" ".join(words[i:i + n]) + ".")
        i += n
    return " ".join(out)


def planted_corpus(num_docs: int = 200, window_size: int = 16, min_strides: int = 24, max_strides: int = 60,
                   query_len: int = 3, block_strides: int = 2, filler_vocab: int = 3000,
                   term_vocab: int = 60, term_repeats: int = 2, noise_queries: int = 40,
                   noise_occurrences: int = 2, seed: int = 0) -> PlantedCorpus:
    """Generate ``num_docs`` (query, document, gold passage) triples.

    Documents are ``m * stride`` tokens long (stride = window_size // 2)
    with ``m`` drawn from ``[min_strides, max_strides]``; the defaults give
    about 41 windows per document at ``window_size`` 16. The planted block is
    ``block_strides`` strides long, starts on a stride boundary and holds
    every query term ``term_repeats`` times, once per equal segment of the
    block; no other token of the document is one of its own query terms.

    Distractor noise: with ``noise_queries > 0`` every document's filler also
    carries ``noise_occurrences`` scattered terms of each of that many other
    queries, giving each query term-matching, non-relevant competitors.
    """
    rng = np.random.default_rng(seed)
    stride = window_size // 2
    filler = [f"f{i:04d}" for i in range(filler_vocab)]
    terms = [f"t{i:03d}" for i in range(term_vocab)]
    block_len = block_strides * stride
    if query_len > block_len // term_repeats:
        raise ValueError("planted block too short for the requested term repeats")

    all_qterms = [[terms[j] for j in rng.choice(term_vocab, size=query_len, replace=False)]
                  for _ in range(num_docs)]
    documents, queries, triples, spans = {}, {}, [], {}
    for i in range(num_docs):
        qterms = all_qterms[i]
        m = int(rng.integers(min_strides, max_strides + 1))
        length = m * stride
        start = int(rng.integers(0, m - block_strides + 1)) * stride
        words = [filler[j] for j in rng.integers(filler_vocab, size=length)]
        if noise_queries:
            own = set(qterms)
            others = [j for j in rng.choice(num_docs, size=min(noise_queries + 1, num_docs), replace=False)
                      if j != i][:noise_queries]
            noise = [t for j in others for t in rng.choice(all_qterms[j], size=noise_occurrences) if t not in own]
            outside = [p for p in range(length) if not start <= p < start + block_len]
            noise = noise[:len(outside)]
            for pos, t in zip(rng.choice(outside, size=len(noise), replace=False), noise):
                words[int(pos)] = str(t)
        # occurrence r of every term lands in segment r of the block, so each
        # half of the planted window carries the query
        seg_len = block_len // term_repeats
        for r in range(term_repeats):
            slots = rng.choice(seg_len, size=query_len, replace=False)
            for term, slot in zip(qterms, slots):
                words[start + r * seg_len + int(slot)] = term

        before = _sentences(words[:start], rng)
        block = _sentences(words[start:start + block_len], rng)
        after = _sentences(words[start + block_len:], rng)
        text = " ".join(part for part in (before, block, after) if part)

        doc_id, qid = f"D{i:04d}", f"Q{i:04d}"
        documents[doc_id] = Document.from_text(doc_id, text)
        queries[qid] = Query.from_text(qid, " ".join(qterms))
        triples.append(Triple(qid, doc_id, block))
        spans[doc_id] = (start, start + block_len)
    return PlantedCorpus(documents, queries, triples, spans)
