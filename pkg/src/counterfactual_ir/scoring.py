"""Relevance scorers: BM25, embedding similarity and a remote HTTP scorer.

Every scorer exposes ``score(query, tokens)`` and ``score_batch(query, texts)``
where ``query`` is a :class:`~counterfactual_ir.corpus.Query` or a token
sequence and texts are token sequences. The empty text scores 0.
"""

from __future__ import annotations

import math
import struct
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import Query

EMBEDDING_MAGIC = b"CFRKEMB1"


def query_tokens(query) -> tuple[str, ...]:
    if isinstance(query, Query):
        return query.tokens
    if isinstance(query, str):
        raise TypeError("pass a Query or a token sequence, not a raw string")
    return tuple(query)


class Scorer:
    """Base class; subclasses implement ``score_batch``."""

    kind = "abstract"

    def score(self, query, tokens: Sequence[str]) -> float:
        return self.score_batch(query, [tokens])[0]

    def score_batch(self, query, texts: Sequence[Sequence[str]]) -> list[float]:
        raise NotImplementedError


class AffineScorer(Scorer):
    """``a * base + b``; used to probe invariance of argmax-style outputs."""

    kind = "affine"

    def __init__(self, base: Scorer, scale: float, shift: float = 0.0):
        self.base, self.scale, self.shift = base, scale, shift

    def score_batch(self, query, texts):
        return [self.scale * s + self.shift for s in self.base.score_batch(query, texts)]


# -- BM25 ---------------------------------------------------------------------


@dataclass(frozen=True)
class Bm25Index:
    df: Mapping[str, int]
    doc_lengths: Mapping[str, int]
    avgdl: float
    num_docs: int
    k1: float = 0.9
    b: float = 0.4

    @classmethod
    def build(cls, documents: Iterable, k1: float = 0.9, b: float = 0.4) -> "Bm25Index":
        """Build from ``Document`` objects or ``(id, tokens)`` pairs."""
        df: Counter = Counter()
        lengths = {}
        for d in documents:
            doc_id, tokens = (d.id, d.tokens) if hasattr(d, "tokens") else d
            lengths[doc_id] = len(tokens)
            df.update(set(tokens))
        if not lengths:
            raise ValueError("cannot build BM25 index from an empty corpus")
        avgdl = sum(lengths.values()) / len(lengths)
        if avgdl <= 0:
            raise ValueError("average document length must be positive")
        return cls(df=dict(df), doc_lengths=lengths, avgdl=avgdl, num_docs=len(lengths), k1=k1, b=b)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))


class Bm25Scorer(Scorer):
    kind = "bm25"

    def __init__(self, index: Bm25Index):
        self.index = index
        self._idf_cache: dict[str, float] = {}

    def _idf(self, term):
        v = self._idf_cache.get(term)
        if v is None:
            v = self._idf_cache[term] = self.index.idf(term)
        return v

    def score_tf(self, qtokens: Sequence[str], tf: Mapping[str, int], length: int) -> float:
        """BM25 from precomputed term frequencies and length."""
        if length == 0:
            return 0.0
        k1, b = self.index.k1, self.index.b
        norm = k1 * (1.0 - b + b * length / self.index.avgdl)
        total = 0.0
        for term in qtokens:
            f = tf.get(term, 0)
            if f:
                total += self._idf(term) * f * (k1 + 1.0) / (f + norm)
        return total

    def score_batch(self, query, texts):
        q = query_tokens(query)
        qset = set(q)
        out = []
        for tokens in texts:
            tf = Counter(t for t in tokens if t in qset)
            out.append(self.score_tf(q, tf, len(tokens)))
        return out

    def coalition_scores(self, query, passages: Sequence[Sequence[str]], masks) -> np.ndarray:
        """Scores of the concatenations selected by each bitmask over disjoint ``passages``.

        Term frequencies and lengths of a concatenation are sums over its
        passages, so every coalition is scored without materializing text.
        """
        q = query_tokens(query)
        terms = list(dict.fromkeys(q))
        weight = np.array([q.count(t) * self._idf(t) for t in terms])
        tf = np.array([[Counter(p)[t] for t in terms] for p in passages], dtype=np.float64).reshape(len(passages), len(terms))
        lens = np.array([len(p) for p in passages], dtype=np.float64)
        masks = np.asarray(masks, dtype=np.int64)
        bits = ((masks[:, None] >> np.arange(len(passages))) & 1).astype(np.float64)
        ctf = bits @ tf
        clen = bits @ lens
        k1, b = self.index.k1, self.index.b
        norm = k1 * (1.0 - b + b * clen / self.index.avgdl)
        sat = ctf * (k1 + 1.0) / (ctf + norm[:, None])
        out = sat @ weight
        out[clen == 0] = 0.0
        return out


# -- embeddings ---------------------------------------------------------------


@dataclass
class EmbeddingStore:
    dimension: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    similarity: str = "cosine"

    def __post_init__(self):
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        for key, vec in self.vectors.items():
            self.vectors[key] = self._check(key, vec)

    def _check(self, key, vec):
        arr = np.asarray(vec, dtype=np.float32)
        if arr.shape != (self.dimension,):
            raise ValueError(f"dimension mismatch for {key!r}: {arr.shape} vs ({self.dimension},)")
        return arr

    def add(self, key: str, vec) -> None:
        self.vectors[key] = self._check(key, vec)

    def get(self, key: str) -> np.ndarray:
        try:
            return self.vectors[key]
        except KeyError:
            raise KeyError(f"missing embedding: {key!r}") from None

    def __contains__(self, key):
        return key in self.vectors

    def __len__(self):
        return len(self.vectors)


def write_embeddings(path, store: EmbeddingStore) -> None:
    """Binary layout: magic, u32 dim, u64 count, then (u16 id len, id, dim x f32) per record."""
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IQ", store.dimension, len(store.vectors)))
        for key, vec in store.vectors.items():
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"id too long: {key[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def read_embeddings(path, similarity: str = "cosine") -> EmbeddingStore:
    data = Path(path).read_bytes()
    if data[:8] != EMBEDDING_MAGIC:
        raise ValueError("bad magic: not an embedding file")
    if len(data) < 20:
        raise ValueError("truncated header")
    dim, count = struct.unpack_from("<IQ", data, 8)
    if dim == 0:
        raise ValueError("dimension must be positive")
    pos = 20
    vectors = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise ValueError("truncated record")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        key = data[pos:pos + n].decode("utf-8")
        pos += n
        end = pos + 4 * dim
        if end > len(data):
            raise ValueError(f"dimension mismatch: record {key!r} shorter than {dim} floats")
        vectors[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos = end
    if pos != len(data):
        raise ValueError("dimension mismatch: trailing bytes after last record")
    return EmbeddingStore(dimension=dim, vectors=vectors, similarity=similarity)


def text_key(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class StoreEncoder:
    """Resolves a text to a precomputed vector by key (default: the normalized text)."""

    def __init__(self, store: EmbeddingStore, key: Callable[[Sequence[str]], str] = text_key):
        self.store = store
        self.key = key
        self.dimension = store.dimension

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return self.store.get(self.key(tokens))

    def encode_batch(self, texts):
        return [self.encode(t) for t in texts]


def embed_text(encoder, tokens: Sequence[str]) -> np.ndarray:
    vec = np.asarray(encoder.encode(tokens))
    dim = getattr(encoder, "dimension", None)
    if dim is not None and vec.shape != (dim,):
        raise ValueError(f"dimension mismatch: got {vec.shape}, expected ({dim},)")
    return vec


def similarity(a: np.ndarray, b: np.ndarray, kind: str = "cosine") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kind == "dot":
        return float(a @ b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


class EmbeddingScorer(Scorer):
    """``f(q, d) = sim(e_q, e_d)`` for any encoder with ``encode(tokens)``."""

    kind = "embedding"

    def __init__(self, encoder, similarity: str = "cosine"):
        if similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {similarity!r}")
        self.encoder = encoder
        self.similarity = similarity

    def score_batch(self, query, texts):
        q = embed_text(self.encoder, query_tokens(query))
        out = []
        for tokens in texts:
            if len(tokens) == 0:
                out.append(0.0)
                continue
            out.append(similarity(q, embed_text(self.encoder, tokens), self.similarity))
        return out


# -- remote -------------------------------------------------------------------


class RemoteScorerError(RuntimeError):
    """Remote call failed. ``status`` is the HTTP status or None for transport errors."""

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status

    @property
    def retryable(self) -> bool:
        return self.status is None or self.status == 429 or self.status >= 500


class _RemoteBase:
    def __init__(self, base_url: str, timeout: float = 30.0, max_in_flight: int = 8,
                 batch_size: int = 64, max_retries: int = 2, backoff: float = 0.1, client=None):
        import httpx

        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self.batch_size = batch_size
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(
            timeout=timeout, limits=httpx.Limits(max_connections=max_in_flight)
        )
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def close(self):
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        attempt = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(self.base_url + path, json=payload, timeout=self.timeout)
                if resp.status_code != 200:
                    raise RemoteScorerError(f"POST {path} returned HTTP {resp.status_code}", resp.status_code)
                try:
                    return resp.json()
                except ValueError:
                    raise RemoteScorerError(f"POST {path} returned malformed JSON", resp.status_code) from None
            except httpx.HTTPError as exc:
                err = RemoteScorerError(f"POST {path} failed: {exc}", None)
            except RemoteScorerError as exc:
                err = exc
            if not err.retryable or attempt >= self.max_retries:
                raise err
            attempt += 1
            time.sleep(self.backoff * 2 ** (attempt - 1))

    def _chunks(self, items):
        return [items[i:i + self.batch_size] for i in range(0, len(items), self.batch_size)]

    def _map_chunks(self, fn, chunks):
        if len(chunks) <= 1:
            return [fn(c) for c in chunks]
        with ThreadPoolExecutor(max_workers=min(self.max_in_flight, len(chunks))) as pool:
            return list(pool.map(fn, chunks))


class RemoteScorer(_RemoteBase, Scorer):
    """Client for ``POST /score`` with body ``{"query", "texts"}`` -> ``{"scores"}``.

    Texts are sent in batches of ``batch_size``; at most ``max_in_flight``
    requests run at once. Empty texts are scored 0 locally.
    """

    kind = "remote"

    def score_batch(self, query, texts):
        qtext = " ".join(query_tokens(query))
        out = [0.0] * len(texts)
        pending = [(i, " ".join(t)) for i, t in enumerate(texts) if len(t)]

        def call(chunk):
            body = self._post("/score", {"query": qtext, "texts": [t for _, t in chunk]})
            scores = body.get("scores") if isinstance(body, dict) else None
            if not isinstance(scores, list) or len(scores) != len(chunk):
                raise RemoteScorerError("response 'scores' length does not match request", 200)
            vals = [float(s) for s in scores]
            if not all(math.isfinite(v) for v in vals):
                raise RemoteScorerError("non-finite score in response", 200)
            return vals

        chunks = self._chunks(pending)
        for chunk, vals in zip(chunks, self._map_chunks(call, chunks)):
            for (i, _), v in zip(chunk, vals):
                out[i] = v
        return out


class RemoteEncoder(_RemoteBase):
    """Client for ``POST /embed`` with ``{"texts"}`` -> ``{"embeddings"}``."""

    def __init__(self, base_url: str, dimension: int, **kwargs):
        super().__init__(base_url, **kwargs)
        self.dimension = dimension

    def encode_batch(self, texts):
        def call(chunk):
            body = self._post("/embed", {"texts": [" ".join(t) for t in chunk]})
            embs = body.get("embeddings") if isinstance(body, dict) else None
            if not isinstance(embs, list) or len(embs) != len(chunk):
                raise RemoteScorerError("response 'embeddings' length does not match request", 200)
            out = []
            for e in embs:
                vec = np.asarray(e, dtype=np.float32)
                if vec.shape != (self.dimension,):
                    raise ValueError(f"dimension mismatch: got {vec.shape}, expected ({self.dimension},)")
                out.append(vec)
            return out

        results = []
        for part in self._map_chunks(call, self._chunks(list(texts))):
            results.extend(part)
        return results

    def encode(self, tokens):
        return self.encode_batch([tokens])[0]


# -- ranking ------------------------------------------------------------------


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple[tuple[str, float], ...]
    _ranks: Mapping[str, int] = field(default_factory=dict, repr=False, compare=False)

    def rank(self, doc_id: str) -> int:
        """1-based rank."""
        return self._ranks[doc_id]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]


def order_by_score(scores: Mapping[str, float]) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def rank_corpus(scorer: Scorer, query, candidates: Mapping[str, Sequence[str]], query_id: str = "") -> RankedList:
    """Score every candidate and order by descending score, ties by ascending doc id."""
    if not candidates:
        raise ValueError("no candidates")
    ids = list(candidates)
    scores = scorer.score_batch(query, [candidates[i] for i in ids])
    entries = order_by_score(dict(zip(ids, scores)))
    if not query_id and isinstance(query, Query):
        query_id = query.id
    return RankedList(query_id, tuple(entries), {d: r for r, (d, _) in enumerate(entries, 1)})
