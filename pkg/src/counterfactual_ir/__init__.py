"""Counterfactual passage attribution and contrastive-loss toolkit for retrieval models."""

from .attribution import (
    AttributionResult,
    CoalitionValue,
    attribute,
    delta_rank,
    delta_rel,
    key_passage,
    resolve_overlap,
    shapley_exact,
    shapley_mc,
)
from .contrastive import (
    LossBundle,
    LossWeights,
    ReferenceEncoder,
    ScoreBundle,
    grad_check,
    loss_adv,
    loss_cla,
    loss_neg,
    loss_pos,
    total_loss,
    weights,
)
from .corpus import Document, Query, SegmentedDocument, Triple, corpus_stats, locate_positive, segment, tokenize
from .counterfactual import adversarial, construct, full_counterfactual, partial_counterfactual, term_spam
from .evaluation import mrr_at_k, ndcg_at_k, passage_extraction_eval, robustness_report
from .scoring import Bm25Index, Bm25Scorer, EmbeddingScorer, EmbeddingStore, RemoteScorer, rank_corpus

__version__ = "0.1.0"
