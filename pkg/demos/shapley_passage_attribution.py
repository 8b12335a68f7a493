"""Which passage makes a document relevant? A walk through passage attribution.

Run with ``python demos/shapley_passage_attribution.py``. Takes about 20 seconds.
"""

import numpy as np

from counterfactual_ir import pipeline
from counterfactual_ir.attribution import attribute, shapley_exact, shapley_mc
from counterfactual_ir.corpus import segment, tokenize
from counterfactual_ir.scoring import Bm25Index, Bm25Scorer
from counterfactual_ir.synthetic import planted_corpus

np.set_printoptions(precision=3, suppress=True)

# A synthetic collection: every document hides one block of query terms among
# filler words, plus scattered terms belonging to other queries as noise.
pc = planted_corpus(num_docs=60, seed=0)
scorer = Bm25Scorer(Bm25Index.build(pc.documents.values()))

triple = pc.triples[0]
doc, query = pc.documents[triple.doc_id], pc.queries[triple.query_id]
print("query:", " ".join(query.tokens))
print("document length:", len(doc.tokens), "tokens")

# Windows of 16 tokens, half overlapping. The gold text tells us which window is
# the positive one; attribution methods never see it.
seg = segment(doc, window_size=16, overlap_ratio=0.5).with_positive(tokenize(triple.relevant_passage_text))
print("passages:", len(seg.passages), " positive index:", seg.positive_index,
      f"(coverage {seg.positive_coverage:.2f})")

# Shapley values need disjoint players, so even and odd windows form two groups.
# Take the first eight even windows and compare the exact value with sampling.
group = [seg.passage_tokens(i) for i in range(0, 16, 2)]
exact, evals = shapley_exact(query, group, scorer)
print("\nexact shapley over 8 even windows:", exact, f"({evals} coalitions)")
for perms in (50, 500, 5000):
    est, _ = shapley_mc(query, group, scorer, num_permutations=perms, seed=1)
    print(f"  {perms:5d} permutations: max |error| {np.abs(est - exact).max():.4f}")

# Efficiency: the values split the full score exactly.
full = [t for g in group for t in g]
print("sum of values", round(exact.sum(), 6), "== score of the union", round(scorer.score(query, full), 6))

# Whole-document attribution with each method.
pool = pipeline.bm25_pools([pipeline.Prepared(0, triple, query, doc, seg)], pc.documents, scorer.index)
pool = next(iter(pool.values()))
print("\nkey passage per method (positive is", seg.positive_index, "):")
for method, resolution in [("shapley", "merge"), ("shapley", "non_overlap"), ("delta_rel", "none"),
                           ("delta_rank", "none")]:
    res = attribute(query, seg, scorer, method, resolution, seed=42, candidate_pool=pool)
    print(f"  {method:10s} {resolution:12s} -> {res.key_index}")

# Corpus level: mean reciprocal rank of the positive passage.
prepared = pipeline.prepare(pc.documents, pc.queries, pc.triples, 16, 0.5)
pools = pipeline.bm25_pools(prepared, pc.documents, scorer.index)
print("\nMRR@10 of the positive passage over", len(prepared), "documents:")
for method, resolution in [("shapley", "merge"), ("shapley", "non_overlap"), ("delta_rel", "none"),
                           ("delta_rank", "none")]:
    records, _ = pipeline.attribute_all(prepared, scorer, method, resolution, seed=42, pools=pools)
    print(f"  {method:10s} {resolution:12s} {pipeline.passage_mrr(prepared, records).mrr:.3f}")
