"""Term spamming against a BM25 ranker, and how much MRR@10 it costs.

Run with ``python demos/robustness_attack.py``.
"""

import math

from counterfactual_ir import pipeline
from counterfactual_ir.corpus import Document, Query
from counterfactual_ir.counterfactual import adversarial, term_spam
from counterfactual_ir.evaluation import robustness_report
from counterfactual_ir.scoring import Bm25Index, Bm25Scorer
from counterfactual_ir.synthetic import planted_corpus

# One document, one query: overwrite a few random positions with query terms.
doc = Document.from_text("d", "the committee met on tuesday to review the annual budget and staffing plan.")
query = Query.from_text("q", "solar panel efficiency")
scorer = Bm25Scorer(Bm25Index.build([doc, Document.from_text("o", "solar panel output falls in winter.")]))
spam = term_spam(doc, query, num_positions=2, seed=0)
print("before:", round(scorer.score(query, doc.tokens), 3), "|", doc.normalized_text)
print("after: ", round(scorer.score(query, spam.tokens), 3), "|", spam.text)

# Corpus level: spam one non-relevant document per query at increasing ratios.
pc = planted_corpus(num_docs=100, seed=5)
prepared = pipeline.prepare(pc.documents, pc.queries, pc.triples, 16, 0.5)
bm25 = Bm25Scorer(Bm25Index.build(pc.documents.values()))
# The adversarial variant keeps the best of K random replacements, so the gain
# can only grow with K.
t = pc.triples[0]
for k in (1, 4, 16, 64):
    adv = adversarial(pc.documents[t.doc_id], pc.queries[t.query_id], bm25, epsilon=0.02, num_candidates=k, seed=1)
    print(f"best of {k:2d}: score gain {adv.score_gain:.3f}")

print("\nratio  targets  MRR@10d before -> after")
for ratio in (0.01, 0.05, 0.1):
    for targets in (1, 3):
        rep, _ = pipeline.term_spam_attack(prepared, pc.documents, bm25, ratio=ratio, num_targets=targets, seed=0)
        print(f"{ratio:5.2f}  {targets:7d}  {rep.metric_before:.3f} -> {rep.metric_after:.3f} ({rep.rendered})")

# Reports use one decimal, signed.
print("\n0.613 -> 0.584 renders as", robustness_report(0.613, 0.584).rendered)
print("ceil(0.05 * 300) =", math.ceil(0.05 * 300), "positions replaced in a 300-token document")
