"""Counterfactual documents as training signal for a contrastive loss.

From one relevant document we build a partial counterfactual (one sentence of
the key passage removed), a full counterfactual (the whole key passage
removed) and an adversarial variant, then score them with a small hashed
bag-of-words encoder and descend the combined loss.

Run with ``python demos/counterfactual_loss.py``.
"""

import numpy as np

from counterfactual_ir import pipeline
from counterfactual_ir.contrastive import (
    LossWeights,
    ReferenceEncoder,
    batch_loss,
    grad_check,
    loss_cla,
    relevance_to_unit,
    weights,
)
from counterfactual_ir.scoring import Bm25Index
from counterfactual_ir.synthetic import planted_corpus

pc = planted_corpus(num_docs=40, min_strides=8, max_strides=16, seed=3)
prepared = pipeline.prepare(pc.documents, pc.queries, pc.triples, 16, 0.5)
encoder = ReferenceEncoder.random(hash_size=256, dim=32, seed=0)

batch = pipeline.contrastive_batch(prepared, pc.documents, encoder, Bm25Index.build(pc.documents.values()),
                                   num_negatives=7, seed=0)
ex = batch[0]
print("positive:", len(ex.positive), "tokens; partial:", len(ex.partial), "; full:", len(ex.full))

# The closed forms are a useful sanity check: with all scores equal, the
# classic loss against 7 negatives is ln 8.
print("loss with 8 equal scores:", round(loss_cla(0.0, [0.0] * 7)[0], 6), "ln 8 =", round(np.log(8), 6))

# Weights from the relevance of the full counterfactual: the more relevant d*
# still is, the more it is pushed up as a pseudo positive.
s_full = encoder.score(ex.query, ex.full)
w = weights("rel", r=relevance_to_unit(s_full))
print(f"cos(q, d*) = {s_full:.3f} -> alpha {w.alpha:.3f}, beta {w.beta:.3f}")

# Analytic gradients against central differences.
print("gradient check, max relative error:", f"{grad_check(encoder, batch[:4], 1e-5):.2e}")


def hierarchy(enc):
    """Fraction of examples ordered f(d+) > f(d') > f(d*)."""
    ok = 0
    for e in batch:
        s = [enc.score(e.query, t) for t in (e.positive, e.partial, e.full)]
        ok += s[0] > s[1] > s[2]
    return ok / len(batch)


# Plain gradient descent on the projection matrix.
fixed = LossWeights(0.5, 0.5)
W = encoder.weights.copy()
print("\nstep   loss    ordered")
for step in range(61):
    enc = ReferenceEncoder(W)
    loss, grad = batch_loss(enc, batch, fixed)
    if step % 15 == 0:
        print(f"{step:4d}  {loss:.4f}  {hierarchy(enc):.2f}")
    W -= 2.0 * grad
