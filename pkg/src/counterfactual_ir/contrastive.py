"""Counterfactual contrastive loss terms, weighting strategies and a reference encoder.

All terms are negative log-softmax values over raw scores, evaluated with
max-subtraction. Gradients are returned with respect to the scores; the
:class:`ReferenceEncoder` chains them down to its projection matrix.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

SCORE_FIELDS = ("s_pos", "s_partial", "s_full", "s_adv", "s_negs")


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(np.asarray(v, dtype=np.float64))):
            raise ValueError("non-finite score")


def nll_first(scores) -> tuple[float, np.ndarray]:
    """``-log softmax(scores)[0]`` and its gradient ``softmax - onehot(0)``."""
    s = np.asarray(scores, dtype=np.float64)
    _check_finite(s)
    shifted = s - s.max()
    expd = np.exp(shifted)
    total = expd.sum()
    value = math.log(total) - shifted[0]
    grad = expd / total
    grad[0] -= 1.0
    return float(value), grad


def loss_cla(s_pos: float, s_negs: Sequence[float]):
    """Classic contrastive loss of the positive against N negatives."""
    negs = np.atleast_1d(np.asarray(s_negs, dtype=np.float64))
    if negs.size < 1:
        raise ValueError("need at least one negative")
    value, g = nll_first(np.concatenate([[s_pos], negs]))
    return value, {"s_pos": g[0], "s_negs": g[1:]}


def _pairwise_chain(hi: float, mid: float, lo: float):
    """``-log σ(hi - mid) - log σ(mid - lo)`` with grads for (hi, mid, lo)."""
    v1, g1 = nll_first([hi, mid])
    v2, g2 = nll_first([mid, lo])
    return v1 + v2, (g1[0], g1[1] + g2[0], g2[1])


def loss_neg(s_pos: float, s_partial: float, s_full: float):
    """Counterfactuals as hard negatives: ``d+`` above ``d'`` above ``d*``."""
    value, (gp, gm, gf) = _pairwise_chain(s_pos, s_partial, s_full)
    return value, {"s_pos": gp, "s_partial": gm, "s_full": gf}


def loss_pos(s_full: float, s_negs: Sequence[float]):
    """Counterfactuals as pseudo positives: ``d*`` against the negatives."""
    negs = np.atleast_1d(np.asarray(s_negs, dtype=np.float64))
    if negs.size < 1:
        raise ValueError("need at least one negative")
    value, g = nll_first(np.concatenate([[s_full], negs]))
    return value, {"s_full": g[0], "s_negs": g[1:]}


def loss_adv(s_pos: float, s_adv: float, s_full: float):
    """Adversarial counterfactuals: ``d+`` above ``d_adv`` above ``d*``."""
    value, (gp, ga, gf) = _pairwise_chain(s_pos, s_adv, s_full)
    return value, {"s_pos": gp, "s_adv": ga, "s_full": gf}


@dataclass(frozen=True)
class ScoreBundle:
    s_pos: float
    s_partial: float
    s_full: float
    s_adv: float
    s_negs: tuple[float, ...]

    def __post_init__(self):
        if len(self.s_negs) < 1:
            raise ValueError("need at least one negative score")
        _check_finite(self.s_pos, self.s_partial, self.s_full, self.s_adv, self.s_negs)


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float
    strategy: str = "plugin"


@dataclass
class LossBundle:
    l_cla: float
    l_neg: float
    l_pos: float
    l_adv: float
    total: float
    alpha: float
    beta: float
    grads: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"l_cla": self.l_cla, "l_neg": self.l_neg, "l_pos": self.l_pos, "l_adv": self.l_adv,
                "alpha": self.alpha, "beta": self.beta, "total": self.total}


def _clamp_unit(x: float, name: str) -> float:
    if not math.isfinite(x):
        raise ValueError(f"{name} is not finite")
    if x < 0.0 or x > 1.0:
        warnings.warn(f"{name}={x:.6g} outside [0, 1]; clamping", RuntimeWarning, stacklevel=3)
        return min(1.0, max(0.0, x))
    return x


def relevance_to_unit(score: float, similarity: str = "cosine") -> float:
    """Map a raw ``f(q, d*)`` onto [0, 1]: cosine via ``(x + 1) / 2``; ``unit`` passes through."""
    if similarity == "cosine":
        return (score + 1.0) / 2.0
    if similarity == "unit":
        return score
    raise ValueError(f"no [0, 1] mapping for similarity {similarity!r}")


def normalized_shapley(values: Sequence[Optional[float]], key_index: int) -> float:
    """Share of the positive Shapley mass held by the key passage; 0.5 if no value is positive."""
    pos = [max(v, 0.0) for v in values if v is not None]
    denom = sum(pos)
    if denom <= 0.0:
        return 0.5
    return max(values[key_index], 0.0) / denom


def weights(strategy: str, r: Optional[float] = None, s: Optional[float] = None,
            alpha: Optional[float] = None, beta: Optional[float] = None,
            plugin: Optional[Callable[..., tuple[float, float]]] = None, **context) -> LossWeights:
    """Loss weights for one training example.

    ``rel``: ``(1 - r, r)`` with ``r`` the full-counterfactual relevance on
    [0, 1]. ``shapley``: ``(1 - s, s)`` with ``s`` the normalized Shapley
    value of the key passage. ``plugin``: ``alpha``/``beta`` given directly
    or returned by ``plugin(**context)``.
    """
    if strategy == "rel":
        if r is None:
            raise ValueError("rel strategy needs r")
        r = _clamp_unit(float(r), "r")
        return LossWeights(1.0 - r, r, "rel")
    if strategy == "shapley":
        if s is None:
            raise ValueError("shapley strategy needs s")
        s = _clamp_unit(float(s), "s")
        return LossWeights(1.0 - s, s, "shapley")
    if strategy == "plugin":
        if plugin is not None:
            alpha, beta = plugin(**context)
        if alpha is None or beta is None:
            raise ValueError("plugin strategy needs alpha and beta or a plugin callable")
        return LossWeights(float(alpha), float(beta), "plugin")
    raise ValueError(f"unknown weight strategy {strategy!r}")


def total_loss(bundle: ScoreBundle, w: LossWeights) -> LossBundle:
    """``L_cla + alpha * (L_neg + L_adv) + beta * L_pos`` with gradients w.r.t. every score."""
    l_cla, g_cla = loss_cla(bundle.s_pos, bundle.s_negs)
    l_neg, g_neg = loss_neg(bundle.s_pos, bundle.s_partial, bundle.s_full)
    l_pos, g_pos = loss_pos(bundle.s_full, bundle.s_negs)
    l_adv, g_adv = loss_adv(bundle.s_pos, bundle.s_adv, bundle.s_full)

    grads = {k: 0.0 for k in SCORE_FIELDS[:-1]}
    grads["s_negs"] = np.zeros(len(bundle.s_negs))
    for g, coef in ((g_cla, 1.0), (g_neg, w.alpha), (g_pos, w.beta), (g_adv, w.alpha)):
        for k, v in g.items():
            grads[k] = grads[k] + coef * v
    total = l_cla + w.alpha * (l_neg + l_adv) + w.beta * l_pos
    return LossBundle(l_cla, l_neg, l_pos, l_adv, total, w.alpha, w.beta, grads)


# -- reference encoder ----------------------------------------------------------


def _bucket(token: str, hash_size: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % hash_size


@dataclass(frozen=True)
class ContrastiveExample:
    query: tuple[str, ...]
    positive: tuple[str, ...]
    partial: tuple[str, ...]
    full: tuple[str, ...]
    adversarial: tuple[str, ...]
    negatives: tuple[tuple[str, ...], ...]


class ReferenceEncoder:
    """Hashed bag-of-tokens, L2-normalized, projected by ``W`` (H x k); cosine similarity.

    With ``x`` the normalized hashed counts, ``e = W.T @ x``. For
    ``c = cos(a, b)``: ``dc/da = b / (|a||b|) - c * a / |a|**2``, and
    ``dc/dW = outer(x_q, dc/da) + outer(x_d, dc/db)``. A zero encoding scores
    0 with zero gradient.
    """

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-D array")

    @classmethod
    def random(cls, hash_size: int = 128, dim: int = 16, seed: int = 0, scale: float = 0.1) -> "ReferenceEncoder":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(hash_size, dim)))

    @property
    def hash_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.weights.shape[1]

    def features(self, tokens: Sequence[str]) -> np.ndarray:
        x = np.zeros(self.hash_size)
        for t in tokens:
            x[_bucket(t, self.hash_size)] += 1.0
        norm = np.linalg.norm(x)
        return x / norm if norm > 0 else x

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return self.features(tokens) @ self.weights

    def score(self, q_tokens, d_tokens, W=None) -> float:
        return self.score_and_grad(q_tokens, d_tokens, W, need_grad=False)[0]

    def score_and_grad(self, q_tokens, d_tokens, W=None, need_grad: bool = True):
        W = self.weights if W is None else W
        xq, xd = self.features(q_tokens), self.features(d_tokens)
        a, b = xq @ W, xd @ W
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 0.0, (np.zeros_like(W) if need_grad else None)
        c = float(a @ b / (na * nb))
        if not need_grad:
            return c, None
        da = b / (na * nb) - c * a / na**2
        db = a / (na * nb) - c * b / nb**2
        return c, np.outer(xq, da) + np.outer(xd, db)

    def tokens_buckets(self, tokens) -> set[int]:
        return {_bucket(t, self.hash_size) for t in tokens}


def _example_texts(ex: ContrastiveExample):
    return [ex.positive, ex.partial, ex.full, ex.adversarial, *ex.negatives]


def example_loss(encoder: ReferenceEncoder, ex: ContrastiveExample, w: Union[LossWeights, Callable],
                 W=None, need_grad: bool = True):
    """Total loss of one example through the encoder, and ``dL/dW``.

    ``w`` may be a callable receiving the :class:`ScoreBundle`; the weights
    it returns are treated as constants when differentiating.
    """
    results = [encoder.score_and_grad(ex.query, t, W, need_grad) for t in _example_texts(ex)]
    scores = [r[0] for r in results]
    bundle = ScoreBundle(scores[0], scores[1], scores[2], scores[3], tuple(scores[4:]))
    lw = w(bundle) if callable(w) else w
    loss = total_loss(bundle, lw)
    if not need_grad:
        return loss, None
    g = loss.grads
    coefs = [g["s_pos"], g["s_partial"], g["s_full"], g["s_adv"], *g["s_negs"]]
    dW = sum(coef * r[1] for coef, r in zip(coefs, results))
    return loss, dW


def batch_loss(encoder, batch, w, W=None, need_grad: bool = True):
    """Mean total loss over a batch and its gradient w.r.t. the projection matrix."""
    total, grad = 0.0, None
    for ex in batch:
        loss, dW = example_loss(encoder, ex, w, W, need_grad)
        total += loss.total
        if need_grad:
            grad = dW if grad is None else grad + dW
    n = len(batch)
    return total / n, (grad / n if need_grad else None)


def grad_check(encoder: ReferenceEncoder, batch: Sequence[ContrastiveExample], epsilon_fd: float = 1e-5,
               w=None, num_coords: int = 64, seed: int = 0,
               floor: float = 1e-8) -> float:
    """Max relative error between analytic ``dL/dW`` and central differences.

    Coordinates are sampled from the rows of ``W`` that the batch's tokens
    hash to (all other rows have an exactly zero gradient). Relative error
    is ``|a - n| / max(|a|, |n|, floor)``. ``w`` is one weighting for the
    whole batch or a list with one entry per example.
    """
    if not 1e-7 <= epsilon_fd <= 1e-3:
        raise ValueError("epsilon_fd must be in [1e-7, 1e-3]")
    if w is None:
        w = LossWeights(0.5, 0.5, "plugin")
    per_example = list(w) if isinstance(w, (list, tuple)) else [w] * len(batch)
    if len(per_example) != len(batch):
        raise ValueError("need one weight entry per example")
    # freeze weights at the base point so the finite differences see the same objective
    frozen = [x(_bundle_of(encoder, ex)) if callable(x) else x for x, ex in zip(per_example, batch)]

    def objective(W):
        return sum(example_loss(encoder, ex, fw, W, need_grad=False)[0].total
                   for ex, fw in zip(batch, frozen)) / len(batch)

    grad = sum(example_loss(encoder, ex, fw)[1] for ex, fw in zip(batch, frozen)) / len(batch)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")

    rows = sorted(set().union(*(encoder.tokens_buckets(t) for ex in batch
                                for t in [ex.query, *_example_texts(ex)])))
    coords = [(r, c) for r in rows for c in range(encoder.dimension)]
    rng = np.random.default_rng(seed)
    if len(coords) > num_coords:
        coords = [coords[i] for i in sorted(rng.choice(len(coords), size=num_coords, replace=False))]

    W0 = encoder.weights
    worst = 0.0
    for r, c in coords:
        Wp, Wm = W0.copy(), W0.copy()
        Wp[r, c] += epsilon_fd
        Wm[r, c] -= epsilon_fd
        numeric = (objective(Wp) - objective(Wm)) / (2 * epsilon_fd)
        analytic = grad[r, c]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def _bundle_of(encoder, ex):
    scores = [encoder.score(ex.query, t) for t in _example_texts(ex)]
    return ScoreBundle(scores[0], scores[1], scores[2], scores[3], tuple(scores[4:]))
