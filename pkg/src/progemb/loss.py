"""Contrastive losses with curriculum-style adaptive weighting.

The progressive variant modulates the plain temperature-scaled softmax loss
(InfoNCE) with three batch-driven coefficients:

* a batch threshold ``sigma = mean(pos) - beta``,
* per-query positive weights ``w`` that damp pairs whose similarity falls
  below sigma (suspected false positives),
* per-negative scales ``a`` that multiply a hard negative's similarity
  (negatives at least as similar as the positive) by ``t + pos``, where
  ``t`` is a momentum-tracked running mean of batch positive similarity.

Early in training ``t`` is near 0, so ``t + pos`` can sit below 1 and
briefly damps hard negatives instead of amplifying them; this literal
behaviour fades as ``t`` grows toward the typical positive similarity.

All coefficients (sigma, w, a, t) are computed from the current batch
before a parameter update and are held fixed for that step: no gradient
flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HyperParams",
    "MomentumState",
    "BatchSimilarities",
    "EmbeddingGradients",
    "info_nce",
    "batch_threshold",
    "positive_weights",
    "negative_scales",
    "progressive_loss",
    "update_momentum",
    "loss_gradients",
]


@dataclass(frozen=True)
class HyperParams:
    """Loss hyperparameters: momentum coefficient, threshold margin, temperature."""

    alpha: float = 0.5
    beta: float = 0.1
    tau: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class MomentumState:
    """Momentum-tracked bias t and the number of updates applied to it."""

    t: float = 0.0
    step: int = 0


@dataclass
class BatchSimilarities:
    """Similarities and derived coefficients for one batch, kept for audit.

    ``neg_mask`` marks which entries of ``neg`` participate; excluded slots
    arise when in-batch sharing would make a query's own positive one of
    its negatives.
    """

    pos: np.ndarray          # (B,)
    neg: np.ndarray          # (B, N)
    sigma: float
    weights: np.ndarray      # (B,)
    scales: np.ndarray       # (B, N)
    neg_mask: np.ndarray = field(default=None)  # (B, N) bool

    def __post_init__(self):
        if self.neg_mask is None:
            self.neg_mask = np.ones(self.neg.shape, dtype=bool)


@dataclass
class EmbeddingGradients:
    """Loss gradients with respect to query, positive, and negative embeddings."""

    query: np.ndarray      # (B, d)
    positive: np.ndarray   # (B, d)
    negative: np.ndarray   # (B, N, d)


def _check_inputs(pos, neg, tau: float, neg_mask):
    p = np.asarray(pos, dtype=np.float64)
    n = np.asarray(neg, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"pos must be a nonempty vector, got shape {p.shape}")
    if n.ndim != 2:
        raise ValueError(f"neg must be a 2-d matrix, got shape {n.shape}")
    if n.shape[0] != p.shape[0]:
        raise ValueError(
            f"shape mismatch: pos has B={p.shape[0]} but neg has {n.shape[0]} rows"
        )
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if neg_mask is None:
        m = np.ones(n.shape, dtype=bool)
    else:
        m = np.asarray(neg_mask, dtype=bool)
        if m.shape != n.shape:
            raise ValueError(
                f"neg_mask shape {m.shape} does not match neg shape {n.shape}"
            )
    return p, n, m


def _reduce(per_query: np.ndarray, reduction: str) -> float:
    if reduction == "sum":
        return float(np.sum(per_query))
    if reduction == "mean":
        return float(np.mean(per_query))
    raise ValueError(f"unknown reduction {reduction!r}, expected 'sum' or 'mean'")


def _row_lse_over_zero(shifted: np.ndarray) -> np.ndarray:
    """Row-wise log(1 + sum(exp(row))) via log-sum-exp over [0, row...].

    Shifting by the positive logit before exponentiation avoids the
    cancellation of computing lse(logits) - pos_logit when the positive
    dominates. -inf entries (masked candidates) contribute nothing.
    """
    z = np.concatenate(
        [np.zeros((shifted.shape[0], 1)), shifted], axis=1
    )
    m = np.max(z, axis=1, keepdims=True)
    return (m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1)))


def info_nce(pos, neg, tau: float, neg_mask=None, reduction: str = "sum") -> float:
    """Temperature-scaled softmax contrastive loss over a batch.

    Per query q the loss is -log of exp(pos_q/tau) divided by the sum of
    exp(pos_q/tau) and every exp(neg_qn/tau). The result is >= 0 and is
    exactly 0 only when there are no negatives.

    Args:
        pos: (B,) positive similarities.
        neg: (B, N) negative similarities; N may be 0.
        tau: temperature, > 0.
        neg_mask: optional (B, N) bool; False entries are ignored.
        reduction: 'sum' (default) or 'mean' over queries.
    """
    p, n, m = _check_inputs(pos, neg, tau, neg_mask)
    shifted = (n - p[:, None]) / tau
    shifted = np.where(m, shifted, -np.inf)
    return _reduce(_row_lse_over_zero(shifted), reduction)


def batch_threshold(pos, beta: float) -> float:
    """Batch threshold: mean positive similarity minus the margin beta.

    May be negative when the batch's positives are on average less similar
    than the margin; ``positive_weights`` treats that case specially.
    """
    p = np.asarray(pos, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"pos must be a nonempty vector, got shape {p.shape}")
    if beta < 0.0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return float(np.mean(p)) - float(beta)


def positive_weights(pos, sigma: float) -> np.ndarray:
    """Per-query positive weights.

    A query at or above the threshold keeps weight 1; below it the weight is
    pos/sigma, clamped to [0, 1] so a negative similarity can never reward
    pushing the pair apart. A non-positive sigma makes the ratio meaningless,
    so every weight is 1 in that case.
    """
    p = np.asarray(pos, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"pos must be a nonempty vector, got shape {p.shape}")
    if sigma <= 0.0:
        return np.ones_like(p)
    return np.where(p >= sigma, 1.0, np.clip(p / sigma, 0.0, 1.0))


def negative_scales(pos_q: float, neg_q, sigma: float, t: float) -> np.ndarray:
    """Scales for one query's negatives.

    A negative is left at scale 1 while the query's positive sits below the
    batch threshold, or while the negative is less similar than the
    positive (an easy negative). Otherwise it is a hard negative and its
    similarity gets multiplied by ``t + pos_q`` inside the loss.
    """
    n = np.asarray(neg_q, dtype=np.float64)
    if n.ndim != 1:
        raise ValueError(f"neg_q must be a vector, got shape {n.shape}")
    if pos_q < sigma:
        return np.ones_like(n)
    return np.where(n < pos_q, 1.0, t + pos_q)


def _scale_matrix(pos: np.ndarray, neg: np.ndarray, sigma: float, t: float) -> np.ndarray:
    easy = (pos[:, None] < sigma) | (neg < pos[:, None])
    return np.where(easy, 1.0, t + pos[:, None])


def progressive_loss(
    pos,
    neg,
    sigma: float,
    t: float,
    tau: float,
    neg_mask=None,
    reduction: str = "sum",
) -> tuple[float, BatchSimilarities]:
    """Adaptively weighted contrastive loss plus its audit record.

    Per query q the loss is ``-w_q * log`` of exp(pos_q/tau) divided by the
    sum of exp(pos_q/tau) and every exp(a_qn * neg_qn / tau); the scale
    multiplies the raw similarity before the division by tau. With all
    weights and scales equal to 1 this reduces exactly to ``info_nce``.

    Returns:
        (value, BatchSimilarities) where the record carries the inputs and
        the derived sigma, weights, and scales for that batch.
    """
    p, n, m = _check_inputs(pos, neg, tau, neg_mask)
    w = positive_weights(p, sigma)
    a = _scale_matrix(p, n, sigma, t)
    shifted = (a * n - p[:, None]) / tau
    shifted = np.where(m, shifted, -np.inf)
    per_query = w * _row_lse_over_zero(shifted)
    value = _reduce(per_query, reduction)
    record = BatchSimilarities(
        pos=p.copy(), neg=n.copy(), sigma=float(sigma), weights=w, scales=a, neg_mask=m
    )
    return value, record


def update_momentum(state: MomentumState, pos, alpha: float) -> MomentumState:
    """One momentum update of the bias t from a batch's positive similarities.

    Returns a new state; the input state is unchanged.
    """
    p = np.asarray(pos, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"pos must be a nonempty vector, got shape {p.shape}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    new_t = alpha * float(np.mean(p)) + (1.0 - alpha) * state.t
    return MomentumState(t=new_t, step=state.step + 1)


def _unit_rows(x: np.ndarray, name: str, mask: np.ndarray | None = None):
    norms = np.linalg.norm(x, axis=-1)
    if mask is None:
        bad = norms == 0.0
    else:
        bad = (norms == 0.0) & mask
    if np.any(bad):
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"zero-norm embedding: {name} at index {idx}")
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe[..., None], safe


def loss_gradients(
    query_embs,
    pos_embs,
    neg_embs,
    sigma: float,
    t: float,
    hyper: HyperParams,
    neg_mask=None,
    reduction: str = "sum",
) -> EmbeddingGradients:
    """Analytic gradients of the progressive loss w.r.t. all embeddings.

    Similarities are cosine; the gradient of cos(a, b) in a is
    b/(|a||b|) - cos(a, b) * a/|a|^2, so unit-norm inputs are not required.
    The coefficients sigma, w, a, and t are treated as constants.

    Args:
        query_embs: (B, d).
        pos_embs: (B, d).
        neg_embs: (B, N, d); masked slots may hold arbitrary vectors.
        neg_mask: optional (B, N) bool; False slots get zero gradient.
        reduction: must match the reduction used for the loss value.
    """
    q = np.asarray(query_embs, dtype=np.float64)
    p = np.asarray(pos_embs, dtype=np.float64)
    z = np.asarray(neg_embs, dtype=np.float64)
    if q.ndim != 2 or p.shape != q.shape:
        raise ValueError(
            f"query_embs and pos_embs must both be (B, d), got {q.shape} and {p.shape}"
        )
    if z.ndim != 3 or z.shape[0] != q.shape[0] or z.shape[2] != q.shape[1]:
        raise ValueError(
            f"neg_embs must be (B, N, d) matching queries, got {z.shape}"
        )
    return _gradients_with_coefficients(
        q, p, z, None, None, hyper.tau, sigma=sigma, t=t,
        neg_mask=neg_mask, reduction=reduction,
    )


def _gradients_with_coefficients(
    query_embs,
    pos_embs,
    neg_embs,
    weights,
    scales,
    tau: float,
    sigma: float = 0.0,
    t: float = 0.0,
    neg_mask=None,
    reduction: str = "sum",
) -> EmbeddingGradients:
    """Gradient core with frozen coefficients.

    ``weights``/``scales`` of None means "derive them from the cosines and
    the given sigma and t" (the progressive mode); the trainer passes
    explicit ones to drive the plain InfoNCE mode through the same path.
    """
    q = np.asarray(query_embs, dtype=np.float64)
    p = np.asarray(pos_embs, dtype=np.float64)
    z = np.asarray(neg_embs, dtype=np.float64)
    b_count, n_count = z.shape[0], z.shape[1]
    if neg_mask is None:
        mask = np.ones((b_count, n_count), dtype=bool)
    else:
        mask = np.asarray(neg_mask, dtype=bool)
        if mask.shape != (b_count, n_count):
            raise ValueError(
                f"neg_mask shape {mask.shape} does not match neg_embs {z.shape[:2]}"
            )
    uq, nq = _unit_rows(q, "query_embs")
    up, npos = _unit_rows(p, "pos_embs")
    uz, nz = _unit_rows(z, "neg_embs", mask)
    s_p = np.clip(np.sum(uq * up, axis=1), -1.0, 1.0)
    s_n = np.clip(np.einsum("bd,bnd->bn", uq, uz), -1.0, 1.0)
    w = positive_weights(s_p, sigma) if weights is None else np.asarray(weights)
    a = _scale_matrix(s_p, s_n, sigma, t) if scales is None else np.asarray(scales)

    shifted = np.where(mask, (a * s_n - s_p[:, None]) / tau, -np.inf)
    zlog = np.concatenate([np.zeros((b_count, 1)), shifted], axis=1)
    m = np.max(zlog, axis=1, keepdims=True)
    e = np.exp(zlog - m)
    pi = e / np.sum(e, axis=1, keepdims=True)

    d_sp = w * (pi[:, 0] - 1.0) / tau                       # (B,)
    d_sn = np.where(mask, w[:, None] * pi[:, 1:] * a / tau, 0.0)  # (B, N)
    if reduction == "mean":
        d_sp = d_sp / b_count
        d_sn = d_sn / b_count
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}, expected 'sum' or 'mean'")

    # chain rule through cosine: d cos(a,b)/da = b/(|a||b|) - cos(a,b) a/|a|^2
    grad_q = d_sp[:, None] * (up - s_p[:, None] * uq) / nq[:, None]
    grad_q += np.einsum(
        "bn,bnd->bd", d_sn, (uz - s_n[..., None] * uq[:, None, :]) / nq[:, None, None]
    )
    grad_p = d_sp[:, None] * (uq - s_p[:, None] * up) / npos[:, None]
    grad_n = d_sn[..., None] * (uq[:, None, :] - s_n[..., None] * uz) / nz[..., None]
    return EmbeddingGradients(query=grad_q, positive=grad_p, negative=grad_n)
