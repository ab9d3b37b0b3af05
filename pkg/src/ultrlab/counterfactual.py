"""Counterfactual learners: they debias the loss computed from clicks.

Each ``*_update`` takes a :class:`~ultrlab.batch.SessionBatch` and returns
new parameters (and learner state); the matching ``*_loss_and_grad`` exposes
the loss and its gradient with every debiasing weight held fixed, which is
what the SGD step uses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .batch import SessionBatch
from .ranker import RankerParams, backward, forward, sgd_update
from .simulator import DISPLAY_CUTOFF

PROPENSITY_SOURCES = ("randomization", "rem", "dla", "paird", "oracle")


class PosteriorSingularityError(FloatingPointError):
    """``P(c=0) = 1 - beta * gamma`` vanished, so the posterior is 0/0."""


@dataclass(frozen=True)
class PropensityEstimate:
    """Examination propensities per display position, relative to position 1."""

    weights: np.ndarray
    source: str = "randomization"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (DISPLAY_CUTOFF,) or np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError(f"need {DISPLAY_CUTOFF} positive finite propensities")
        if self.source not in PROPENSITY_SOURCES:
            raise ValueError(f"source must be one of {PROPENSITY_SOURCES}")
        w = w / w[0]
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def oracle(cls, click_model) -> "PropensityEstimate":
        return cls(click_model.examination, "oracle")

    @classmethod
    def uniform(cls) -> "PropensityEstimate":
        return cls(np.ones(DISPLAY_CUTOFF), "oracle")


@dataclass
class PropensityModel:
    """Trainable position model: softmax logits for DLA, Bernoulli betas for REM."""

    logits: np.ndarray = field(default_factory=lambda: np.zeros(DISPLAY_CUTOFF))
    beta: np.ndarray = field(default_factory=lambda: np.full(DISPLAY_CUTOFF, 0.5))

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).copy()
        self.beta = np.asarray(self.beta, dtype=np.float64).copy()
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("REM betas must lie in the open interval (0, 1)")

    def copy(self) -> "PropensityModel":
        return PropensityModel(self.logits.copy(), self.beta.copy())

    def dla_weights(self) -> np.ndarray:
        """Inverse-propensity weights ``exp(g_1 - g_i)``."""
        return np.exp(self.logits[0] - self.logits)

    def dla_propensity(self) -> np.ndarray:
        return np.exp(self.logits - self.logits[0])

    def to_dict(self) -> dict:
        return {"logits": self.logits.tolist(), "beta": self.beta.tolist()}


@dataclass
class PairDState:
    t_plus: np.ndarray = field(default_factory=lambda: np.ones(DISPLAY_CUTOFF))
    t_minus: np.ndarray = field(default_factory=lambda: np.ones(DISPLAY_CUTOFF))
    clip_max: float = 10.0

    def __post_init__(self):
        self.t_plus = np.asarray(self.t_plus, dtype=np.float64).copy()
        self.t_minus = np.asarray(self.t_minus, dtype=np.float64).copy()
        if self.clip_max <= 0:
            raise ValueError("clip_max must be positive")
        for name in ("t_plus", "t_minus"):
            v = getattr(self, name)
            if np.any(v <= 0) or np.any(v > self.clip_max):
                raise ValueError(f"{name} entries must lie in (0, clip_max]")

    def copy(self) -> "PairDState":
        return PairDState(self.t_plus.copy(), self.t_minus.copy(), self.clip_max)

    def with_ratios(self, t_plus, t_minus) -> "PairDState":
        """Store new ratios, clipped into ``[1/clip_max, clip_max]``."""
        lo = 1.0 / self.clip_max if self.clip_max > 1 else self.clip_max
        return PairDState(
            np.clip(t_plus, lo, self.clip_max),
            np.clip(t_minus, lo, self.clip_max),
            self.clip_max,
        )

    def to_dict(self) -> dict:
        return {"t_plus": self.t_plus.tolist(), "t_minus": self.t_minus.tolist(), "clip_max": self.clip_max}


# ---------------------------------------------------------------- losses on scores


def _click_pairs(clicks, mask):
    """``pairs[b, i, j]``: clicked position ``i`` over displayed non-clicked ``j``."""
    return clicks[:, :, None] & (~clicks & mask)[:, None, :]


def pairwise_loss(scores, clicks, mask, pair_weights=None):
    """Weighted mean pairwise cross-entropy over (clicked, non-clicked) pairs.

    Returns the loss and its gradient with respect to ``scores``. The mean
    divides by the number of pairs, so unit weights give the unweighted
    loss exactly.
    """
    pairs = _click_pairs(clicks, mask)
    n_pairs = np.count_nonzero(pairs)
    if n_pairs == 0:
        return 0.0, np.zeros_like(scores)
    margin = scores[:, :, None] - scores[:, None, :]
    per_pair = np.logaddexp(0.0, -margin)
    slope = expit(-margin)
    w = pairs.astype(np.float64)
    if pair_weights is not None:
        w = w * pair_weights
    loss = float((w * per_pair).sum() / n_pairs)
    coef = w * slope / n_pairs
    dscores = -coef.sum(axis=2) + coef.sum(axis=1)
    return loss, dscores


def document_ipw_loss(scores, clicks, mask, propensities):
    """Per-document IPW loss with clicks-independent document losses.

    Each clicked document contributes its pairwise cross-entropy against every
    other displayed document, divided by the examination propensity of its
    position. Summed over documents and averaged over sessions, so its
    expectation over examination equals the same sum over relevant documents.
    """
    margin = scores[:, :, None] - scores[:, None, :]
    other = mask[:, None, :] & ~np.eye(scores.shape[1], dtype=bool)[None]
    delta = (np.logaddexp(0.0, -margin) * other).sum(axis=2)
    w = clicks / np.asarray(propensities)[: scores.shape[1]]
    return float((w * delta * mask).sum() / scores.shape[0])


def expected_full_information_loss(scores, mask, relevance_probs):
    """``E_r[sum_{d: r_d=1} delta(d)]`` for the same document loss as :func:`document_ipw_loss`."""
    margin = scores[:, :, None] - scores[:, None, :]
    other = mask[:, None, :] & ~np.eye(scores.shape[1], dtype=bool)[None]
    delta = (np.logaddexp(0.0, -margin) * other).sum(axis=2)
    return float((relevance_probs * delta * mask).sum() / scores.shape[0])


def _masked_log_softmax(x, mask):
    x = np.where(mask, x, -np.inf)
    out = log_softmax(x, axis=-1)
    return np.where(mask, out, 0.0)


def softmax_click_loss(logits, clicks, mask, click_weights):
    """``mean_b sum_{clicked d} w_d * -log softmax(logits)[d]`` over displayed entries."""
    logp = _masked_log_softmax(logits, mask)
    cw = np.where(clicks, click_weights, 0.0)
    loss = float(-(cw * logp).sum() / logits.shape[0])
    p = np.where(mask, np.exp(logp), 0.0)
    dlogits = (cw.sum(axis=1, keepdims=True) * p - cw) / logits.shape[0]
    return loss, dlogits


def sigmoid_cross_entropy(scores, targets, mask):
    n = np.count_nonzero(mask)
    if n == 0:
        return 0.0, np.zeros_like(scores)
    per_doc = np.logaddexp(0.0, scores) - targets * scores
    loss = float((per_doc * mask).sum() / n)
    dscores = (expit(scores) - targets) * mask / n
    return loss, dscores


# ------------------------------------------------------------------------ helpers


def _scores(params, batch):
    return forward(params, batch.features)


def _step(params, cache, dscores, lr):
    return sgd_update(params, backward(params, cache, dscores), lr)


def ipw_pair_weights(batch: SessionBatch, propensity: PropensityEstimate, clip: float | None = None):
    inv = 1.0 / propensity.weights[: batch.clicks.shape[1]]
    if clip is not None:
        inv = np.minimum(inv, clip)
    return np.broadcast_to(inv[None, :, None], batch.clicks.shape + (batch.clicks.shape[1],))


def paird_pair_weights(batch: SessionBatch, state: PairDState):
    k = batch.clicks.shape[1]
    w = 1.0 / (state.t_plus[:k, None] * state.t_minus[None, :k])
    return np.broadcast_to(w[None], batch.clicks.shape + (k,))


# ------------------------------------------------------------------------ NA / IPW


def na_loss_and_grad(params, batch):
    s, cache = _scores(params, batch)
    loss, ds = pairwise_loss(s, batch.clicks, batch.mask, np.ones(batch.clicks.shape + (batch.clicks.shape[1],)))
    return loss, backward(params, cache, ds)


def na_update(params: RankerParams, batch: SessionBatch, lr: float) -> RankerParams:
    """One SGD step on the click-pair cross-entropy, ignoring position bias."""
    loss, grad = na_loss_and_grad(params, batch)
    return sgd_update(params, grad, lr)


def ipw_loss_and_grad(params, batch, propensity, clip=None):
    s, cache = _scores(params, batch)
    loss, ds = pairwise_loss(s, batch.clicks, batch.mask, ipw_pair_weights(batch, propensity, clip))
    return loss, backward(params, cache, ds)


def ipw_update(params, batch, propensity: PropensityEstimate, lr: float, clip: float | None = None) -> RankerParams:
    """Click pairs reweighted by the inverse propensity of the clicked position."""
    loss, grad = ipw_loss_and_grad(params, batch, propensity, clip)
    return sgd_update(params, grad, lr)


# ----------------------------------------------------------------------------- REM


def rem_posteriors(beta, gamma, clicked):
    """Posterior ``(P(o=1|c), P(r=1|c))`` under ``P(c=1) = beta * gamma``.

    Works elementwise on arrays. Raises :class:`PosteriorSingularityError`
    for a non-click where ``beta * gamma`` rounds to 1.
    """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    clicked = np.asarray(clicked, dtype=bool)
    if np.any((beta < 0) | (beta > 1) | (gamma < 0) | (gamma > 1)):
        raise ValueError("beta and gamma must be probabilities")
    p_no_click = 1.0 - beta * gamma
    if np.any(~clicked & (p_no_click <= 1e-12)):
        raise PosteriorSingularityError("P(c=0) = 1 - beta*gamma is zero; posterior undefined for a non-click")
    safe = np.where(clicked, 1.0, p_no_click)
    p_exam = np.where(clicked, 1.0, beta * (1 - gamma) / safe)
    p_rel = np.where(clicked, 1.0, gamma * (1 - beta) / safe)
    if p_exam.ndim == 0:
        return float(p_exam), float(p_rel)
    return p_exam, p_rel


_GAMMA_EPS = 1e-7


def rem_loss_and_grad(params, batch, prop: PropensityModel):
    """Sigmoid cross-entropy against posterior relevance; posteriors held fixed."""
    s, cache = _scores(params, batch)
    k = batch.clicks.shape[1]
    gamma = np.clip(expit(s), _GAMMA_EPS, 1 - _GAMMA_EPS)
    beta = np.broadcast_to(prop.beta[:k], s.shape)
    p_exam, p_rel = rem_posteriors(beta, gamma, batch.clicks)
    loss, ds = sigmoid_cross_entropy(s, p_rel, batch.mask)
    return loss, backward(params, cache, ds), p_exam


def rem_update(params, prop: PropensityModel, batch, lr: float, em_smoothing: float = 0.05):
    """Online EM: posterior E-step, smoothed beta M-step, one ranker SGD step."""
    loss, grad, p_exam = rem_loss_and_grad(params, batch, prop)
    k = batch.clicks.shape[1]
    shown = batch.mask.sum(axis=0)
    seen = shown > 0
    new_beta = prop.beta.copy()
    mean_exam = np.divide((p_exam * batch.mask).sum(axis=0), shown, out=np.zeros(k), where=seen)
    idx = np.flatnonzero(seen)
    new_beta[idx] = (1 - em_smoothing) * prop.beta[idx] + em_smoothing * mean_exam[idx]
    new_beta = np.clip(new_beta, 1e-6, 1 - 1e-6)
    return sgd_update(params, grad, lr), PropensityModel(prop.logits, new_beta)


# ----------------------------------------------------------------------------- DLA


def dla_relevance_weights(scores, clicks, mask):
    """Inverse relevance weights ``exp(s_top - s_d)`` relative to the top displayed doc.

    The reference must not depend on the clicks: normalizing to a clicked
    document gives every single-click session weight 1 and leaves the
    propensity loss uncorrected.
    """
    ref = scores[:, :1]
    return np.where(mask, np.exp(np.clip(ref - scores, -700.0, 700.0)), 0.0)


def dla_losses_and_grads(params, prop: PropensityModel, batch):
    """Ranker and propensity softmax losses with their cross weights held fixed.

    Returns ``(ranker_loss, ranker_grad, prop_loss, logits_grad)``.
    """
    s, cache = _scores(params, batch)
    k = batch.clicks.shape[1]
    w = np.broadcast_to(prop.dla_weights()[:k], s.shape)
    v = dla_relevance_weights(s, batch.clicks, batch.mask)
    r_loss, ds = softmax_click_loss(s, batch.clicks, batch.mask, w)
    g = np.broadcast_to(prop.logits[:k], s.shape)
    p_loss, dg = softmax_click_loss(g, batch.clicks, batch.mask, v)
    dlogits = np.zeros(DISPLAY_CUTOFF)
    dlogits[:k] = dg.sum(axis=0)
    return r_loss, backward(params, cache, ds), p_loss, dlogits


def dla_update(params, prop: PropensityModel, batch, lr: float, prop_lr: float | None = None):
    """Dual learning: inverse-propensity ranker step and inverse-relevance propensity step."""
    _, grad, _, dlogits = dla_losses_and_grads(params, prop, batch)
    prop_lr = lr if prop_lr is None else prop_lr
    return sgd_update(params, grad, lr), PropensityModel(prop.logits - prop_lr * dlogits, prop.beta)


# --------------------------------------------------------------------------- PairD


def paird_loss_and_grad(params, batch, state: PairDState):
    s, cache = _scores(params, batch)
    loss, ds = pairwise_loss(s, batch.clicks, batch.mask, paird_pair_weights(batch, state))
    return loss, backward(params, cache, ds), s


def paird_reestimate(scores, batch, state: PairDState, step_size: float = 1.0, regularization_p: float = 1.0) -> PairDState:
    """EM-style ratio update from the current model's pair losses.

    A position's click ratio grows with the weighted loss mass of pairs whose
    clicked document sits there (and symmetrically for non-clicks); both are
    normalized to position 1 and damped by the ``1 / (p + 1)`` power. Positions
    without evidence keep their ratio.
    """
    k = batch.clicks.shape[1]
    pairs = _click_pairs(batch.clicks, batch.mask)
    margin = scores[:, :, None] - scores[:, None, :]
    per_pair = np.where(pairs, np.logaddexp(0.0, -margin), 0.0)
    mass_plus = (per_pair / state.t_minus[None, None, :k]).sum(axis=(0, 2))
    mass_minus = (per_pair / state.t_plus[None, :k, None]).sum(axis=(0, 1))
    new_plus = state.t_plus.copy()
    new_minus = state.t_minus.copy()
    power = 1.0 / (regularization_p + 1.0)
    for new, mass in ((new_plus, mass_plus), (new_minus, mass_minus)):
        if mass[0] <= 0:
            continue
        have = mass > 0
        ratio = (mass[have] / mass[0]) ** power
        idx = np.flatnonzero(have)
        new[idx] = (1 - step_size) * new[idx] + step_size * ratio
    return state.with_ratios(new_plus, new_minus)


def paird_update(params, state: PairDState, batch, lr: float, step_size: float = 1.0, regularization_p: float = 1.0):
    """Pair loss divided by ``t_plus[pos(d+)] * t_minus[pos(d-)]``, then ratio re-estimation."""
    loss, grad, s = paird_loss_and_grad(params, batch, state)
    new_state = paird_reestimate(s, batch, state, step_size, regularization_p)
    return sgd_update(params, grad, lr), new_state


def paird_required_t(p_exam, p_not_relevant):
    """The ``t`` with ``t * P(r=0) = P(c=0)`` under the examination hypothesis.

    ``P(c=0) = 1 - P(o) + P(o) P(r=0)``, so ``t = P(o) + (1 - P(o)) / P(r=0)``;
    it depends on ``P(r=0)`` unless ``P(o) = 1``.
    """
    p_exam = np.asarray(p_exam, dtype=np.float64)
    p_nr = np.asarray(p_not_relevant, dtype=np.float64)
    return (1 - p_exam + p_exam * p_nr) / p_nr
