"""Bandit learners that control what is displayed.

DBGD, MGD and NSGD perturb the parameters and let interleaved clicks pick a
winner. PDGD samples lists from a Plackett-Luce model over the current
scores and takes a gradient step on click-inferred document pairs,
reweighted so that each pair's evidence is symmetric under swapping.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .batch import SessionBatch
from .ranker import RankerParams, add_scaled, backward, forward, rank_scores, sgd_update
from .simulator import DISPLAY_CUTOFF

ONLINE_PARADIGMS = ("ons", "ond")


class UnsupportedParadigmError(ValueError):
    pass


def _require_online(paradigm: str, algorithm: str):
    if paradigm not in ONLINE_PARADIGMS:
        raise UnsupportedParadigmError(
            f"{algorithm} needs to control the displayed lists and cannot learn from offline logs "
            f"(paradigm {paradigm!r}); use 'ons' or 'ond'"
        )


@dataclass
class PerturbationState:
    delta: float = 1.0
    alpha: float = 0.01
    n_candidates: int = 1
    history_size: int = 10
    history: deque = field(default_factory=deque)
    fallbacks: int = 0

    def __post_init__(self):
        if self.delta <= 0 or self.alpha <= 0:
            raise ValueError("delta and alpha must be positive")
        if self.n_candidates < 1 or self.history_size < 1:
            raise ValueError("n_candidates and history_size must be >= 1")
        self.history = deque(self.history, maxlen=self.history_size)

    def remember(self, direction) -> None:
        d = np.asarray(direction, dtype=np.float64)
        self.history.append(d / np.linalg.norm(d))


@dataclass(frozen=True)
class InterleavedList:
    docs: tuple[int, ...]
    team_of: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.docs)) != len(self.docs):
            raise ValueError("interleaved list has duplicate documents")
        if len(self.team_of) != len(self.docs):
            raise ValueError("every position needs a team")

    def credit(self, clicks, n_teams: int) -> np.ndarray:
        clicks = np.asarray(clicks, dtype=bool)
        return np.bincount(np.asarray(self.team_of, dtype=np.int64)[clicks], minlength=n_teams)


def sample_unit_direction(dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 0:
            return v / n


def team_draft_interleave(lists: Sequence[Sequence[int]], rng, cutoff: int = DISPLAY_CUTOFF) -> InterleavedList:
    """Team-draft multileaving.

    Each round visits the teams in a fresh random order; a team adds its
    highest-ranked document not yet placed. Stops at ``cutoff`` documents or
    when no team has anything left to contribute.
    """
    lists = [list(l) for l in lists]
    if len(lists) < 2 or any(len(l) == 0 for l in lists):
        raise ValueError("need at least two non-empty ranked lists")
    pool = set(lists[0])
    limit = min(cutoff, len(pool.union(*lists[1:])))
    placed: set = set()
    docs, teams = [], []
    heads = [0] * len(lists)
    while len(docs) < limit:
        progressed = False
        for t in rng.permutation(len(lists)):
            if len(docs) >= limit:
                break
            lst = lists[t]
            while heads[t] < len(lst) and lst[heads[t]] in placed:
                heads[t] += 1
            if heads[t] == len(lst):
                continue
            d = lst[heads[t]]
            placed.add(d)
            docs.append(d)
            teams.append(int(t))
            progressed = True
        if not progressed:
            break
    return InterleavedList(tuple(docs), tuple(teams))


# ------------------------------------------------------------- Plackett-Luce


def plackett_luce_sample(scores, rng: np.random.Generator, length: int | None = None):
    """Draw a ranking with probability proportional to ``exp(score)`` at each step.

    Perturbing the scores with Gumbel noise and sorting gives the same
    distribution as sequential sampling without replacement. Returns the
    order (``length`` items, all by default) and its Plackett-Luce probability.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    length = len(s) if length is None else min(length, len(s))
    order = np.argsort(-(s + rng.gumbel(size=len(s))), kind="stable")[:length]
    e = np.exp(s - s.max())
    remaining = e.sum() - np.concatenate(([0.0], np.cumsum(e[order])[:-1]))
    return order.astype(np.int64), float(np.prod(e[order] / remaining))


def plackett_luce_log_prob(scores, ranking) -> float:
    """Log-probability of ``ranking`` (possibly a prefix) over all ``scores``."""
    s = np.asarray(scores, dtype=np.float64)
    remaining = np.ones(len(s), dtype=bool)
    total = 0.0
    for d in ranking:
        total += s[d] - logsumexp(s[remaining])
        remaining[d] = False
    return float(total)


def plackett_luce_sample_batch(scores, mask, rng: np.random.Generator, length: int = DISPLAY_CUTOFF) -> np.ndarray:
    """Gumbel-top-k draws for a padded score matrix; ``-1`` pads short queries."""
    g = rng.gumbel(size=scores.shape)
    keyed = np.where(mask, scores + g, -np.inf)
    order = np.argsort(-keyed, axis=1, kind="stable")[:, :length]
    valid = np.take_along_axis(mask, order, axis=1)
    return np.where(valid, order, -1)


# ---------------------------------------------------------------------- PDGD


def pdgd_infer_pairs(clicks) -> list[tuple[int, int]]:
    """Pairs ``(i, j)`` of 0-based positions with ``i`` clicked preferred over unclicked ``j``.

    ``j`` ranges over every position above ``i`` and the one directly below.
    """
    c = np.asarray(clicks, dtype=bool)
    pairs = []
    for i in np.flatnonzero(c):
        for j in range(min(i + 2, len(c))):
            if j != i and not c[j]:
                pairs.append((int(i), int(j)))
    return pairs


def _swap(ranking, i, j):
    r = np.array(ranking, copy=True)
    r[i], r[j] = r[j], r[i]
    return r


def pdgd_pair_weight(scores, ranking, i: int, j: int) -> float:
    """``P(swapped) / (P(ranking) + P(swapped))`` with positions ``i`` and ``j`` exchanged."""
    lp = plackett_luce_log_prob(scores, ranking)
    lq = plackett_luce_log_prob(scores, _swap(ranking, i, j))
    return float(expit(lq - lp))


def pair_preference_grad(si, sj):
    """d/d(si, sj) of ``-log(exp(si) / (exp(si) + exp(sj)))``."""
    g = expit(-(si - sj))
    return -g, g


def pdgd_update(params: RankerParams, candidate_features, ranking, clicks, lr: float) -> RankerParams:
    """One PDGD step from a single session.

    ``ranking`` lists displayed candidate indices; ``clicks`` aligns with it.
    """
    pairs = pdgd_infer_pairs(clicks)
    if not pairs:
        return params.copy()
    s, cache = forward(params, candidate_features)
    ds = np.zeros_like(s)
    for i, j in pairs:
        di, dj = ranking[i], ranking[j]
        rho = pdgd_pair_weight(s, ranking, i, j)
        gi, gj = pair_preference_grad(s[di], s[dj])
        ds[di] += rho * gi
        ds[dj] += rho * gj
    return sgd_update(params, backward(params, cache, ds), lr)


def pdgd_pair_mask(clicks, mask):
    """``[b, i, j]``: clicked ``i`` over unclicked displayed ``j`` with ``j <= i + 1``."""
    k = clicks.shape[1]
    idx = np.arange(k)
    near = (idx[None, :] <= idx[:, None] + 1) & (idx[None, :] != idx[:, None])
    return clicks[:, :, None] & (~clicks & mask)[:, None, :] & near[None]


def batch_swap_log_ratio(cand_scores, cand_mask, displayed):
    """``log P(swap a,b) - log P(list)`` for every pair of displayed positions.

    Swapping positions ``a < b`` leaves the numerators unchanged and alters the
    denominators of steps ``a+1..b``, where the placed set holds the document
    from ``b`` instead of the one from ``a``.
    """
    shift = np.where(cand_mask, cand_scores, -np.inf).max(axis=1, keepdims=True)
    e_all = np.where(cand_mask, np.exp(cand_scores - shift), 0.0)
    valid = displayed >= 0
    safe = np.where(valid, displayed, 0)
    e = np.where(valid, np.take_along_axis(e_all, safe, axis=1), 0.0)
    total = e_all.sum(axis=1, keepdims=True)
    denom = total - np.concatenate([np.zeros((e.shape[0], 1)), np.cumsum(e, axis=1)[:, :-1]], axis=1)
    k = e.shape[1]
    a = np.arange(k)[:, None]
    b = np.arange(k)[None, :]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    steps = np.arange(k)
    inside = (steps[None, None, :] > lo[..., None]) & (steps[None, None, :] <= hi[..., None])
    e_lo = np.take_along_axis(e, np.broadcast_to(lo, (e.shape[0], k, k)).reshape(e.shape[0], -1), axis=1).reshape(-1, k, k)
    e_hi = np.take_along_axis(e, np.broadcast_to(hi, (e.shape[0], k, k)).reshape(e.shape[0], -1), axis=1).reshape(-1, k, k)
    d = denom[:, None, None, :]
    swapped = np.maximum(d - e_hi[..., None], 0.0) + e_lo[..., None]
    both = valid[:, :, None] & valid[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(inside[None] & both[..., None], np.log(d) - np.log(swapped), 0.0)
    return terms.sum(axis=-1)


def pdgd_batch_loss_and_grad(params, batch: SessionBatch):
    """Mean over sessions of the rho-weighted pair log-loss, rho held fixed."""
    cand_scores, cache = forward(params, batch.candidate_features)
    pairs = pdgd_pair_mask(batch.clicks, batch.mask)
    n_sessions = len(batch)
    if not pairs.any():
        return 0.0, backward(params, cache, np.zeros_like(cand_scores))
    log_ratio = batch_swap_log_ratio(cand_scores, batch.candidate_mask, batch.displayed)
    rho = np.where(pairs, expit(log_ratio), 0.0)
    safe = np.where(batch.mask, batch.displayed, 0)
    s = np.take_along_axis(cand_scores, safe, axis=1)
    margin = s[:, :, None] - s[:, None, :]
    loss = float((rho * np.logaddexp(0.0, -margin)).sum() / n_sessions)
    coef = rho * expit(-margin) / n_sessions
    ds_disp = (-coef.sum(axis=2) + coef.sum(axis=1)) * batch.mask
    ds = np.zeros_like(cand_scores)
    np.add.at(ds, (np.arange(n_sessions)[:, None].repeat(ds_disp.shape[1], 1), safe), ds_disp)
    return loss, backward(params, cache, ds)


def pdgd_batch_update(params, batch: SessionBatch, lr: float) -> RankerParams:
    _, grad = pdgd_batch_loss_and_grad(params, batch)
    return sgd_update(params, grad, lr)


# ------------------------------------------------------ perturbation learners


ClickEnv = Callable[[np.ndarray], np.ndarray]


def _list_for(params, features, stochastic: bool, rng):
    s = forward(params, features, keep_cache=False)
    if stochastic:
        order, _ = plackett_luce_sample(s, rng)
        return order
    return rank_scores(s)


def _duel(params, directions, state: PerturbationState, features, click_env: ClickEnv, stochastic, rng):
    """Multileave the current ranker with one perturbed ranker per direction.

    Returns the indices of directions whose team beat the current ranker.
    """
    rankers = [params] + [add_scaled(params, u, state.delta) for u in directions]
    lists = [_list_for(p, features, stochastic, rng) for p in rankers]
    inter = team_draft_interleave(lists, rng)
    clicks = np.asarray(click_env(np.asarray(inter.docs)), dtype=bool)
    credit = inter.credit(clicks, len(rankers))
    return [i for i in range(len(directions)) if credit[i + 1] > credit[0]]


def dbgd_step(params, state: PerturbationState, features, click_env: ClickEnv, rng, paradigm: str = "ond", direction=None):
    """Perturb, interleave, and move by ``alpha * u`` only on a strict win."""
    _require_online(paradigm, "dbgd")
    u = sample_unit_direction(params.n_params, rng) if direction is None else np.asarray(direction, dtype=np.float64)
    winners = _duel(params, [u], state, features, click_env, paradigm == "ons", rng)
    if not winners:
        return params.copy()
    return add_scaled(params, u, state.alpha)


def mgd_step(params, state: PerturbationState, features, click_env: ClickEnv, rng, paradigm: str = "ond", directions=None):
    """Multileave ``n_candidates`` perturbations; move along the mean winning direction."""
    _require_online(paradigm, "mgd")
    if directions is None:
        directions = [sample_unit_direction(params.n_params, rng) for _ in range(state.n_candidates)]
    winners = _duel(params, directions, state, features, click_env, paradigm == "ons", rng)
    if not winners:
        return params.copy()
    return add_scaled(params, np.mean([directions[i] for i in winners], axis=0), state.alpha)


def project_to_null_space(raw, history) -> np.ndarray:
    """Remove from ``raw`` its component in the span of ``history``."""
    v = np.asarray(raw, dtype=np.float64).copy()
    if len(history) == 0:
        return v
    h = np.asarray(list(history), dtype=np.float64)
    u, sv, _ = np.linalg.svd(h.T, full_matrices=False)
    q = u[:, sv > 1e-10 * sv.max()]
    v -= q @ (q.T @ v)
    # second pass keeps orthogonality at machine precision
    v -= q @ (q.T @ v)
    return v


def nsgd_propose(state: PerturbationState, dim: int, rng, max_retries: int = 3, raw=None) -> np.ndarray:
    """A unit direction orthogonal to the remembered losing directions.

    When the residual degenerates, the oldest half of the history is
    dropped and sampling retried; after ``max_retries`` it falls back to an
    unrestricted direction and counts the fallback on ``state``.
    """
    for attempt in range(max_retries + 1):
        v0 = sample_unit_direction(dim, rng) if raw is None or attempt else np.asarray(raw, dtype=np.float64)
        v = project_to_null_space(v0, state.history)
        n = np.linalg.norm(v)
        if n >= 1e-6:
            return v / n
        for _ in range(max(1, len(state.history) // 2)):
            if state.history:
                state.history.popleft()
    state.fallbacks += 1
    return sample_unit_direction(dim, rng)


def nsgd_step(params, state: PerturbationState, features, click_env: ClickEnv, rng, paradigm: str = "ond"):
    """MGD with null-space candidates; losing directions are remembered."""
    _require_online(paradigm, "nsgd")
    directions = [nsgd_propose(state, params.n_params, rng) for _ in range(state.n_candidates)]
    winners = _duel(params, directions, state, features, click_env, paradigm == "ons", rng)
    for i, u in enumerate(directions):
        if i not in winners:
            state.remember(u)
    if not winners:
        return params.copy()
    return add_scaled(params, np.mean([directions[i] for i in winners], axis=0), state.alpha)
