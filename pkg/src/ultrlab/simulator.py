"""Position-biased click simulation under the examination hypothesis.

A document at display position ``i`` is clicked when the user examines that
position (probability ``nu[i] ** eta``) and perceives the document as
relevant (probability ``eps + (1 - eps) * (2**y - 1) / 15``). Only the top
``DISPLAY_CUTOFF`` results are ever shown.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_json, atomic_write_text
from ._validation import check_positive_int
from .data import MAX_LABEL, Dataset

DISPLAY_CUTOFF = 10
EYE_TRACKING_NU = (0.68, 0.61, 0.48, 0.34, 0.28, 0.20, 0.11, 0.10, 0.08, 0.06)


class PropensityEstimationError(RuntimeError):
    def __init__(self, position: int, message: str | None = None):
        self.position = position
        super().__init__(message or f"no clicks observed at position {position}; cannot estimate its propensity")


@dataclass(frozen=True)
class ClickModel:
    nu: tuple[float, ...] = EYE_TRACKING_NU
    eta: float = 1.0
    epsilon: float = 0.1
    display_cutoff: int = DISPLAY_CUTOFF

    def __post_init__(self):
        nu = tuple(float(v) for v in self.nu)
        object.__setattr__(self, "nu", nu)
        if self.display_cutoff != DISPLAY_CUTOFF:
            raise ValueError(f"display_cutoff is fixed at {DISPLAY_CUTOFF}")
        if len(nu) != DISPLAY_CUTOFF or not all(0 < v <= 1 for v in nu):
            raise ValueError(f"nu needs {DISPLAY_CUTOFF} values in (0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")

    @property
    def examination(self) -> np.ndarray:
        return np.asarray(self.nu) ** self.eta

    def relevance(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        return self.epsilon + (1 - self.epsilon) * (2.0 ** labels - 1) / (2.0 ** MAX_LABEL - 1)


def examination_prob(model: ClickModel, position: int) -> float:
    """Examination probability at 1-based ``position``."""
    if not 1 <= position <= model.display_cutoff:
        raise ValueError(f"position must be in 1..{model.display_cutoff}, got {position}")
    return model.nu[position - 1] ** model.eta


def perceived_relevance_prob(label: int, epsilon: float) -> float:
    if int(label) != label or not 0 <= label <= MAX_LABEL:
        raise ValueError(f"label must be an integer grade in 0..{MAX_LABEL}, got {label!r}")
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    return epsilon + (1 - epsilon) * (2 ** int(label) - 1) / (2 ** MAX_LABEL - 1)


@dataclass(frozen=True, eq=False)
class Session:
    """One displayed list and its clicks.

    ``displayed`` holds candidate indices into the query; ``doc_ids`` the
    matching identifiers.
    """

    query_id: str
    displayed: np.ndarray
    clicks: np.ndarray
    doc_ids: tuple[str, ...] = ()
    origin: str = "online"

    def __post_init__(self):
        displayed = np.asarray(self.displayed, dtype=np.int64)
        clicks = np.asarray(self.clicks, dtype=bool)
        if displayed.ndim != 1 or clicks.shape != displayed.shape:
            raise ValueError("clicks must align with displayed")
        if len(displayed) > DISPLAY_CUTOFF:
            raise ValueError(f"at most {DISPLAY_CUTOFF} documents can be displayed")
        if self.origin not in ("logged", "online"):
            raise ValueError("origin must be 'logged' or 'online'")
        object.__setattr__(self, "displayed", displayed)
        object.__setattr__(self, "clicks", clicks)
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.displayed, other.displayed)
            and np.array_equal(self.clicks, other.clicks)
            and self.doc_ids == other.doc_ids
            and self.origin == other.origin
        )

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "displayed": list(self.doc_ids),
            "clicks": [int(c) for c in self.clicks],
        }


def sample_clicks(model: ClickModel, labels, rng: np.random.Generator) -> np.ndarray:
    """Vectorized click draw for labels in display order.

    ``labels`` has shape ``(..., k)`` with ``k <= display_cutoff``; a
    negative label marks an empty slot and is never clicked.
    """
    labels = np.asarray(labels)
    k = labels.shape[-1]
    if k > model.display_cutoff:
        raise ValueError(f"at most {model.display_cutoff} positions can be displayed")
    valid = labels >= 0
    p_exam = model.examination[:k]
    p_rel = model.relevance(np.where(valid, labels, 0))
    examined = rng.random(labels.shape) < p_exam
    relevant = rng.random(labels.shape) < p_rel
    return examined & relevant & valid


def simulate_clicks(model: ClickModel, labels, rng: np.random.Generator, query_id: str = "", displayed=None, doc_ids=(), origin="online") -> Session:
    """Simulate one session over a ranked list of labels.

    Positions past the display cutoff are dropped before clicks are drawn.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("need a non-empty ranked list of labels")
    shown = labels[: model.display_cutoff]
    if displayed is None:
        displayed = np.arange(len(shown))
    displayed = np.asarray(displayed)[: len(shown)]
    doc_ids = tuple(doc_ids)[: len(shown)]
    return Session(query_id, displayed, sample_clicks(model, shown, rng), doc_ids, origin)


def estimate_propensity_by_randomization(
    dataset: Dataset,
    model: ClickModel,
    n_sessions: int,
    rng: np.random.Generator,
    batch: int = 50_000,
) -> np.ndarray:
    """Relative examination propensities from uniformly shuffled result lists.

    Each session picks a query uniformly, shuffles all its candidates,
    shows the top ``display_cutoff`` and records clicks. Per-position click
    rates, divided by the position-1 rate, estimate ``P(o_i) / P(o_1)``.
    """
    n_sessions = check_positive_int(n_sessions, "n_sessions")
    padded = dataset.padded
    width = min(model.display_cutoff, padded.labels.shape[1])
    clicks = np.zeros(width)
    shown = np.zeros(width)
    done = 0
    while done < n_sessions:
        m = min(batch, n_sessions - done)
        qidx = rng.integers(len(dataset), size=m)
        # uniform shuffle of each query's own candidates; padding sorts last
        keys = rng.random((m, padded.labels.shape[1]))
        keys[~padded.mask[qidx]] = np.inf
        order = np.argsort(keys, axis=1)[:, :width]
        labels = np.take_along_axis(padded.labels[qidx], order, axis=1)
        valid = np.take_along_axis(padded.mask[qidx], order, axis=1)
        labels = np.where(valid, labels, -1)
        c = sample_clicks(model, labels, rng)
        clicks += c.sum(axis=0)
        shown += valid.sum(axis=0)
        done += m
    rates = np.divide(clicks, shown, out=np.zeros_like(clicks), where=shown > 0)
    for i, r in enumerate(rates, start=1):
        if r <= 0:
            raise PropensityEstimationError(i)
    out = np.ones(model.display_cutoff)
    out[:width] = rates / rates[0]
    if width < model.display_cutoff:
        raise PropensityEstimationError(width + 1, f"queries have only {width} candidates; position {width + 1} is never shown")
    return out


def save_propensities(path, weights: Sequence[float]) -> None:
    weights = [float(w) for w in weights]
    if len(weights) != DISPLAY_CUTOFF:
        raise ValueError(f"expected {DISPLAY_CUTOFF} propensities")
    atomic_write_json(path, weights, indent=None)


def load_propensities(path) -> np.ndarray:
    weights = np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)
    if weights.shape != (DISPLAY_CUTOFF,) or np.any(weights <= 0):
        raise ValueError(f"{path}: expected {DISPLAY_CUTOFF} positive propensities")
    return weights


@dataclass(frozen=True, eq=False)
class ClickLog:
    """A batch of sessions over one dataset in padded array form.

    ``displayed[n, k]`` is the candidate index shown at position ``k`` of
    session ``n`` (``-1`` when fewer documents were shown).
    """

    query_index: np.ndarray
    displayed: np.ndarray
    clicks: np.ndarray
    origin: str = "logged"

    def __post_init__(self):
        if self.displayed.shape != self.clicks.shape or self.displayed.shape[0] != self.query_index.shape[0]:
            raise ValueError("query_index, displayed and clicks must align")
        if self.displayed.shape[1] > DISPLAY_CUTOFF:
            raise ValueError(f"at most {DISPLAY_CUTOFF} positions per session")
        if np.any(self.clicks & (self.displayed < 0)):
            raise ValueError("clicks recorded on empty slots")

    def __len__(self) -> int:
        return len(self.query_index)

    @property
    def mask(self) -> np.ndarray:
        return self.displayed >= 0

    def take(self, idx) -> "ClickLog":
        return ClickLog(self.query_index[idx], self.displayed[idx], self.clicks[idx], self.origin)

    def sessions(self, dataset: Dataset) -> list[Session]:
        out = []
        for q, disp, c in zip(self.query_index, self.displayed, self.clicks):
            keep = disp >= 0
            query = dataset[int(q)]
            d = disp[keep]
            out.append(Session(query.query_id, d, c[keep], tuple(query.doc_ids[i] for i in d), self.origin))
        return out

    @classmethod
    def from_sessions(cls, dataset: Dataset, sessions: Iterable[Session]) -> "ClickLog":
        sessions = list(sessions)
        qpos = {q.query_id: i for i, q in enumerate(dataset.queries)}
        n = len(sessions)
        displayed = np.full((n, DISPLAY_CUTOFF), -1, dtype=np.int64)
        clicks = np.zeros((n, DISPLAY_CUTOFF), dtype=bool)
        qidx = np.zeros(n, dtype=np.int64)
        origin = sessions[0].origin if sessions else "logged"
        for r, s in enumerate(sessions):
            if s.query_id not in qpos:
                raise KeyError(f"session query {s.query_id!r} not in dataset")
            qidx[r] = qpos[s.query_id]
            displayed[r, : len(s.displayed)] = s.displayed
            clicks[r, : len(s.clicks)] = s.clicks
        return cls(qidx, displayed, clicks, origin)

    def save_jsonl(self, path, dataset: Dataset) -> None:
        lines = [json.dumps(s.to_json()) for s in self.sessions(dataset)]
        atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load_jsonl(cls, path, dataset: Dataset, origin: str = "logged") -> "ClickLog":
        by_id = {q.query_id: q for q in dataset.queries}
        sessions = []
        for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            query = by_id.get(rec["query_id"])
            if query is None:
                raise KeyError(f"line {line_no}: unknown query {rec['query_id']!r}")
            pos = {d: i for i, d in enumerate(query.doc_ids)}
            displayed = [pos[d] for d in rec["displayed"]]
            sessions.append(Session(rec["query_id"], displayed, rec["clicks"], rec["displayed"], origin))
        return cls.from_sessions(dataset, sessions)
