"""Graded ranking metrics and paired significance testing."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_json, atomic_write_text
from .data import MAX_LABEL, Dataset

CUTOFFS = (1, 3, 5, 10)
METRICS = ("ndcg", "err")


def _gains(labels):
    return 2.0 ** np.asarray(labels, dtype=np.float64) - 1.0


def _discounts(k):
    return 1.0 / np.log2(np.arange(2, k + 2))


def dcg_at_k(ranked_labels, k: int) -> float:
    g = _gains(ranked_labels)[:k]
    return float(np.sum(g * _discounts(len(g))))


def ndcg_at_k(ranked_labels, k: int) -> float:
    """nDCG@k with exponential gain; 0.0 when the list has no relevant document."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ideal = dcg_at_k(np.sort(np.asarray(ranked_labels))[::-1], k)
    if ideal == 0:
        return 0.0
    return dcg_at_k(ranked_labels, k) / ideal


def err_at_k(ranked_labels, k: int) -> float:
    """Expected reciprocal rank with stop probability (2**y - 1) / 2**4."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _gains(ranked_labels)[:k] / 2.0**MAX_LABEL
    not_stopped = np.concatenate([[1.0], np.cumprod(1.0 - r)[:-1]])
    return float(np.sum(r * not_stopped / np.arange(1, len(r) + 1)))


def batch_metrics(ranked_labels: np.ndarray, mask: np.ndarray, cutoffs=CUTOFFS) -> dict[str, dict[int, np.ndarray]]:
    """Per-query nDCG and ERR for a padded ``(n_queries, width)`` label matrix.

    ``ranked_labels[q]`` is in ranked order with padding (``mask`` False)
    at the end; the ideal ordering is computed over the valid labels only.
    """
    labels = np.where(mask, ranked_labels, 0).astype(np.float64)
    n, width = labels.shape
    gains = 2.0**labels - 1.0
    ideal = -np.sort(-gains, axis=1)
    disc = _discounts(width)
    r = gains / 2.0**MAX_LABEL
    not_stopped = np.concatenate([np.ones((n, 1)), np.cumprod(1.0 - r, axis=1)[:, :-1]], axis=1)
    err_terms = r * not_stopped / np.arange(1, width + 1)
    out: dict[str, dict[int, np.ndarray]] = {"ndcg": {}, "err": {}}
    for k in cutoffs:
        kk = min(k, width)
        dcg = (gains[:, :kk] * disc[:kk]).sum(axis=1)
        idcg = (ideal[:, :kk] * disc[:kk]).sum(axis=1)
        out["ndcg"][k] = np.divide(dcg, idcg, out=np.zeros(n), where=idcg > 0)
        out["err"][k] = err_terms[:, :kk].sum(axis=1)
    return out


def evaluate_scores(dataset: Dataset, scores: np.ndarray, cutoffs=CUTOFFS) -> dict[str, dict[int, np.ndarray]]:
    """Rank each query's candidates by ``scores`` (padded, ties by index) and score them on true labels."""
    padded = dataset.padded
    s = np.where(padded.mask, scores, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")
    ranked = np.take_along_axis(padded.labels, order, axis=1)
    mask = np.take_along_axis(padded.mask, order, axis=1)
    return batch_metrics(ranked, mask, cutoffs)


def fisher_randomization_test(per_query_a, per_query_b, n_permutations: int = 10_000, rng=None) -> float:
    """Two-sided paired sign-flip test on per-query differences.

    Returns ``(1 + #{|mean flipped diff| >= |observed|}) / (1 + n_permutations)``.
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"per-query arrays must have equal 1-d shapes, got {a.shape} and {b.shape}")
    if len(a) < 1:
        raise ValueError("need at least one query")
    if isinstance(n_permutations, bool) or int(n_permutations) != n_permutations or n_permutations < 1:
        raise ValueError("n_permutations must be a positive integer")
    rng = np.random.default_rng(rng)
    diff = a - b
    observed = abs(diff.mean())
    tol = 1e-12 * max(1.0, observed)
    hits = 0
    chunk = max(1, 2_000_000 // len(diff))
    remaining = int(n_permutations)
    while remaining:
        m = min(chunk, remaining)
        signs = rng.integers(0, 2, size=(m, len(diff))) * 2 - 1
        hits += int(np.count_nonzero(np.abs(signs @ diff) / len(diff) >= observed - tol))
        remaining -= m
    return (1 + hits) / (1 + n_permutations)


@dataclass
class SystemResult:
    """Metric values of one system over its repeats.

    ``per_query[metric][k]`` has shape ``(n_repeats, n_queries)``.
    """

    name: str
    per_query: dict[str, dict[int, np.ndarray]]
    p_values: dict[str, dict[int, float]] = field(default_factory=dict)

    def repeat_means(self, metric: str, k: int) -> np.ndarray:
        return self.per_query[metric][k].mean(axis=1)

    def mean(self, metric: str, k: int) -> float:
        return float(self.repeat_means(metric, k).mean())

    def std(self, metric: str, k: int) -> float:
        return float(self.repeat_means(metric, k).std())


@dataclass
class MetricReport:
    systems: dict[str, SystemResult]
    baseline: str | None = None
    cutoffs: tuple[int, ...] = CUTOFFS
    records: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        rows = []
        for name, res in self.systems.items():
            for metric in METRICS:
                for k in self.cutoffs:
                    p = res.p_values.get(metric, {}).get(k)
                    rows.append(
                        {
                            "system": name,
                            "metric": metric,
                            "cutoff": k,
                            "mean": res.mean(metric, k),
                            "std": res.std(metric, k),
                            "p_vs_baseline": "" if p is None else p,
                        }
                    )
        return rows

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, ["system", "metric", "cutoff", "mean", "std", "p_vs_baseline"])
        writer.writeheader()
        writer.writerows(self.rows())
        return out.getvalue()

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "cutoffs": list(self.cutoffs),
            "systems": {
                name: {
                    "mean": {m: {str(k): res.mean(m, k) for k in self.cutoffs} for m in METRICS},
                    "std": {m: {str(k): res.std(m, k) for k in self.cutoffs} for m in METRICS},
                    "p_vs_baseline": {m: {str(k): v for k, v in ps.items()} for m, ps in res.p_values.items()},
                    "per_query": {m: {str(k): res.per_query[m][k].tolist() for k in self.cutoffs} for m in METRICS},
                }
                for name, res in self.systems.items()
            },
        }

    def save(self, csv_path, json_path) -> None:
        atomic_write_text(csv_path, self.to_csv())
        atomic_write_json(json_path, self.to_dict())
