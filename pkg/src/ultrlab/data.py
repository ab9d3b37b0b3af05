"""Datasets of queries with graded candidate documents.

Reads and writes the SVMrank/LETOR text format, generates seeded synthetic
benchmarks with a hidden linear teacher, and applies train-fitted min-max
feature scaling.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np
from sklearn.preprocessing import MinMaxScaler

MAX_LABEL = 4
SPLITS = ("train", "valid", "test")

_QID_RE = re.compile(r"^qid:(\S+)$")


class LetorParseError(ValueError):
    """Raised for a malformed LETOR line; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class LabelRangeError(LetorParseError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Query:
    """One query and its candidate documents, stored column-wise."""

    query_id: str
    doc_ids: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError(f"query {self.query_id!r} needs at least one candidate")
        if labels.shape != (features.shape[0],) or len(self.doc_ids) != features.shape[0]:
            raise ValueError(f"query {self.query_id!r}: doc_ids, features and labels disagree in length")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError(f"query {self.query_id!r} has duplicate doc_ids")
        if labels.min() < 0 or labels.max() > MAX_LABEL:
            raise LabelRangeError(f"query {self.query_id!r} has labels outside 0..{MAX_LABEL}")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def candidates(self) -> list[Document]:
        return [
            Document(d, self.features[i], int(self.labels[i]))
            for i, d in enumerate(self.doc_ids)
        ]

    def __eq__(self, other):
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and self.doc_ids == other.doc_ids
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    queries: tuple[Query, ...]
    feature_dim: int
    split_tag: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        seen = set()
        for q in self.queries:
            if q.features.shape[1] != self.feature_dim:
                raise ValueError(
                    f"query {q.query_id!r} has {q.features.shape[1]} features, expected {self.feature_dim}"
                )
            if q.query_id in seen:
                raise ValueError(f"duplicate query_id {q.query_id!r}")
            seen.add(q.query_id)

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, i: int) -> Query:
        return self.queries[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.split_tag == other.split_tag
            and self.queries == other.queries
        )

    __hash__ = None

    @property
    def n_documents(self) -> int:
        return sum(len(q) for q in self.queries)

    @cached_property
    def padded(self) -> "PaddedDataset":
        return PaddedDataset.from_queries(self.queries, self.feature_dim)

    def with_split(self, split_tag: str) -> "Dataset":
        return Dataset(self.queries, self.feature_dim, split_tag)


@dataclass(frozen=True)
class PaddedDataset:
    """Dense (n_queries, max_docs, ...) view used by the vectorized learners.

    Padding slots have zero features, label 0 and ``mask`` False.
    """

    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    n_docs: np.ndarray

    @classmethod
    def from_queries(cls, queries: Sequence[Query], feature_dim: int) -> "PaddedDataset":
        n_docs = np.array([len(q) for q in queries], dtype=np.int64)
        width = int(n_docs.max()) if len(queries) else 0
        features = np.zeros((len(queries), width, feature_dim))
        labels = np.zeros((len(queries), width), dtype=np.int64)
        mask = np.zeros((len(queries), width), dtype=bool)
        for i, q in enumerate(queries):
            features[i, : len(q)] = q.features
            labels[i, : len(q)] = q.labels
            mask[i, : len(q)] = True
        for a in (features, labels, mask, n_docs):
            a.setflags(write=False)
        return cls(features, labels, mask, n_docs)


def parse_letor(stream: TextIO | str | Path, split_tag: str = "train") -> Dataset:
    """Parse SVMrank-format text into a :class:`Dataset`.

    ``stream`` may be an open text stream, a path, or a string holding the
    file contents. Feature ids are 1-based; absent ids become 0.0 and the
    feature dimension is the largest id seen anywhere in the file.
    """
    if isinstance(stream, Path):
        with open(stream) as fh:
            return parse_letor(fh, split_tag)
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    rows: dict[str, list[tuple[str, dict[int, float], int]]] = {}
    max_fid = 0
    for line_no, raw in enumerate(stream, start=1):
        body, _, comment = raw.partition("#")
        tokens = body.split()
        if not tokens:
            continue
        if len(tokens) < 2:
            raise LetorParseError("expected '<label> qid:<id> ...'", line_no)
        try:
            label = int(tokens[0])
        except ValueError:
            try:
                as_float = float(tokens[0])
            except ValueError:
                raise LetorParseError(f"label {tokens[0]!r} is not a number", line_no) from None
            if not as_float.is_integer():
                raise LabelRangeError(f"label {tokens[0]!r} is not an integer grade", line_no)
            label = int(as_float)
        if not 0 <= label <= MAX_LABEL:
            raise LabelRangeError(f"label {label} outside 0..{MAX_LABEL}", line_no)
        m = _QID_RE.match(tokens[1])
        if m is None:
            raise LetorParseError(f"expected qid:<id>, got {tokens[1]!r}", line_no)
        qid = m.group(1)
        feats: dict[int, float] = {}
        for tok in tokens[2:]:
            fid_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LetorParseError(f"malformed feature {tok!r}", line_no)
            try:
                fid = int(fid_s)
                val = float(val_s)
            except ValueError:
                raise LetorParseError(f"malformed feature {tok!r}", line_no) from None
            if fid < 1:
                raise LetorParseError(f"feature id must be positive, got {fid}", line_no)
            feats[fid] = val
            max_fid = max(max_fid, fid)
        docs = rows.setdefault(qid, [])
        doc_id = comment.strip() or f"{qid}-{len(docs)}"
        docs.append((doc_id, feats, label))

    if not rows:
        raise LetorParseError("empty LETOR stream")
    dim = max(max_fid, 1)
    queries = []
    for qid, docs in rows.items():
        x = np.zeros((len(docs), dim))
        for i, (_, feats, _) in enumerate(docs):
            for fid, val in feats.items():
                x[i, fid - 1] = val
        queries.append(Query(qid, tuple(d[0] for d in docs), x, np.array([d[2] for d in docs])))
    return Dataset(tuple(queries), dim, split_tag)


def format_letor(dataset: Dataset) -> str:
    """Inverse of :func:`parse_letor`; writes every feature and the doc_id as a comment."""
    out = io.StringIO()
    for q in dataset.queries:
        for doc_id, x, y in zip(q.doc_ids, q.features, q.labels):
            feats = " ".join(f"{j + 1}:{v!r}" for j, v in enumerate(x.tolist()))
            out.write(f"{int(y)} qid:{q.query_id} {feats} # {doc_id}\n")
    return out.getvalue()


def write_letor(dataset: Dataset, path: str | Path) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, format_letor(dataset))


def generate_synthetic(n_queries: int, docs_per_query: int, feature_dim: int, seed: int) -> Dataset:
    """Gaussian features labelled by a hidden linear teacher.

    Teacher scores are bucketed at the dataset-wide 20/40/60/80 percentiles,
    so each grade 0..4 covers about a fifth of all documents.
    """
    for name, v in (("n_queries", n_queries), ("docs_per_query", docs_per_query), ("feature_dim", feature_dim)):
        if int(v) < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal(feature_dim)
    x = rng.standard_normal((n_queries, docs_per_query, feature_dim))
    scores = x @ teacher
    cuts = np.percentile(scores, [20, 40, 60, 80])
    labels = np.searchsorted(cuts, scores, side="right")
    queries = tuple(
        Query(
            str(qi),
            tuple(f"q{qi}-d{di}" for di in range(docs_per_query)),
            x[qi],
            labels[qi],
        )
        for qi in range(n_queries)
    )
    return Dataset(queries, feature_dim, "train")


def split_dataset(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[Dataset, Dataset, Dataset]:
    """Split queries in file order into train/valid/test."""
    if len(fractions) != 3 or not np.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three numbers summing to 1")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    parts = (
        dataset.queries[:n_train],
        dataset.queries[n_train : n_train + n_valid],
        dataset.queries[n_train + n_valid :],
    )
    return tuple(Dataset(p, dataset.feature_dim, tag) for p, tag in zip(parts, SPLITS))


def _map_features(dataset: Dataset, fn) -> Dataset:
    stacked = np.concatenate([q.features for q in dataset.queries])
    mapped = fn(stacked)
    queries = []
    start = 0
    for q in dataset.queries:
        stop = start + len(q)
        queries.append(Query(q.query_id, q.doc_ids, mapped[start:stop], q.labels))
        start = stop
    return Dataset(tuple(queries), dataset.feature_dim, dataset.split_tag)


def normalize_features(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Min-max scale every split with ranges fitted on ``train`` only.

    Constant train columns map to 0.0; values outside the train range are
    not clipped. Returns ``(train, *others)`` scaled.
    """
    for d in others:
        if d.feature_dim != train.feature_dim:
            raise ValueError(
                f"feature_dim mismatch: train has {train.feature_dim}, {d.split_tag} has {d.feature_dim}"
            )
    scaler = MinMaxScaler(clip=False)
    scaler.fit(np.concatenate([q.features for q in train.queries]))
    constant = scaler.data_range_ == 0
    scaler.scale_[constant] = 0.0
    scaler.min_[constant] = 0.0
    return tuple(_map_features(d, scaler.transform) for d in (train, *others))


def concat_queries(datasets: Iterable[Dataset], split_tag: str = "train") -> Dataset:
    datasets = list(datasets)
    return Dataset(tuple(q for d in datasets for q in d.queries), datasets[0].feature_dim, split_tag)
