from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .simulator import ClickLog


@dataclass(frozen=True)
class SessionBatch:
    """Padded arrays for ``B`` sessions of at most ``K`` displayed documents.

    ``features``/``labels``/``clicks``/``mask`` are in display order. The
    ``candidate_*`` arrays hold every candidate of each session's query (PDGD
    needs them for Plackett-Luce list probabilities); ``displayed`` indexes
    into them.
    """

    features: np.ndarray
    labels: np.ndarray
    clicks: np.ndarray
    mask: np.ndarray
    displayed: np.ndarray
    candidate_features: np.ndarray
    candidate_mask: np.ndarray

    def __len__(self) -> int:
        return self.clicks.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.broadcast_to(np.arange(self.clicks.shape[1]), self.clicks.shape)

    @classmethod
    def from_log(cls, dataset: Dataset, log: ClickLog) -> "SessionBatch":
        padded = dataset.padded
        q = log.query_index
        disp = log.displayed
        mask = disp >= 0
        safe = np.where(mask, disp, 0)
        features = padded.features[q[:, None], safe] * mask[..., None]
        labels = np.where(mask, padded.labels[q[:, None], safe], 0)
        return cls(
            features=features,
            labels=labels,
            clicks=log.clicks & mask,
            mask=mask,
            displayed=disp,
            candidate_features=padded.features[q],
            candidate_mask=padded.mask[q],
        )

    @classmethod
    def from_arrays(cls, features, clicks, mask=None, labels=None) -> "SessionBatch":
        """Build a batch without candidate information (counterfactual learners only)."""
        features = np.asarray(features, dtype=np.float64)
        clicks = np.asarray(clicks, dtype=bool)
        mask = np.ones(clicks.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        labels = np.zeros(clicks.shape, dtype=np.int64) if labels is None else np.asarray(labels)
        displayed = np.where(mask, np.broadcast_to(np.arange(clicks.shape[1]), clicks.shape), -1)
        return cls(features, labels, clicks & mask, mask, displayed, features, mask)
