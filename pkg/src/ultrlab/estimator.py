"""scikit-learn style wrappers around the functional learners.

Ranking data is query-grouped, so ``fit`` takes :class:`~ultrlab.data.Dataset`
objects rather than a flat ``(X, y)``. ``predict`` works on plain feature
arrays, which keeps the estimators usable inside ordinary numpy code.
Feature scaling is left to the caller (see :func:`ultrlab.data.normalize_features`).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features
from .data import Dataset, split_dataset
from .harness import ExperimentConfig, Splits, environment_from_splits, run, train_production_ranker
from .metrics import evaluate_scores
from .ranker import forward, rank_scores


def _check_dataset(d, name: str) -> Dataset:
    if not isinstance(d, Dataset):
        raise TypeError(f"{name} must be a Dataset, got {type(d).__name__}")
    if len(d) == 0:
        raise ValueError(f"{name} has no queries")
    return d


class _ScoringMixin:
    def predict(self, X) -> np.ndarray:
        """Scores for a ``(n_docs, n_features)`` array (any leading shape works)."""
        check_is_fitted(self, "params_")
        x = np.asarray(X, dtype=np.float64)
        if x.ndim == 2:
            x = check_features(x, self.n_features_in_)
        elif x.ndim < 2 or x.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected trailing dimension {self.n_features_in_}, got shape {x.shape}")
        return forward(self.params_, x, keep_cache=False)

    def rank(self, X) -> np.ndarray:
        """Document indices of one query, best first (ties keep input order)."""
        return rank_scores(self.predict(X))

    def score(self, dataset: Dataset, y=None, k: int = 10) -> float:
        """Mean nDCG@k over the queries of ``dataset``."""
        _check_dataset(dataset, "dataset")
        s = self.predict(dataset.padded.features)
        return float(evaluate_scores(dataset, s, cutoffs=(k,))["ndcg"][k].mean())


class UnbiasedRanker(_ScoringMixin, BaseEstimator):
    """Train a ranker from simulated clicks with one of the nine learners.

    ``fit(train, valid)`` builds the click environment on ``train`` (a weak
    production ranker, its click log, and a randomization propensity
    estimate), trains for ``n_steps`` and keeps the checkpoint with the best
    validation nDCG@10. Without ``valid`` the last tenth of ``train`` is held out.
    """

    def __init__(
        self,
        algorithm="ipw",
        paradigm="off",
        ranker="linear",
        hidden=(64, 32),
        layer_norm=False,
        learning_rate=0.05,
        batch_size=32,
        n_steps=3000,
        eval_interval=100,
        eta=1.0,
        epsilon=0.1,
        estimation_eta=1.0,
        propensity="randomization",
        propensity_sessions=200_000,
        production_fraction=0.01,
        log_sessions=100_000,
        hyper=None,
        random_state=0,
    ):
        self.algorithm = algorithm
        self.paradigm = paradigm
        self.ranker = ranker
        self.hidden = hidden
        self.layer_norm = layer_norm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.eval_interval = eval_interval
        self.eta = eta
        self.epsilon = epsilon
        self.estimation_eta = estimation_eta
        self.propensity = propensity
        self.propensity_sessions = propensity_sessions
        self.production_fraction = production_fraction
        self.log_sessions = log_sessions
        self.hyper = hyper
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return ExperimentConfig(
            algorithm=self.algorithm,
            paradigm=self.paradigm,
            ranker=self.ranker,
            hidden=tuple(self.hidden),
            layer_norm=self.layer_norm,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            n_steps=self.n_steps,
            eval_interval=self.eval_interval,
            eta=self.eta,
            epsilon=self.epsilon,
            estimation_eta=self.estimation_eta,
            propensity=self.propensity,
            propensity_sessions=self.propensity_sessions,
            production_fraction=self.production_fraction,
            log_sessions=self.log_sessions,
            seeds=(seed,),
            hyper=tuple((self.hyper or {}).items()),
        )

    def fit(self, X: Dataset, y=None, valid: Dataset | None = None, test: Dataset | None = None):
        train = _check_dataset(X, "train")
        if valid is None:
            train, valid, _ = split_dataset(train, (0.9, 0.1, 0.0))
        _check_dataset(valid, "valid")
        for d in (valid, test):
            if d is not None and d.feature_dim != train.feature_dim:
                raise ValueError(f"feature_dim mismatch: train {train.feature_dim}, {d.split_tag} {d.feature_dim}")
        config = self._config()
        env = environment_from_splits(Splits(train, valid, valid if test is None else test), config, config.seeds[0])
        self.record_ = run(config, env=env)
        self.params_ = self.record_.params
        self.propensity_ = env.propensity.weights.copy()
        self.n_features_in_ = train.feature_dim
        return self


class ProductionRanker(_ScoringMixin, BaseEstimator):
    """Linear pairwise-hinge ranker trained on a random fraction of the queries."""

    def __init__(self, fraction=1.0, n_iter=2000, batch_size=256, learning_rate=0.05, l2=1e-3, random_state=0):
        self.fraction = fraction
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2 = l2
        self.random_state = random_state

    def fit(self, X: Dataset, y=None):
        train = _check_dataset(X, "train")
        seed = 0 if self.random_state is None else int(self.random_state)
        self.params_ = train_production_ranker(
            train, self.fraction, seed, self.n_iter, self.batch_size, self.learning_rate, self.l2
        )
        self.n_features_in_ = train.feature_dim
        return self

    @property
    def coef_(self) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.params_.weights[0][:, 0].copy()
