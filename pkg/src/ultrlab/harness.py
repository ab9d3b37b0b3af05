"""Experiment runner for the three learning paradigms.

``off``  learns from a fixed click log produced by a weak production ranker.
``ons``  shows lists sampled from a Plackett-Luce model of the current ranker.
``ond``  shows the current ranker's deterministic top results.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import bandit, counterfactual as cf
from ._io import atomic_write_json, atomic_write_text
from .batch import SessionBatch
from .data import Dataset, generate_synthetic, normalize_features, parse_letor, split_dataset
from .metrics import CUTOFFS, METRICS, MetricReport, SystemResult, evaluate_scores, fisher_randomization_test
from .ranker import RankerParams, forward, init_params, sgd_update
from .simulator import ClickLog, ClickModel, DISPLAY_CUTOFF, estimate_propensity_by_randomization, sample_clicks

log = logging.getLogger(__name__)

COUNTERFACTUAL = ("na", "ipw", "rem", "dla", "paird")
PERTURBATION = ("dbgd", "mgd", "nsgd")
BANDIT = PERTURBATION + ("pdgd",)
ALGORITHMS = COUNTERFACTUAL + BANDIT
PARADIGMS = ("off", "ons", "ond")

VALIDITY_RULE = (
    "counterfactual learners (na, ipw, rem, dla, paird) and pdgd run under off, ons and ond; "
    "dbgd, mgd and nsgd need online control of the displayed lists and run under ons and ond only"
)

DEFAULT_HYPER = {
    "delta": 1.0,
    "alpha": 0.01,
    "n_candidates": 4,
    "history_size": 10,
    "em_smoothing": 0.05,
    "clip_max": 10.0,
    "paird_step": 0.05,
    "paird_regularization": 1.0,
    "ipw_clip": None,
    "dla_propensity_lr": None,
}


class ConfigError(ValueError):
    pass


def is_valid_pair(algorithm: str, paradigm: str) -> bool:
    if algorithm not in ALGORITHMS or paradigm not in PARADIGMS:
        return False
    return not (algorithm in PERTURBATION and paradigm == "off")


def check_pair(algorithm: str, paradigm: str) -> None:
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if paradigm not in PARADIGMS:
        raise ConfigError(f"unknown paradigm {paradigm!r}; choose from {PARADIGMS}")
    if not is_valid_pair(algorithm, paradigm):
        raise ConfigError(f"unsupported pairing ({algorithm}, {paradigm}): {VALIDITY_RULE}")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_queries: int = 1000
    docs_per_query: int = 25
    feature_dim: int = 20
    seed: int = 1
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic", "letor"):
            raise ConfigError("data.source must be 'synthetic' or 'letor'")
        if self.source == "letor" and not all((self.train, self.valid, self.test)):
            raise ConfigError("letor data needs train, valid and test paths")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    paradigm: str
    data: DataConfig = DataConfig()
    ranker: str = "linear"
    hidden: tuple[int, ...] = (64, 32)
    layer_norm: bool = False
    learning_rate: float = 0.05
    batch_size: int = 32
    n_steps: int = 3000
    eval_interval: int = 100
    eta: float = 1.0
    epsilon: float = 0.1
    estimation_eta: float = 1.0
    propensity: str = "randomization"
    propensity_sessions: int = 200_000
    production_fraction: float = 0.01
    log_sessions: int = 100_000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    hyper: tuple[tuple[str, object], ...] = ()
    name: str | None = None

    def __post_init__(self):
        check_pair(self.algorithm, self.paradigm)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        hyper = dict(self.hyper)
        unknown = set(hyper) - set(DEFAULT_HYPER)
        if unknown:
            raise ConfigError(f"unknown hyperparameters {sorted(unknown)}; known: {sorted(DEFAULT_HYPER)}")
        object.__setattr__(self, "hyper", tuple(sorted(hyper.items())))
        if self.ranker not in ("linear", "mlp"):
            raise ConfigError("ranker must be 'linear' or 'mlp'")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_steps < 0 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be >= 1 and n_steps >= 0")
        if self.propensity not in ("randomization", "oracle"):
            raise ConfigError("propensity must be 'randomization' or 'oracle'")
        if not 0 < self.production_fraction <= 1:
            raise ConfigError("production_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        ClickModel(eta=self.eta, epsilon=self.epsilon)

    @property
    def label(self) -> str:
        return self.name or f"{self.algorithm}_{self.paradigm}"

    def hp(self, key: str):
        return dict(self.hyper).get(key, DEFAULT_HYPER[key])

    def replace(self, **changes) -> "ExperimentConfig":
        if "hyper" in changes and isinstance(changes["hyper"], Mapping):
            changes["hyper"] = tuple(changes["hyper"].items())
        return dataclasses.replace(self, **changes)

    @property
    def click_model(self) -> ClickModel:
        return ClickModel(eta=self.eta, epsilon=self.epsilon)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["seeds"] = list(self.seeds)
        d["hyper"] = dict(self.hyper)
        return d

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "ExperimentConfig":
        """Strict construction: unknown keys raise :class:`ConfigError`."""
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for required in ("algorithm", "paradigm"):
            if required not in d:
                raise ConfigError(f"config is missing {required!r}")
        data = dict(d.pop("data", {}) or {})
        data_known = {f.name for f in dataclasses.fields(DataConfig)}
        bad = set(data) - data_known
        if bad:
            raise ConfigError(f"unknown data keys {sorted(bad)}")
        if base_dir is not None:
            for key in ("train", "valid", "test"):
                if data.get(key):
                    data[key] = str((Path(base_dir) / data[key]).resolve())
        hyper = d.pop("hyper", {}) or {}
        if not isinstance(hyper, Mapping):
            raise ConfigError("hyper must be an object")
        for key in ("hidden", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(data=DataConfig(**data), hyper=tuple(hyper.items()), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# ------------------------------------------------------------------ environment


@dataclass(frozen=True)
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset


@lru_cache(maxsize=8)
def load_splits(data: DataConfig) -> Splits:
    if data.source == "synthetic":
        full = generate_synthetic(data.n_queries, data.docs_per_query, data.feature_dim, data.seed)
        train, valid, test = split_dataset(full)
    else:
        train = parse_letor(Path(data.train), "train")
        valid = parse_letor(Path(data.valid), "valid")
        test = parse_letor(Path(data.test), "test")
        dim = max(train.feature_dim, valid.feature_dim, test.feature_dim)
        train, valid, test = (_pad_dim(d, dim) for d in (train, valid, test))
    if data.normalize:
        train, valid, test = normalize_features(train, valid, test)
    return Splits(train, valid, test)


def _pad_dim(d: Dataset, dim: int) -> Dataset:
    if d.feature_dim == dim:
        return d
    from .data import Query

    qs = tuple(Query(q.query_id, q.doc_ids, np.pad(q.features, ((0, 0), (0, dim - d.feature_dim))), q.labels) for q in d.queries)
    return Dataset(qs, dim, d.split_tag)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def train_production_ranker(
    train: Dataset,
    fraction: float,
    seed: int,
    n_iter: int = 2000,
    batch_size: int = 256,
    learning_rate: float = 0.05,
    l2: float = 1e-3,
) -> RankerParams:
    """Linear ranker fitted by SGD on the pairwise hinge loss (margin 1).

    Uses ``ceil(fraction * n_queries)`` queries sampled without replacement.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = _rng(seed, 101)
    n = max(1, math.ceil(fraction * len(train) - 1e-9))
    picked = np.sort(rng.choice(len(train), size=n, replace=False))
    diffs = []
    for qi in picked:
        q = train[int(qi)]
        hi, lo = np.nonzero(q.labels[:, None] > q.labels[None, :])
        if len(hi):
            diffs.append(q.features[hi] - q.features[lo])
    if not diffs:
        raise ValueError("sampled queries contain no query with two distinct labels; cannot train a pairwise ranker")
    diffs = np.concatenate(diffs)
    w = np.zeros(train.feature_dim)
    for t in range(n_iter):
        idx = rng.integers(len(diffs), size=min(batch_size, len(diffs)))
        d = diffs[idx]
        active = d @ w < 1.0
        grad = l2 * w - d[active].sum(axis=0) / len(idx)
        w -= learning_rate * grad
    return RankerParams("linear", [w[:, None]], [np.zeros(1)])


def _rank_padded(scores, mask, width=DISPLAY_CUTOFF):
    keyed = np.where(mask, scores, -np.inf)
    order = np.argsort(-keyed, axis=1, kind="stable")[:, :width]
    valid = np.take_along_axis(mask, order, axis=1)
    return np.where(valid, order, -1)


def _clicks_for(dataset: Dataset, qidx, displayed, model: ClickModel, rng):
    padded = dataset.padded
    safe = np.where(displayed >= 0, displayed, 0)
    labels = np.where(displayed >= 0, padded.labels[qidx[:, None], safe], -1)
    return sample_clicks(model, labels, rng)


def generate_click_log(production: RankerParams, train: Dataset, model: ClickModel, n_sessions: int, rng) -> ClickLog:
    """Uniformly sampled queries, shown in production order, with simulated clicks."""
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    padded = train.padded
    ranked = _rank_padded(forward(production, padded.features, keep_cache=False), padded.mask)
    qidx = rng.integers(len(train), size=n_sessions)
    displayed = ranked[qidx]
    clicks = _clicks_for(train, qidx, displayed, model, rng)
    return ClickLog(qidx, displayed, clicks, "logged")


@dataclass(frozen=True)
class Environment:
    splits: Splits
    production: RankerParams
    log: ClickLog
    propensity: cf.PropensityEstimate


def build_environment(config: ExperimentConfig, seed: int) -> Environment:
    return _environment(
        config.data, config.eta, config.epsilon, config.production_fraction, config.log_sessions,
        config.propensity, config.estimation_eta, config.propensity_sessions, int(seed),
    )


@lru_cache(maxsize=32)
def _environment(data, eta, epsilon, production_fraction, log_sessions, propensity_mode, estimation_eta, propensity_sessions, seed):
    splits = load_splits(data)
    propensity = None
    if propensity_mode == "randomization":
        weights = _randomized_propensity(data, estimation_eta, epsilon, propensity_sessions, seed)
        propensity = cf.PropensityEstimate(weights, "randomization")
    return _assemble(splits, eta, epsilon, production_fraction, log_sessions, propensity_mode, estimation_eta, propensity_sessions, seed, propensity)


def _assemble(splits, eta, epsilon, production_fraction, log_sessions, propensity_mode, estimation_eta, propensity_sessions, seed, propensity=None):
    model = ClickModel(eta=eta, epsilon=epsilon)
    production = train_production_ranker(splits.train, production_fraction, seed)
    click_log = generate_click_log(production, splits.train, model, log_sessions, _rng(seed, 102))
    if propensity is None:
        if propensity_mode == "oracle":
            propensity = cf.PropensityEstimate(ClickModel(eta=estimation_eta, epsilon=epsilon).examination, "oracle")
        else:
            weights = estimate_propensity_by_randomization(
                splits.train, ClickModel(eta=estimation_eta, epsilon=epsilon), propensity_sessions, _rng(seed, 103)
            )
            propensity = cf.PropensityEstimate(weights, "randomization")
    return Environment(splits, production, click_log, propensity)


def environment_from_splits(splits: Splits, config: ExperimentConfig, seed: int) -> Environment:
    """Like :func:`build_environment` but for in-memory splits (uncached)."""
    return _assemble(
        splits, config.eta, config.epsilon, config.production_fraction, config.log_sessions,
        config.propensity, config.estimation_eta, config.propensity_sessions, int(seed),
    )


@lru_cache(maxsize=16)
def _randomized_propensity(data, eta, epsilon, n_sessions, seed):
    splits = load_splits(data)
    return estimate_propensity_by_randomization(splits.train, ClickModel(eta=eta, epsilon=epsilon), n_sessions, _rng(seed, 103))


# ------------------------------------------------------------------------ runs


@dataclass
class RunRecord:
    config: ExperimentConfig
    seed: int
    trace: list[tuple[int, float]]
    selected_step: int
    params: RankerParams
    test: dict[str, dict[int, np.ndarray]]
    wall_clock: float
    diagnostics: dict = field(default_factory=dict)
    learner_state: dict = field(default_factory=dict)

    def test_mean(self, metric: str = "ndcg", k: int = 10) -> float:
        return float(self.test[metric][k].mean())

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "trace": [{"step": s, "valid_ndcg@10": v} for s, v in self.trace],
            "selected_step": self.selected_step,
            "checkpoint": self.params.to_dict(),
            "learner_state": self.learner_state,
            "test": {m: {str(k): {"mean": float(v.mean()), "per_query": v.tolist()} for k, v in per.items()} for m, per in self.test.items()},
            "wall_clock": self.wall_clock,
            "diagnostics": self.diagnostics,
        }

    def trace_rows(self) -> list[dict]:
        base = {"algorithm": self.config.algorithm, "paradigm": self.config.paradigm, "seed": self.seed}
        rows = [{**base, "step": s, "metric": "valid_ndcg", "cutoff": 10, "value": v} for s, v in self.trace]
        for m in METRICS:
            for k in sorted(self.test[m]):
                rows.append({**base, "step": self.selected_step, "metric": f"test_{m}", "cutoff": k, "value": float(self.test[m][k].mean())})
        return rows

    def save(self, json_path, csv_path) -> None:
        atomic_write_json(json_path, self.to_dict())
        atomic_write_text(csv_path, rows_to_csv(self.trace_rows()))


TRACE_COLUMNS = ("algorithm", "paradigm", "seed", "step", "metric", "cutoff", "value")


def rows_to_csv(rows) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, TRACE_COLUMNS)
    w.writeheader()
    w.writerows(rows)
    return out.getvalue()


def _valid_ndcg10(params, dataset: Dataset) -> float:
    s = forward(params, dataset.padded.features, keep_cache=False)
    return float(evaluate_scores(dataset, s, cutoffs=(10,))["ndcg"][10].mean())


class _Learner:
    """Mutable per-run learner state around the functional update rules."""

    def __init__(self, config: ExperimentConfig, env: Environment, rng):
        self.config = config
        self.env = env
        self.rng = rng
        self.prop_model = cf.PropensityModel()
        self.paird = cf.PairDState(clip_max=config.hp("clip_max"))
        self.perturb = bandit.PerturbationState(
            delta=config.hp("delta"),
            alpha=config.hp("alpha"),
            n_candidates=1 if config.algorithm == "dbgd" else int(config.hp("n_candidates")),
            history_size=int(config.hp("history_size")),
        )

    def batch_update(self, params, batch: SessionBatch):
        c, lr, alg = self.config, self.config.learning_rate, self.config.algorithm
        if alg == "na":
            return cf.na_update(params, batch, lr)
        if alg == "ipw":
            return cf.ipw_update(params, batch, self.env.propensity, lr, c.hp("ipw_clip"))
        if alg == "rem":
            params, self.prop_model = cf.rem_update(params, self.prop_model, batch, lr, c.hp("em_smoothing"))
            return params
        if alg == "dla":
            prop_lr = c.hp("dla_propensity_lr")
            # the propensity tower trails the ranker; equal rates let it chase the ranker's own bias
            prop_lr = 0.1 * lr if prop_lr is None else prop_lr
            params, self.prop_model = cf.dla_update(params, self.prop_model, batch, lr, prop_lr)
            return params
        if alg == "paird":
            params, self.paird = cf.paird_update(params, self.paird, batch, lr, c.hp("paird_step"), c.hp("paird_regularization"))
            return params
        if alg == "pdgd":
            return bandit.pdgd_batch_update(params, batch, lr)
        raise AssertionError(alg)

    def state(self) -> dict:
        alg = self.config.algorithm
        if alg == "ipw":
            return {"propensity": self.env.propensity.weights.tolist()}
        if alg in ("rem", "dla"):
            return self.prop_model.to_dict()
        if alg == "paird":
            return self.paird.to_dict()
        if alg == "nsgd":
            return {"history": [h.tolist() for h in self.perturb.history]}
        return {}


def sessions_per_step(config: ExperimentConfig) -> int:
    """Bandit learners learn from one session per step; the others from ``batch_size``."""
    return 1 if config.algorithm in BANDIT else config.batch_size


def _online_batch(params, train: Dataset, config: ExperimentConfig, rng) -> SessionBatch:
    padded = train.padded
    qidx = rng.integers(len(train), size=sessions_per_step(config))
    scores = forward(params, padded.features[qidx], keep_cache=False)
    mask = padded.mask[qidx]
    if config.paradigm == "ons":
        displayed = bandit.plackett_luce_sample_batch(scores, mask, rng)
    else:
        displayed = _rank_padded(scores, mask)
    clicks = _clicks_for(train, qidx, displayed, config.click_model, rng)
    return SessionBatch.from_log(train, ClickLog(qidx, displayed, clicks, "online"))


def run(config: ExperimentConfig, seed: int | None = None, env: Environment | None = None) -> RunRecord:
    """Train one learner and report test metrics of the best validation checkpoint.

    ``env`` overrides the environment normally built from ``config.data``.
    """
    check_pair(config.algorithm, config.paradigm)
    seed = config.seeds[0] if seed is None else int(seed)
    t0 = time.perf_counter()
    env = build_environment(config, seed) if env is None else env
    train, valid, test = env.splits.train, env.splits.valid, env.splits.test
    rng = _rng(seed, 200, ALGORITHMS.index(config.algorithm), PARADIGMS.index(config.paradigm))
    params = init_params(config.ranker, train.feature_dim, config.hidden, config.layer_norm, _rng(seed, 201))
    learner = _Learner(config, env, rng)

    best = params.copy()
    best_val = _valid_ndcg10(params, valid)
    best_step = 0
    trace = [(0, best_val)]

    perturb_step = {"dbgd": bandit.dbgd_step, "mgd": bandit.mgd_step, "nsgd": bandit.nsgd_step}.get(config.algorithm)
    padded = train.padded
    for step in range(1, config.n_steps + 1):
        if perturb_step is not None:
            qi = int(rng.integers(len(train)))
            n = int(padded.n_docs[qi])
            labels = padded.labels[qi, :n]

            def click_env(docs, labels=labels):
                return sample_clicks(config.click_model, labels[docs][:DISPLAY_CUTOFF], rng)

            params = perturb_step(params, learner.perturb, padded.features[qi, :n], click_env, rng, config.paradigm)
        else:
            if config.paradigm == "off":
                idx = rng.integers(len(env.log), size=sessions_per_step(config))
                batch = SessionBatch.from_log(train, env.log.take(idx))
            else:
                batch = _online_batch(params, train, config, rng)
            params = learner.batch_update(params, batch)
        if step % config.eval_interval == 0 or step == config.n_steps:
            v = _valid_ndcg10(params, valid)
            trace.append((step, v))
            if v > best_val:
                best, best_val, best_step = params.copy(), v, step

    test_scores = forward(best, test.padded.features, keep_cache=False)
    diagnostics = {"nsgd_fallbacks": learner.perturb.fallbacks} if config.algorithm == "nsgd" else {}
    return RunRecord(
        config=config,
        seed=seed,
        trace=trace,
        selected_step=best_step,
        params=best,
        test=evaluate_scores(test, test_scores),
        wall_clock=time.perf_counter() - t0,
        diagnostics=diagnostics,
        learner_state=learner.state(),
    )


def _seeds_for(config: ExperimentConfig, n_repeats: int) -> list[int]:
    seeds = list(config.seeds[:n_repeats])
    while len(seeds) < n_repeats:
        seeds.append(seeds[-1] + 1)
    return seeds


def repeat_and_compare(
    configs: Sequence[ExperimentConfig] | Mapping[str, ExperimentConfig],
    n_repeats: int,
    baseline_name: str | None = None,
    n_permutations: int = 10_000,
    workers: int = 1,
    seed: int = 0,
) -> MetricReport:
    """Run every config ``n_repeats`` times and test each against the baseline.

    p-values come from the Fisher randomization test on per-query values
    pooled over repeats (repeat ``r`` of every system uses the same seed).
    """
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    if not isinstance(configs, Mapping):
        configs = {c.label: c for c in configs}
    configs = dict(configs)
    if baseline_name is not None and baseline_name not in configs:
        raise ValueError(f"baseline {baseline_name!r} is not among {sorted(configs)}")
    first = next(iter(configs.values()))
    for name, c in configs.items():
        if c.data != first.data or (c.eta, c.epsilon) != (first.eta, first.epsilon):
            raise ValueError(f"config {name!r} uses a different dataset or click environment than {first.label!r}")

    jobs = [(name, c, s) for name, c in configs.items() for s in _seeds_for(c, n_repeats)]
    if workers > 1:
        from joblib import Parallel, delayed

        records = Parallel(n_jobs=workers)(delayed(run)(c, s) for _, c, s in jobs)
    else:
        records = [run(c, s) for _, c, s in jobs]

    by_name: dict[str, list[RunRecord]] = {}
    for (name, _, _), rec in zip(jobs, records):
        by_name.setdefault(name, []).append(rec)

    systems = {}
    for name, recs in by_name.items():
        per_query = {m: {k: np.stack([r.test[m][k] for r in recs]) for k in CUTOFFS} for m in METRICS}
        systems[name] = SystemResult(name, per_query)
    if baseline_name is not None:
        base = systems[baseline_name]
        for name, res in systems.items():
            if name == baseline_name:
                continue
            res.p_values = {
                m: {
                    k: fisher_randomization_test(res.per_query[m][k].ravel(), base.per_query[m][k].ravel(), n_permutations, _rng(seed, 300, k))
                    for k in CUTOFFS
                }
                for m in METRICS
            }
    return MetricReport(systems, baseline_name, records=by_name)
