"""Synthetic accuracy and welfare studies.

A study generates a ground-truth model, simulates pairwise and
best-of-three training data from it, fits several methods and scores
their predictions of a held-out pair given the ranking of four other
items.

Methods
-------
oracle
    The ground-truth model itself.
probit_pairwise, probit_triple
    Maximum-likelihood probit fits on pairwise or best-of-three data.
probit_moments
    The moment estimator of :func:`estimate_model` on the triple counts.
logit
    Plackett-Luce utilities fitted on the best-of-three rankings.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit, logsumexp

from .aggregator import CountsSource, estimate_model
from .errors import InputError, NoAcceptedSamples, RegimeUnsatisfiable
from .estimator3 import TripleCounts
from .mle import fit_probit_pairwise_mle, fit_probit_triple_mle, sample_pairwise_wins
from .model import ProbitModel, centering, normalize
from .probability import PERM_ORDERS, all_triples, observability, pairwise_probability
from .sampling import (
    WelfareQuery,
    conditional_pair_probability,
    covariance_factor,
    expected_max_welfare,
    rank_rows,
    sample_triple_counts,
)

MU_KINDS = ("zero", "random")
SIGMA_KINDS = ("identity", "random_diagonal", "bin", "random_full")
METHODS = ("oracle", "logit", "probit_pairwise", "probit_triple", "probit_moments")
DEFAULT_METHODS = ("oracle", "logit", "probit_pairwise", "probit_triple")
# smallest eigenvalue kept when repairing the block sign pattern, relative to n
BIN_FLOOR = 0.003
ZERO_MEAN_GAMMA_FLOOR = 1e-4
REGIME_RETRIES = 20
DEFAULT_TRAINING_BUDGET = 100_000
LOGIT_RIDGE = 1e-9
LOGIT_RIDGE_DISCONNECTED = 1e-3


class DisconnectedComparisons(UserWarning):
    """Some items are never compared with the rest."""


# ----------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class SyntheticRegime:
    mu_kind: str = "zero"
    sigma_kind: str = "identity"
    n: int = 8
    seed: int = 0
    gamma_floor: float | None = None

    def __post_init__(self):
        if self.mu_kind not in MU_KINDS:
            raise InputError(f"mu_kind must be one of {MU_KINDS}")
        if self.sigma_kind not in SIGMA_KINDS:
            raise InputError(f"sigma_kind must be one of {SIGMA_KINDS}")
        if self.n < 3:
            raise InputError("regimes need at least 3 items")

    @property
    def effective_gamma_floor(self) -> float:
        # random means routinely make some orderings astronomically rare
        if self.gamma_floor is not None:
            return self.gamma_floor
        return ZERO_MEAN_GAMMA_FLOOR if self.mu_kind == "zero" else 0.0

    @property
    def label(self) -> str:
        return f"{self.mu_kind}/{self.sigma_kind}"


def _raw_sigma(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "identity":
        return np.eye(n)
    if kind == "random_diagonal":
        return np.diag(rng.uniform(0.1, 2.0, n))
    if kind == "random_full":
        w = rng.standard_normal((n, n))
        return w @ w.T
    # two equal blocks with +1 inside and -1 across, eigenvalues clipped up
    signs = np.where(rng.permutation(n) < n // 2, 1.0, -1.0)
    pattern = np.outer(signs, signs)
    evals, evecs = np.linalg.eigh(pattern)
    evals = np.maximum(evals, BIN_FLOOR * n)
    return (evecs * evals) @ evecs.T


def generate_regime(regime: SyntheticRegime) -> ProbitModel:
    """Ground-truth normalized model for a regime.

    Draws are repeated (up to 20 times) until every triple ordering has
    probability at least the regime's observability floor (by default
    ``1e-4`` for zero means and unchecked for random means).

    Raises
    ------
    RegimeUnsatisfiable
        If no draw meets the observability floor.
    """
    rng = np.random.default_rng(regime.seed)
    n = regime.n
    m = centering(n)
    floor = regime.effective_gamma_floor
    for _ in range(REGIME_RETRIES):
        mu = np.zeros(n) if regime.mu_kind == "zero" else rng.standard_normal(n)
        sigma = m @ _raw_sigma(regime.sigma_kind, n, rng) @ m
        model, _ = normalize(ProbitModel(m @ mu, 0.5 * (sigma + sigma.T)))
        if floor <= 0 or observability(model) >= floor:
            return model
    raise RegimeUnsatisfiable(
        f"regime {regime.label} missed the observability floor {floor} "
        f"in {REGIME_RETRIES} draws"
    )


# ----------------------------------------------------------------------------
# training data


@dataclass
class TrainingData:
    n: int
    pair_wins: np.ndarray
    triple_counts: list

    @property
    def n_pairwise(self) -> int:
        return int(self.pair_wins.sum())

    @property
    def n_triple(self) -> int:
        return int(sum(c.total for c in self.triple_counts))

    def rankings(self) -> tuple[list, np.ndarray]:
        """Best-first triple rankings with multiplicities."""
        out, weights = [], []
        for c in self.triple_counts:
            for p, order in enumerate(PERM_ORDERS):
                if c.counts[p]:
                    out.append(tuple(c.triple[k] for k in order))
                    weights.append(c.counts[p])
        return out, np.array(weights, dtype=float)


def simulate_training_data(model: ProbitModel, budget: int, rng_seed) -> TrainingData:
    """``budget`` pairwise and ``budget`` best-of-three observations.

    Triple observations are spread evenly over all triples.
    """
    if budget < 1:
        raise InputError("training budget must be positive")
    rng = np.random.default_rng(rng_seed)
    wins = sample_pairwise_wins(model, budget, rng)
    triples = all_triples(model.n)
    per = np.full(len(triples), budget // len(triples))
    per[: budget % len(triples)] += 1
    counts = []
    for t, k in zip(triples, per):
        if k > 0:
            counts.append(TripleCounts(t, sample_triple_counts(model, t, int(k), rng)))
    return TrainingData(model.n, wins, counts)


# ----------------------------------------------------------------------------
# logit


@dataclass(frozen=True)
class LogitModel:
    utilities: np.ndarray

    @property
    def n(self) -> int:
        return self.utilities.shape[0]

    def choice_probabilities(self, items: Sequence[int]) -> np.ndarray:
        u = self.utilities[list(items)]
        return np.exp(u - logsumexp(u))

    def pair_probability(self, i: int, j: int) -> float:
        return float(expit(self.utilities[i] - self.utilities[j]))


def _pl_loss(u, groups, ridge):
    value = 0.5 * ridge * float(u @ u)
    grad = ridge * u
    for idx, w in groups:
        x = u[idx]  # (R, L)
        for k in range(idx.shape[1] - 1):
            tail = x[:, k:]
            lse = logsumexp(tail, axis=1)
            value -= float(w @ (x[:, k] - lse))
            soft = np.exp(tail - lse[:, None]) * w[:, None]
            np.add.at(grad, idx[:, k], -w)
            np.add.at(grad, idx[:, k:], soft)
    return value, grad


def fit_logit(rankings: Sequence[Sequence[int]], n: int, weights=None) -> LogitModel:
    """Plackett-Luce maximum likelihood utilities, centered.

    Parameters
    ----------
    rankings : sequence of sequences of int
        Best-first rankings of at least two items each.
    n : int
        Number of items.
    weights : array_like, optional
        Multiplicity of each ranking.

    Warns
    -----
    DisconnectedComparisons
        If the comparison graph is disconnected; the fit is then ridge
        regularized so that the utilities stay finite.
    """
    if len(rankings) == 0:
        raise InputError("no rankings to fit")
    weights = np.ones(len(rankings)) if weights is None else np.asarray(weights, float)
    by_len: dict[int, list] = {}
    for r, w in zip(rankings, weights):
        r = [int(x) for x in r]
        if len(r) < 2 or len(set(r)) != len(r) or min(r) < 0 or max(r) >= n:
            raise InputError(f"invalid ranking {tuple(r)}")
        by_len.setdefault(len(r), []).append((r, w))
    groups = [
        (np.array([r for r, _ in rows]), np.array([w for _, w in rows])) for rows in by_len.values()
    ]
    rows, cols = [], []
    for idx, _ in groups:
        for a in range(idx.shape[1] - 1):
            rows.append(idx[:, a])
            cols.append(idx[:, a + 1])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    total = float(weights.sum())
    ridge = LOGIT_RIDGE * total
    if n_comp > 1:
        warnings.warn(
            f"comparison graph has {n_comp} components; using a ridge penalty",
            DisconnectedComparisons,
            stacklevel=2,
        )
        ridge = LOGIT_RIDGE_DISCONNECTED * total
    res = minimize(
        _pl_loss, np.zeros(n), args=(groups, ridge), jac=True, method="L-BFGS-B",
        options={"gtol": 1e-10, "ftol": 1e-15, "maxiter": 2000},
    )
    u = res.x - res.x.mean()
    return LogitModel(u)


# ----------------------------------------------------------------------------
# fitting


def fit_methods(
    data: TrainingData,
    truth: ProbitModel | None = None,
    methods: Sequence[str] = DEFAULT_METHODS,
    rng_seed=0,
) -> dict:
    """Fit every requested method on the same training data."""
    fitted = {}
    for name in methods:
        if name not in METHODS:
            raise InputError(f"unknown method {name!r}; choose from {METHODS}")
        if name == "oracle":
            if truth is None:
                raise InputError("the oracle method needs the true model")
            fitted[name] = truth
        elif name == "logit":
            rankings, weights = data.rankings()
            fitted[name] = fit_logit(rankings, data.n, weights)
        elif name == "probit_pairwise":
            fitted[name] = fit_probit_pairwise_mle(data.pair_wins, rng_seed).model
        elif name == "probit_triple":
            fitted[name] = fit_probit_triple_mle(data.triple_counts, data.n, rng_seed).model
        else:
            source = CountsSource(data.triple_counts)
            est = estimate_model(source, data.n, 0, triples=source.triples)
            fitted[name] = est.model()
    return fitted


# ----------------------------------------------------------------------------
# accuracy


@dataclass(frozen=True)
class AccuracyTask:
    trials: int = 10_000
    context_size: int = 4
    target_accepted: int = 200
    mc_cap: int = 10_000_000
    bootstrap: int = 200

    def __post_init__(self):
        if self.trials < 1 or self.target_accepted < 1 or self.mc_cap < 1:
            raise InputError("trial counts and budgets must be positive")
        if self.context_size < 0 or self.bootstrap < 1:
            raise InputError("invalid context size or bootstrap count")

    @property
    def subset_size(self) -> int:
        return self.context_size + 2


@dataclass
class ExperimentReport:
    method: str
    quantiles: tuple
    mean: float
    stderr: float
    runtime: float
    config: dict = field(default_factory=dict)
    error_curve: list = field(default_factory=list)

    def row(self) -> dict:
        q25, q50, q75 = self.quantiles
        return {
            "method": self.method,
            "q25": q25,
            "q50": q50,
            "q75": q75,
            "mean": self.mean,
            "stderr": self.stderr,
            "runtime": self.runtime,
            **{k: v for k, v in self.config.items() if not isinstance(v, (dict, list))},
        }


def predict_pair(model, context, i, j, task: AccuracyTask, rng_seed) -> tuple[float, bool]:
    """``P{X_i > X_j | context ranking}`` under a fitted method.

    Returns the probability and whether it fell back to the unconditional
    pair probability because the model gives the context (almost) zero
    probability.
    """
    if isinstance(model, LogitModel):
        return model.pair_probability(i, j), False
    try:
        est = conditional_pair_probability(
            model, context, i, j, task.mc_cap, rng_seed, task.target_accepted
        )
    except NoAcceptedSamples:
        return pairwise_probability(model, i, j), True
    return est.probability, False


def _bootstrap_quantiles(scores: np.ndarray, idx: np.ndarray) -> tuple:
    means = scores[idx].mean(axis=1)
    return tuple(float(q) for q in np.quantile(means, [0.25, 0.5, 0.75]))


def run_accuracy(
    model_true: ProbitModel,
    fitted: Mapping[str, object],
    task: AccuracyTask,
    rng_seed,
    config: dict | None = None,
) -> list[ExperimentReport]:
    """Score each method on held-out pair predictions given a context ranking.

    Each trial samples ``context_size + 2`` distinct items and one utility
    draw from ``model_true``. The first ``context_size`` items are revealed
    as a ranking and each method predicts the order of the last two.
    A prediction of exactly one half is resolved by a seeded coin.
    """
    n = model_true.n
    if task.subset_size > n:
        raise InputError(f"task needs {task.subset_size} items but the model has {n}")
    for name, m in fitted.items():
        if m.n != n:
            raise InputError(f"method {name!r} is fitted on {m.n} items, expected {n}")
    rng = np.random.default_rng(rng_seed)
    factor = covariance_factor(model_true.sigma)
    names = list(fitted)
    scores = np.zeros((len(names), task.trials))
    runtime = np.zeros(len(names))
    fallbacks = np.zeros(len(names), dtype=int)
    for t in range(task.trials):
        items = rng.choice(n, task.subset_size, replace=False)
        x = model_true.mu + factor @ rng.standard_normal(factor.shape[1])
        ctx_items = items[: task.context_size]
        context = [int(c) for c in ctx_items[np.argsort(-x[ctx_items], kind="stable")]]
        i, j = int(items[-2]), int(items[-1])
        truth = x[i] > x[j]
        seed = int(rng.integers(2**63))
        coin = rng.random(len(names)) < 0.5
        for k, name in enumerate(names):
            start = time.perf_counter()
            p, fell_back = predict_pair(fitted[name], context, i, j, task, seed)
            runtime[k] += time.perf_counter() - start
            fallbacks[k] += fell_back
            guess = coin[k] if p == 0.5 else p > 0.5
            scores[k, t] = float(guess == truth)
    idx = rng.integers(0, task.trials, size=(task.bootstrap, task.trials))
    cfg = {"trials": task.trials, "context_size": task.context_size, **(config or {})}
    reports = []
    for k, name in enumerate(names):
        s = scores[k]
        reports.append(
            ExperimentReport(
                name,
                _bootstrap_quantiles(s, idx),
                float(s.mean()),
                float(s.std(ddof=1) / np.sqrt(task.trials)) if task.trials > 1 else 0.0,
                float(runtime[k]),
                {**cfg, "fallbacks": int(fallbacks[k])},
            )
        )
    return reports


def run_regime(
    regime: SyntheticRegime,
    task: AccuracyTask,
    training_budget: int = DEFAULT_TRAINING_BUDGET,
    methods: Sequence[str] = DEFAULT_METHODS,
    rng_seed=None,
) -> tuple[list[ExperimentReport], dict]:
    """Generate, simulate, fit and score one regime.

    Returns the reports and the fitted models.
    """
    seed = regime.seed if rng_seed is None else rng_seed
    seeds = np.random.SeedSequence(seed).spawn(3)
    truth = generate_regime(regime)
    data = simulate_training_data(truth, training_budget, seeds[0])
    start = time.perf_counter()
    fitted = fit_methods(data, truth, methods, seeds[1])
    fit_time = time.perf_counter() - start
    config = {
        "mu": regime.mu_kind,
        "sigma": regime.sigma_kind,
        "n": regime.n,
        "seed": regime.seed,
        "training_budget": training_budget,
        "fit_seconds": round(fit_time, 3),
    }
    reports = run_accuracy(truth, fitted, task, seeds[2], config)
    for r in reports:
        m = fitted[r.method]
        if isinstance(m, ProbitModel):
            r.error_curve = [
                {
                    "mu_error": float(np.abs(m.mu - truth.mu).max()),
                    "sigma_error": float(np.abs(m.sigma - truth.sigma).max()),
                }
            ]
    return reports, fitted


def estimation_error_curve(
    model: ProbitModel, budgets: Sequence[int], seeds: Sequence[int]
) -> list[dict]:
    """Sup-norm errors of the moment estimator against the sample budget."""
    from .aggregator import SamplingSource

    rows = []
    for b in budgets:
        for s in seeds:
            est = estimate_model(SamplingSource(model, s), model.n, int(b))
            fit = est.model()
            rows.append(
                {
                    "budget": int(b),
                    "seed": int(s),
                    "mu_error": float(np.abs(fit.mu - model.mu).max()),
                    "sigma_error": float(np.abs(fit.sigma - model.sigma).max()),
                }
            )
    return rows


def loglog_slope(budgets, errors) -> float:
    """Least-squares slope of ``log error`` against ``log budget``."""
    return float(np.polyfit(np.log(budgets), np.log(errors), 1)[0])


# ----------------------------------------------------------------------------
# welfare


@dataclass
class WelfareReport:
    method: str
    size: int
    menu: tuple
    true_value: float
    true_stderr: float
    rank_histogram: list

    def row(self) -> dict:
        return {
            "method": self.method,
            "size": self.size,
            "menu": " ".join(map(str, self.menu)),
            "true_value": self.true_value,
            "true_stderr": self.true_stderr,
            **{f"rank_{r + 1}": c for r, c in enumerate(self.rank_histogram)},
        }


def best_menu(model, size: int, mc_samples: int, rng_seed, items=None) -> tuple:
    """Welfare-maximizing menu of a fitted method.

    For the logit the expected maximum is ``log sum exp(u)`` over the menu,
    which is maximized by the ``size`` largest utilities.
    """
    items = list(range(model.n)) if items is None else sorted(items)
    if isinstance(model, LogitModel):
        u = model.utilities[items]
        order = np.argsort(-u, kind="stable")[:size]
        return tuple(sorted(items[k] for k in order))
    return expected_max_welfare(model, WelfareQuery(size, tuple(items), mc_samples), rng_seed).best


def run_welfare(
    model_true: ProbitModel,
    fitted: Mapping[str, object],
    sizes: Sequence[int] = (1, 2, 3),
    mc_samples: int = 200_000,
    rng_seed=0,
) -> list[WelfareReport]:
    """Menus chosen by each method and how they fare under the true model.

    The histogram counts, over common draws from ``model_true``, the
    overall rank (1 = best item) of the best item on the menu.
    """
    n = model_true.n
    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    rng = np.random.default_rng(seeds[1])
    factor = covariance_factor(model_true.sigma)
    x = model_true.mu + rng.standard_normal((mc_samples, factor.shape[1])) @ factor.T
    ranks = np.empty_like(x, dtype=np.int64)
    order = rank_rows(x)
    np.put_along_axis(ranks, order, np.arange(1, n + 1)[None, :], axis=1)
    out = []
    for name, m in fitted.items():
        for size in sizes:
            menu = best_menu(m, size, mc_samples, seeds[0])
            cols = list(menu)
            v = x[:, cols].max(axis=1)
            best_rank = ranks[:, cols].min(axis=1)
            hist = np.bincount(best_rank, minlength=n + 1)[1:]
            out.append(
                WelfareReport(
                    name, size, menu, float(v.mean()),
                    float(v.std(ddof=1) / np.sqrt(mc_samples)), hist.tolist(),
                )
            )
    return out


def diversification_model() -> ProbitModel:
    """Four items: 0 and 1 nearly interchangeable with the highest means,
    2 anticorrelated with both, 3 a weak independent item."""
    mu = np.array([1.0, 0.9, 0.4, -1.0])
    corr = np.array(
        [
            [1.0, 0.95, -0.8, 0.0],
            [0.95, 1.0, -0.8, 0.0],
            [-0.8, -0.8, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    m = centering(4)
    return normalize(ProbitModel(m @ mu, m @ corr @ m))[0]


# ----------------------------------------------------------------------------
# serialization


def reports_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def reports_to_json(reports: Sequence[ExperimentReport]) -> str:
    return json.dumps([asdict(r) for r in reports], sort_keys=True, indent=1)


def matrix_to_csv(a: np.ndarray) -> str:
    """Dense matrix as CSV with full precision, for heatmaps."""
    return "\n".join(",".join(repr(float(v)) for v in row) for row in np.asarray(a)) + "\n"
