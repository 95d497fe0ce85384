"""Monte-Carlo utilities: ranking draws, conditional predictions, welfare."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateCovariance,
    EmptySubset,
    EnumerationTooLarge,
    InputError,
    NoAcceptedSamples,
)
from .model import ProbitModel
from .probability import PERM_ORDERS

CLIP_TOL = 1e-9
CHUNK = 1 << 16
ENUMERATION_CAP = 100_000

# lookup from (best, middle) positions to the index in PERMS
_PERM_INDEX = np.full((3, 3), -1, dtype=np.int64)
for _idx, _order in enumerate(PERM_ORDERS):
    _PERM_INDEX[_order[0], _order[1]] = _idx


def covariance_factor(sigma: np.ndarray) -> np.ndarray:
    """Return ``F`` with ``F @ F.T == sigma`` for a PSD (possibly singular) matrix.

    Eigenvalues down to ``-1e-9 * trace`` are clipped to zero; anything more
    negative raises :class:`DegenerateCovariance`.
    """
    evals, evecs = np.linalg.eigh(sigma)
    trace = max(float(np.trace(sigma)), 0.0)
    if evals[0] < -CLIP_TOL * max(trace, 1e-300):
        raise DegenerateCovariance(f"covariance has eigenvalue {evals[0]:.3g}")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def draw_utilities(model: ProbitModel, size: int, rng: np.random.Generator, items=None):
    """``size`` utility draws, restricted to ``items`` if given."""
    if items is not None:
        model = model.restrict(items)
    factor = covariance_factor(model.sigma)
    z = rng.standard_normal((size, factor.shape[1]))
    return model.mu + z @ factor.T


def rank_rows(x: np.ndarray) -> np.ndarray:
    """Column indices of each row sorted best-first; ties go to the lower column."""
    return np.argsort(-x, axis=1, kind="stable")


def sample_rankings(
    model: ProbitModel, subsets: Sequence[Sequence[int]], rng_seed
) -> list[tuple[int, ...]]:
    """One ranking (best-first tuple of item labels) per subset."""
    rng = np.random.default_rng(rng_seed)
    factor = covariance_factor(model.sigma)
    out = []
    for subset in subsets:
        items = sorted(int(x) for x in subset)
        if len(items) == 0:
            raise EmptySubset("cannot rank an empty subset")
        if len(set(items)) != len(items):
            raise InputError(f"subset {tuple(subset)} repeats an item")
        x = model.mu + factor @ rng.standard_normal(factor.shape[1])
        order = rank_rows(x[items][None, :])[0]
        out.append(tuple(items[p] for p in order))
    return out


def triple_counts_from_draws(x: np.ndarray) -> np.ndarray:
    """Counts of the 6 orderings among rows of an (N, 3) utility array."""
    order = rank_rows(x)
    codes = _PERM_INDEX[order[:, 0], order[:, 1]]
    return np.bincount(codes, minlength=6)


def sample_triple_counts(
    model: ProbitModel, triple: Sequence[int], total: int, rng: np.random.Generator
) -> np.ndarray:
    """Ordering counts of ``total`` best-of-three observations of ``triple``."""
    if total < 1:
        raise InputError("need at least one observation per triple")
    sub = model.restrict(list(triple))
    factor = covariance_factor(sub.sigma)
    counts = np.zeros(6, dtype=np.int64)
    left = int(total)
    while left > 0:
        size = min(left, 4 * CHUNK)
        x = sub.mu + rng.standard_normal((size, 3)) @ factor.T
        counts += triple_counts_from_draws(x)
        left -= size
    return counts


@dataclass(frozen=True)
class ConditionalEstimate:
    probability: float
    accepted: int
    proposals: int

    @property
    def stderr(self) -> float:
        p = self.probability
        return float(np.sqrt(max(p * (1 - p), 1e-12) / self.accepted))


def conditional_pair_probability(
    model: ProbitModel,
    context: Sequence[int],
    i: int,
    j: int,
    mc_budget: int,
    rng_seed,
    target_accepted: int | None = None,
) -> ConditionalEstimate:
    """Rejection-sampling estimate of ``P{X_i > X_j | context ordering}``.

    Parameters
    ----------
    context : sequence of int
        Items ranked best-first; may be empty.
    mc_budget : int
        Maximum number of utility draws.
    target_accepted : int, optional
        Stop once this many draws matched the context. By default the
        whole budget is used.

    Raises
    ------
    NoAcceptedSamples
        If no draw reproduces the context ordering.
    """
    context = [int(c) for c in context]
    if i == j or i in context or j in context:
        raise InputError("predicted pair must be distinct and outside the context")
    if len(set(context)) != len(context):
        raise InputError("context repeats an item")
    if mc_budget < 1:
        raise InputError("mc_budget must be positive")
    rng = np.random.default_rng(rng_seed)
    items = context + [i, j]
    sub = model.restrict(items)
    factor = covariance_factor(sub.sigma)
    c = len(context)
    accepted = wins = proposals = 0
    size = CHUNK
    while proposals < mc_budget:
        if target_accepted is not None:
            # size the next batch from the acceptance rate seen so far
            rate = (accepted + 1) / (proposals + 24)
            size = int(min(4 * CHUNK, max(1024, 1.25 * (target_accepted - accepted) / rate)))
        size = min(size, mc_budget - proposals)
        x = sub.mu + rng.standard_normal((size, factor.shape[1])) @ factor.T
        proposals += size
        keep = np.all(x[:, : c - 1] > x[:, 1:c], axis=1) if c > 1 else np.ones(size, bool)
        accepted += int(keep.sum())
        wins += int(np.count_nonzero(x[keep, c] > x[keep, c + 1]))
        if target_accepted is not None and accepted >= target_accepted:
            break
    if accepted == 0:
        raise NoAcceptedSamples(
            f"none of {proposals} draws matched the context ordering {tuple(context)}"
        )
    return ConditionalEstimate(wins / accepted, accepted, proposals)


@dataclass(frozen=True)
class WelfareQuery:
    menu_size: int
    candidate_items: tuple
    mc_samples: int

    def __post_init__(self):
        items = tuple(int(i) for i in self.candidate_items)
        object.__setattr__(self, "candidate_items", items)
        if len(set(items)) != len(items):
            raise InputError("candidate items repeat")
        if not 1 <= self.menu_size <= len(items):
            raise InputError(
                f"menu size {self.menu_size} not in [1, {len(items)}]"
            )
        if self.mc_samples < 2:
            raise InputError("need at least two Monte-Carlo samples")


@dataclass(frozen=True)
class WelfareResult:
    best: tuple
    menus: list
    values: np.ndarray
    stderr: np.ndarray

    def table(self) -> list[dict]:
        return [
            {"menu": list(m), "value": float(v), "stderr": float(s)}
            for m, v, s in zip(self.menus, self.values, self.stderr)
        ]


def _menu_max_sums(model, menus, items, mc_samples, rng):
    """Sums and sums of squares of ``max_{i in menu} X_i`` over shared draws."""
    pos = {it: p for p, it in enumerate(items)}
    cols = [np.array([pos[i] for i in menu]) for menu in menus]
    sub = model.restrict(items)
    factor = covariance_factor(sub.sigma)
    s1 = np.zeros(len(menus))
    s2 = np.zeros(len(menus))
    left = mc_samples
    while left > 0:
        size = min(left, 4 * CHUNK)
        x = sub.mu + rng.standard_normal((size, factor.shape[1])) @ factor.T
        for m, c in enumerate(cols):
            v = x[:, c].max(axis=1)
            s1[m] += v.sum()
            s2[m] += v @ v
        left -= size
    return s1, s2


def expected_max_welfare(model: ProbitModel, query: WelfareQuery, rng_seed) -> WelfareResult:
    """Menu of ``query.menu_size`` candidates with the largest ``E[max X_i]``.

    All menus are scored on the same draws. Ties go to the
    lexicographically smallest menu.
    """
    items = sorted(query.candidate_items)
    if comb(len(items), query.menu_size) > ENUMERATION_CAP:
        raise EnumerationTooLarge(
            f"C({len(items)}, {query.menu_size}) menus exceed the cap {ENUMERATION_CAP}"
        )
    menus = list(combinations(items, query.menu_size))
    rng = np.random.default_rng(rng_seed)
    s1, s2 = _menu_max_sums(model, menus, items, query.mc_samples, rng)
    n = query.mc_samples
    values = s1 / n
    var = np.maximum(s2 / n - values**2, 0.0) * n / (n - 1)
    stderr = np.sqrt(var / n)
    best = menus[int(np.argmax(values))]
    return WelfareResult(best, menus, values, stderr)


def paired_welfare_difference(
    model: ProbitModel, menu_a, menu_b, mc_samples: int, rng_seed
) -> tuple[float, float]:
    """``E[max_a] - E[max_b]`` and its standard error from common draws."""
    items = sorted(set(menu_a) | set(menu_b))
    pos = {it: p for p, it in enumerate(items)}
    ca = np.array([pos[i] for i in menu_a])
    cb = np.array([pos[i] for i in menu_b])
    sub = model.restrict(items)
    factor = covariance_factor(sub.sigma)
    rng = np.random.default_rng(rng_seed)
    s1 = s2 = 0.0
    left = mc_samples
    while left > 0:
        size = min(left, 4 * CHUNK)
        x = sub.mu + rng.standard_normal((size, factor.shape[1])) @ factor.T
        d = x[:, ca].max(axis=1) - x[:, cb].max(axis=1)
        s1 += d.sum()
        s2 += d @ d
        left -= size
    mean = s1 / mc_samples
    var = max(s2 / mc_samples - mean * mean, 0.0) * mc_samples / (mc_samples - 1)
    return float(mean), float(np.sqrt(var / mc_samples))
