"""Choose triples to query and merge per-triple estimates into one model.

Each unordered pair ``{i, j}`` carries the quadratic form
``d_ij = (e_i - e_j)' Sigma (e_i - e_j)``. A triple estimate determines the
three forms of its pairs up to a common factor, so pairs linked through
shared triples have known ratios. When the triples connect all pairs, the
forms are determined up to one global factor, which the trace normalization
fixes, and ``Sigma = -M D M / 2`` with ``M`` the centering matrix.

The triples come from a sparse pair graph: for every item ``i`` a complete
binary tree over the other items links pairs ``{i, a}`` and ``{i, b}``.
This uses fewer than ``n^2`` triples and keeps every pair within a
logarithmic number of hops of every other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import log2
from typing import Mapping, Protocol, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import (
    InfeasibleAtCap,
    InputError,
    NonPositiveRatio,
    NumericError,
    InfeasibleError,
)
from .estimator3 import (
    GRID_POINTS,
    ThreeItemEstimate,
    TripleCounts,
    estimate_from_frequencies,
    estimate_triple,
)
from .model import ProbitModel, centering
from .probability import DEFAULT_TOL, triple_rank_probabilities_batch
from .sampling import sample_triple_counts

log = logging.getLogger(__name__)

PSD_FLOOR = 1e-6


def pair_index(a: int, b: int, n: int) -> int:
    """Index of the unordered pair ``{a, b}`` in lexicographic order."""
    if a > b:
        a, b = b, a
    return a * n - a * (a + 1) // 2 + (b - a - 1)


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n) for b in range(a + 1, n)]


@dataclass(frozen=True)
class ItemPairGraph:
    """Graph on unordered item pairs; each edge names the triple it queries."""

    n: int
    vertices: list
    edges: list  # (pair, pair, triple)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def csr(self) -> sp.csr_matrix:
        m = len(self.vertices)
        src = [pair_index(*e[0], self.n) for e in self.edges]
        dst = [pair_index(*e[1], self.n) for e in self.edges]
        data = np.ones(2 * len(src), dtype=np.int8)
        adj = sp.csr_matrix(
            (data, (np.r_[src, dst], np.r_[dst, src])), shape=(m, m)
        )
        adj.sum_duplicates()
        return adj

    def diameter(self) -> int:
        """Largest shortest-path distance; ``-1`` if disconnected."""
        return bfs_diameter(self.csr())


def build_subgraph(n: int) -> ItemPairGraph:
    """Sparse pair graph built from one complete binary tree per item."""
    if n < 3:
        raise InputError(f"need at least 3 items, got {n}")
    edges = []
    for i in range(n):
        others = [a for a in range(n) if a != i]
        # heap order: node p hangs under node (p - 1) // 2
        for p in range(1, len(others)):
            a, b = others[p], others[(p - 1) // 2]
            edges.append(
                (tuple(sorted((i, a))), tuple(sorted((i, b))), tuple(sorted((i, a, b))))
            )
    return ItemPairGraph(n, all_pairs(n), edges)


def select_triples(graph: ItemPairGraph) -> list[tuple[int, int, int]]:
    """Distinct triples named by the graph's edges, sorted."""
    return sorted({e[2] for e in graph.edges})


def _neighbour_table(adj: sp.csr_matrix) -> np.ndarray:
    """Padded neighbour lists; padding points back at the vertex itself."""
    m = adj.shape[0]
    ids = np.arange(m)
    deg = np.diff(adj.indptr)
    width = max(int(deg.max()) if m else 0, 1)
    nbr = np.repeat(ids[:, None], width, axis=1)
    slot = np.arange(adj.indices.size) - np.repeat(adj.indptr[:-1], deg)
    nbr[np.repeat(ids, deg), slot] = adj.indices
    return nbr


def _batch_bfs(nbr: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Distances from up to 64 sources at once, shape (m, len(sources)).

    Each vertex keeps one 64-bit word whose bit ``b`` says source ``b``
    has reached it. Unreached vertices get distance -1.
    """
    m = nbr.shape[0]
    k = len(sources)
    reach = np.zeros(m, dtype=np.uint64)
    np.bitwise_or.at(
        reach, sources, np.left_shift(np.uint64(1), np.arange(k, dtype=np.uint64))
    )
    dist = np.full((m, 64), -1, dtype=np.int32)
    dist[sources, np.arange(k)] = 0
    level = 0
    while True:
        new = reach.copy()
        for col in nbr.T:
            new |= reach[col]
        fresh = new & ~reach
        if not fresh.any():
            return dist[:, :k]
        level += 1
        bits = np.unpackbits(fresh.view(np.uint8).reshape(m, 8), axis=1, bitorder="little")
        dist[bits.astype(bool)] = level
        reach = new


def bfs_diameter(adj: sp.csr_matrix) -> int:
    """Exact diameter of an undirected graph; ``-1`` if disconnected.

    Eccentricity bounds are tightened with batches of breadth-first
    searches until no unexplored vertex can exceed the best lower bound,
    so usually only a small fraction of the vertices is searched from.
    """
    m = adj.shape[0]
    if m <= 1:
        return 0
    nbr = _neighbour_table(adj)
    lower = np.zeros(m, dtype=np.int64)
    upper = np.full(m, np.iinfo(np.int64).max // 4)
    done = np.zeros(m, dtype=bool)
    deg = np.diff(adj.indptr)
    best = 0
    pick_high = True
    while True:
        open_ = ~done & (upper > best)
        if not open_.any():
            return best
        cand = np.flatnonzero(open_)
        # alternate between the largest upper and the smallest lower bounds
        if pick_high:
            key = np.lexsort((-deg[cand], -upper[cand]))
        else:
            key = np.lexsort((deg[cand], lower[cand]))
        pick_high = not pick_high
        sources = cand[key[:64]]
        dist = _batch_bfs(nbr, sources)
        if np.any(dist < 0):
            return -1
        ecc = dist.max(axis=0)
        best = max(best, int(ecc.max()))
        lower = np.maximum(lower, np.maximum(ecc[None, :] - dist, dist).max(axis=1))
        upper = np.minimum(upper, (ecc[None, :] + dist).min(axis=1))
        done[sources] = True


def restrict_project(obj, triple: Sequence[int]):
    """Restrict to ``triple`` and project onto the plane orthogonal to ``1``.

    Accepts a :class:`ProbitModel` (returns ``(mu, sigma)``) or a square
    matrix (returns the projected 3x3 block).
    """
    idx = np.asarray(triple, dtype=int)
    if len(set(idx.tolist())) != 3:
        raise InputError(f"{tuple(triple)} is not a triple of distinct items")
    m3 = centering(3)
    if isinstance(obj, ProbitModel):
        sig = obj.sigma[np.ix_(idx, idx)]
        return m3 @ obj.mu[idx], m3 @ sig @ m3
    mat = np.asarray(obj, dtype=float)
    return m3 @ mat[np.ix_(idx, idx)] @ m3


@dataclass
class GlobalEstimate:
    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    t_star: float
    per_triple_scales: dict
    diagnostics: dict = field(default_factory=dict)

    def model(self) -> ProbitModel:
        return ProbitModel(self.mu_bar, self.sigma_bar, normalized=True)


def _pair_positions(triple):
    return [(0, 1), (0, 2), (1, 2)]


def _forms(est: ThreeItemEstimate) -> np.ndarray:
    return np.array([est.quadratic_form(a, b) for a, b in _pair_positions(est.triple)])


def _weight(est: ThreeItemEstimate) -> float:
    return float(est.total) if est.total else 1.0


def sigma_from_forms(d_pairs: np.ndarray, n: int) -> np.ndarray:
    """Hyperplane covariance with the given pair forms, rescaled to trace ``n``."""
    d = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    d[iu] = d_pairs
    d = d + d.T
    kappa = 2.0 * n * n / d.sum()
    m = centering(n)
    sigma = -0.5 * kappa * (m @ d @ m)
    return 0.5 * (sigma + sigma.T)


def repair_psd(sigma: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
    """Clip hyperplane eigenvalues at a small floor and restore trace ``n``."""
    m = centering(n)
    evals, evecs = np.linalg.eigh(sigma)
    # the smallest eigenvector is (close to) 1 / sqrt(n); leave it at zero
    ones = np.ones(n) / np.sqrt(n)
    order = np.argsort(-np.abs(evecs.T @ ones))
    null = order[0]
    hyper = np.ones(n, dtype=bool)
    hyper[null] = False
    floor = PSD_FLOOR
    if np.all(evals[hyper] >= floor):
        return sigma, False
    vals = np.where(hyper, np.maximum(evals, floor), 0.0)
    fixed = (evecs * vals) @ evecs.T
    fixed = m @ fixed @ m
    fixed *= n / np.trace(fixed)
    return 0.5 * (fixed + fixed.T), True


def _constraint_pairs(estimates, graph):
    """(triple, pair a, pair b) constraints of the ratio program."""
    if graph is not None:
        return [(e[2], e[0], e[1]) for e in graph.edges]
    out = []
    for triple in estimates:
        i, j, k = triple
        out += [(triple, (i, j), (i, k)), (triple, (i, j), (j, k)), (triple, (i, k), (j, k))]
    return out


def _estimated_ratio(est, pa, pb):
    pos = {item: p for p, item in enumerate(est.triple)}
    fa = est.quadratic_form(pos[pa[0]], pos[pa[1]])
    fb = est.quadratic_form(pos[pb[0]], pos[pb[1]])
    return fa / fb


def ratio_slack(sigma: np.ndarray, estimates, graph=None) -> float:
    """Smallest ``t`` with every ratio constraint satisfied by ``sigma``."""
    worst = 0.0
    for triple, pa, pb in _constraint_pairs(estimates, graph):
        est = estimates[triple]
        ca = sigma[pa[0], pa[0]] + sigma[pa[1], pa[1]] - 2 * sigma[pa[0], pa[1]]
        cb = sigma[pb[0], pb[0]] + sigma[pb[1], pb[1]] - 2 * sigma[pb[0], pb[1]]
        worst = max(worst, abs((ca / cb) / _estimated_ratio(est, pa, pb) - 1.0))
    return worst


def _check_estimates(estimates: Mapping, n: int):
    if not estimates:
        raise InputError("no triple estimates to aggregate")
    for triple, est in estimates.items():
        if any(not 0 <= x < n for x in triple):
            raise InputError(f"triple {triple} outside items 0..{n - 1}")
        if np.any(_forms(est) <= 0):
            raise NonPositiveRatio(f"triple {triple} has a non-positive quadratic form")


def _propagate_forms(estimates: Mapping, n: int) -> np.ndarray:
    """Weighted least squares for log pair forms with one scale per triple."""
    triples = sorted(estimates)
    npairs = n * (n - 1) // 2
    rows, cols, vals, rhs, w = [], [], [], [], []
    r = 0
    for t, triple in enumerate(triples):
        est = estimates[triple]
        forms = _forms(est)
        for (a, b), f in zip(_pair_positions(triple), forms):
            rows += [r, r]
            cols += [pair_index(triple[a], triple[b], n), npairs + t]
            vals += [1.0, -1.0]
            rhs.append(np.log(f))
            w.append(_weight(est))
            r += 1
    a = sp.csr_matrix((vals, (rows, cols)), shape=(r, npairs + len(triples)))
    covered = np.zeros(npairs, dtype=bool)
    covered[np.unique(a.indices[a.indices < npairs])] = True
    if not covered.all():
        raise InputError(f"{int((~covered).sum())} item pairs are not covered by any triple")
    # the first triple's scale is the reference (fixed at 0)
    keep = np.r_[np.arange(npairs), npairs + 1 + np.arange(len(triples) - 1)]
    a = a[:, keep]
    wd = sp.diags(np.asarray(w))
    normal = (a.T @ wd @ a).tocsc()
    b = a.T @ (np.asarray(w) * np.asarray(rhs))
    x = spsolve(normal, b)
    if not np.all(np.isfinite(x)):
        raise InputError("triples do not connect all item pairs")
    resid = a @ x - np.asarray(rhs)
    if np.max(np.abs(resid)) > 1e6:
        raise InputError("triples do not connect all item pairs")
    return np.exp(x[:npairs])


def _lp_forms(estimates: Mapping, n: int, graph, tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Bisection on ``t`` with an LP feasibility check over the pair forms."""
    from scipy.optimize import linprog

    cons = _constraint_pairs(estimates, graph)
    npairs = n * (n - 1) // 2
    ratios = np.array([_estimated_ratio(estimates[tr], pa, pb) for tr, pa, pb in cons])
    ia = np.array([pair_index(*pa, n) for _, pa, _ in cons])
    ib = np.array([pair_index(*pb, n) for _, _, pb in cons])
    k = len(cons)

    def feasible(t):
        # (1 - t) r d_b - d_a <= 0 and d_a - (1 + t) r d_b <= 0
        rows = np.r_[np.arange(k), np.arange(k), k + np.arange(k), k + np.arange(k)]
        cols = np.r_[ib, ia, ia, ib]
        vals = np.r_[(1 - t) * ratios, -np.ones(k), np.ones(k), -(1 + t) * ratios]
        a_ub = sp.csr_matrix((vals, (rows, cols)), shape=(2 * k, npairs))
        res = linprog(
            np.zeros(npairs),
            A_ub=a_ub,
            b_ub=np.zeros(2 * k),
            A_eq=np.ones((1, npairs)),
            b_eq=[float(n * n)],
            bounds=[(0, None)] * npairs,
            method="highs",
        )
        return res.x if res.status == 0 else None

    top = feasible(1.0)
    if top is None:
        raise InfeasibleAtCap("ratio program infeasible at t = 1")
    lo, hi, best = 0.0, 1.0, top
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        x = feasible(mid)
        if x is None:
            lo = mid
        else:
            hi, best = mid, x
    if np.any(best <= 0):
        best = np.maximum(best, 1e-12 * best.max())
    return best, hi


def aggregate_sigma(
    estimates: Mapping[tuple, ThreeItemEstimate],
    graph: ItemPairGraph | None = None,
    n: int | None = None,
    solver: str = "propagate",
) -> tuple[np.ndarray, float, dict]:
    """Merge triple covariances into a trace-``n`` hyperplane covariance.

    Parameters
    ----------
    estimates : mapping
        Triple (sorted item labels) to its estimate.
    graph : ItemPairGraph, optional
        Supplies the ratio constraints used to report ``t_star``; without it
        every pair of pairs inside each triple is checked.
    solver : {"propagate", "lp"}
        Least-squares propagation of pair forms, or bisection with linear
        feasibility checks.

    Returns
    -------
    sigma_bar : ndarray
    t_star : float
        Largest relative violation of the ratio constraints.
    info : dict
        ``psd_repaired`` flag and the solver used.
    """
    if n is None:
        n = graph.n if graph is not None else 1 + max(max(t) for t in estimates)
    _check_estimates(estimates, n)
    if solver == "propagate":
        forms = _propagate_forms(estimates, n)
    elif solver == "lp":
        forms, _ = _lp_forms(estimates, n, graph)
    else:
        raise InputError(f"unknown solver {solver!r}")
    sigma = sigma_from_forms(forms, n)
    t_star = ratio_slack(sigma, estimates, graph)
    sigma, repaired = repair_psd(sigma, n)
    if repaired:
        log.info("covariance estimate was not PSD; eigenvalues clipped")
    return sigma, t_star, {"psd_repaired": repaired, "solver": solver}


def triple_scales(estimates: Mapping, sigma_bar: np.ndarray) -> dict:
    """``s_T = sqrt(tr(projected sigma_bar on T) / tr(sigma_hat_T))``."""
    out = {}
    for triple, est in estimates.items():
        proj = restrict_project(sigma_bar, triple)
        out[triple] = float(np.sqrt(np.trace(proj) / est.trace))
    return out


def aggregate_mu(
    estimates: Mapping[tuple, ThreeItemEstimate],
    sigma_bar: np.ndarray,
    graph: ItemPairGraph | None = None,
    solver: str = "lsq",
) -> tuple[np.ndarray, dict, float]:
    """Merge rescaled triple means into a centered mean vector.

    Returns ``mu_bar``, the per-triple scales and the achieved objective
    ``max_T ||s_T mu_hat_T - M mu_bar_T||_inf``.
    """
    n = sigma_bar.shape[0]
    scales = triple_scales(estimates, sigma_bar)
    triples = sorted(estimates)
    if solver == "lsq":
        rows, rhs, w = [], [], []
        for triple in triples:
            est = estimates[triple]
            m = scales[triple] * est.mu_hat
            for a, b in _pair_positions(triple):
                row = np.zeros(n)
                row[triple[a]], row[triple[b]] = 1.0, -1.0
                rows.append(row)
                rhs.append(m[a] - m[b])
                w.append(np.sqrt(_weight(est)))
        a = np.array(rows) * np.array(w)[:, None]
        # minimum-norm solution is orthogonal to 1, hence centered
        mu = np.linalg.lstsq(a, np.array(rhs) * np.array(w), rcond=None)[0]
    elif solver == "lp":
        mu = _lp_mu(estimates, scales, n)
    else:
        raise InputError(f"unknown solver {solver!r}")
    mu = mu - mu.mean()
    m3 = centering(3)
    objective = max(
        float(np.abs(scales[t] * estimates[t].mu_hat - m3 @ mu[list(t)]).max()) for t in triples
    )
    return mu, scales, objective


def _lp_mu(estimates, scales, n):
    from scipy.optimize import linprog

    m3 = centering(3)
    a_ub, b_ub = [], []
    for triple, est in estimates.items():
        target = scales[triple] * est.mu_hat
        for p in range(3):
            row = np.zeros(n + 1)
            row[list(triple)] = m3[p]
            row[n] = -1.0
            a_ub.append(row)
            b_ub.append(target[p])
            neg = -row
            neg[n] = -1.0
            a_ub.append(neg)
            b_ub.append(-target[p])
    c = np.zeros(n + 1)
    c[n] = 1.0
    a_eq = np.r_[np.ones(n), 0.0][None, :]
    res = linprog(
        c, A_ub=np.array(a_ub), b_ub=np.array(b_ub), A_eq=a_eq, b_eq=[0.0],
        bounds=[(None, None)] * n + [(0, None)], method="highs",
    )
    if res.status != 0:
        raise NumericError(f"mean program failed: {res.message}")
    return res.x[:n]


class SampleSource(Protocol):
    def observe(self, triple: tuple, budget: int):
        """Return ``(frequencies or TripleCounts, total)`` for ``triple``."""


class SamplingSource:
    """Draws best-of-three observations from a known model."""

    def __init__(self, model: ProbitModel, rng_seed):
        self.model = model
        self.rng = np.random.default_rng(rng_seed)

    def observe(self, triple, budget):
        counts = sample_triple_counts(self.model, triple, budget, self.rng)
        return TripleCounts(triple, counts)


class ExactSource:
    """Answers with exact ordering probabilities (no sampling noise)."""

    def __init__(self, model: ProbitModel, tol: float = DEFAULT_TOL):
        self.model = model
        self.tol = tol

    def observe(self, triple, budget):
        return triple_rank_probabilities_batch(self.model, [triple], self.tol)[0]


class CountsSource:
    """Serves fixed, pre-collected counts."""

    def __init__(self, counts: Sequence[TripleCounts]):
        self.table = {c.triple: c for c in counts}

    @property
    def triples(self):
        return sorted(self.table)

    def observe(self, triple, budget):
        if triple not in self.table:
            raise InputError(f"no counts for triple {triple}")
        return self.table[triple]


@dataclass
class EstimationConfig:
    sigma_solver: str = "propagate"
    mu_solver: str = "lsq"
    min_samples: int = 100
    tol: float = DEFAULT_TOL
    grid_points: int = GRID_POINTS


def _estimate_one(obs, triple, config):
    if isinstance(obs, TripleCounts):
        est, _ = estimate_triple(
            obs, config.min_samples, tol=config.tol, grid_points=config.grid_points
        )
        return est, obs.total
    return estimate_from_frequencies(obs, triple, None, config.tol, config.grid_points), 0


def estimate_model(
    source,
    n: int,
    budget: int,
    config: EstimationConfig | None = None,
    triples: Sequence[tuple] | None = None,
) -> GlobalEstimate:
    """Query, estimate and aggregate.

    Parameters
    ----------
    source : object with ``observe(triple, budget)``
    n : int
        Number of items.
    budget : int
        Observations per triple.
    triples : sequence of tuple, optional
        Triples to use instead of the sparse pair graph (e.g. whatever a
        counts file contains).
    """
    config = config or EstimationConfig()
    graph = None
    if triples is None:
        graph = build_subgraph(n)
        triples = select_triples(graph)
    triples = [tuple(sorted(t)) for t in triples]
    estimates = {}
    used = 0
    retries = []
    for triple in triples:
        try:
            est, spent = _estimate_one(source.observe(triple, budget), triple, config)
        except (NumericError, InfeasibleError) as exc:
            log.info("triple %s failed (%s); retrying with a doubled budget", triple, exc)
            retries.append(list(triple))
            used += budget
            est, spent = _estimate_one(source.observe(triple, 2 * budget), triple, config)
        used += spent
        estimates[triple] = est
    sigma, t_star, info = aggregate_sigma(estimates, graph, n, config.sigma_solver)
    mu, scales, objective = aggregate_mu(estimates, sigma, graph, config.mu_solver)
    diagnostics = {
        "n_triples": len(triples),
        "samples_used": used,
        "retried_triples": retries,
        "mu_objective": objective,
        "max_cone_residual": float(max(e.residuals.max() for e in estimates.values())),
        "clamp_events": int(sum(sum(e.clamped) for e in estimates.values())),
        **info,
    }
    return GlobalEstimate(mu, sigma, t_star, scales, diagnostics)


def diameter_bound(n: int) -> float:
    return 4.0 * (log2(n) + 1.0)
