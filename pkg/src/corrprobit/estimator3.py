"""Moment estimator for a three-item correlated probit model.

The observables of a triple ``(a, b, c)`` are the six ordering frequencies.
Writing ``c1 = e_a - e_b``, ``c2 = e_b - e_c`` and ``c3 = e_a - e_c``, each
pairwise comparison is the half-plane ``<c_d, X> >= 0`` and each ordering is
the intersection of two of them.

Estimation proceeds in three steps:

1. ``alpha_d = Phi^{-1}(P{<c_d, X> >= 0})`` is the whitened mean projected on
   the whitened normal of ``c_d``.
2. For each pair of normals the angle between their whitened versions is the
   one whose cone masses under ``N(mean(theta), I)`` best match the observed
   cone frequencies.
3. The angles fix the shape of ``Sigma^{1/2}`` on the plane orthogonal to
   ``1``; the alphas then fix the mean.

The result is defined up to the global scale that choices cannot see.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.special import ndtri

from .errors import (
    InputError,
    InsufficientSamples,
    MixedTriples,
    NegativeScale,
    NoFeasibleAngle,
    ObservabilityTooLow,
    ParseError,
    SingularSystem,
)
from .probability import DEFAULT_TOL, PERM_ORDERS, PERMS, cone_mass

MIN_SAMPLES_PER_TRIPLE = 100
ANGLE_FLOOR = 1e-6
THETA_MIN = 1e-3
GRID_POINTS = 256
GOLDEN_TOL = 1e-8
GAMMA_FLOOR_WARN = 1e-3
# residual cap used when frequencies are exact probabilities
EXACT_RESIDUAL_CAP = 1e-6

# DIFFS[d] is c_{d+1}; c3 = c1 + c2
DIFFS = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [1.0, 0.0, -1.0]])
PAIRS = ((0, 1), (0, 2), (1, 2))


def _perm_signs() -> np.ndarray:
    """``SIGNS[p, d]`` is the sign of ``<c_d, X>`` under ordering ``PERMS[p]``."""
    out = np.zeros((6, 3), dtype=int)
    for p, order in enumerate(PERM_ORDERS):
        rank = {pos: r for r, pos in enumerate(order)}
        for d, (hi, lo) in enumerate(((0, 1), (1, 2), (0, 2))):
            out[p, d] = 1 if rank[hi] < rank[lo] else -1
    return out


SIGNS = _perm_signs()


@dataclass(frozen=True)
class TripleCounts:
    """Ordering counts for the item triple ``(i, j, k)``, indexed like ``PERMS``."""

    triple: tuple
    counts: np.ndarray

    def __post_init__(self):
        triple = tuple(int(x) for x in self.triple)
        if len(triple) != 3 or len(set(triple)) != 3:
            raise InputError(f"{self.triple} is not a triple of distinct items")
        counts = np.asarray(self.counts)
        if counts.shape != (6,):
            raise InputError("a triple has exactly 6 ordering counts")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise InputError("counts must be nonnegative integers")
        counts = counts.astype(np.int64)
        if counts.sum() < 1:
            raise InsufficientSamples(f"no observations for triple {triple}")
        counts.setflags(write=False)
        object.__setattr__(self, "triple", triple)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.total


@dataclass(frozen=True)
class ObservabilityReport:
    gamma_hat: float


@dataclass(frozen=True)
class ThreeItemEstimate:
    """Scale-free estimate for one triple.

    Attributes
    ----------
    mu_hat, sigma_hat : ndarray
        Mean and covariance in the triple's own item order. The scale is
        fixed by ``c1' sigma_hat c1 = 1``.
    alphas : ndarray, shape (3,)
        Whitened mean projected on each whitened difference normal.
    betas : ndarray, shape (3,)
        Inner products of whitened normals for pairs (1,2), (1,3), (2,3).
    case_tag : str
        ``"s>=t"`` or ``"t>s"``: which pair of differences spans the plane.
    residuals : ndarray, shape (3,)
        Cone-frequency misfit of each angle estimate.
    clamped : tuple of bool
        Which half-plane frequencies hit the clamp.
    sign_flips : tuple of int
        Signs applied to each normal before the angle search.
    """

    triple: tuple
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    case_tag: str
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clamped: tuple = (False, False, False)
    sign_flips: tuple = (1, 1, 1)
    total: int | None = None
    scales: tuple = (1.0, 1.0)

    @property
    def trace(self) -> float:
        return float(np.trace(self.sigma_hat))

    def quadratic_form(self, a: int, b: int) -> float:
        """``(e_a - e_b)' sigma_hat (e_a - e_b)`` for positions ``a, b`` in the triple."""
        s = self.sigma_hat
        return float(s[a, a] + s[b, b] - 2.0 * s[a, b])

    def to_dict(self) -> dict:
        return {
            "triple": list(self.triple),
            "mu_hat": self.mu_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "alphas": self.alphas.tolist(),
            "betas": self.betas.tolist(),
            "case_tag": self.case_tag,
            "residuals": self.residuals.tolist(),
            "clamped": list(self.clamped),
            "sign_flips": list(self.sign_flips),
            "total": self.total,
        }


def counts_from_rankings(rankings: Sequence[Sequence[int]]) -> TripleCounts:
    """Tally full rankings of one triple; positions follow sorted item labels."""
    if len(rankings) == 0:
        raise InsufficientSamples("no rankings to count")
    triple = tuple(sorted(int(x) for x in rankings[0]))
    if len(triple) != 3:
        raise InputError("rankings must order exactly three items")
    pos = {item: p for p, item in enumerate(triple)}
    index = {order: p for p, order in enumerate(PERM_ORDERS)}
    counts = np.zeros(6, dtype=np.int64)
    for r in rankings:
        if len(r) != 3 or tuple(sorted(int(x) for x in r)) != triple:
            raise MixedTriples(f"ranking {tuple(r)} is not over triple {triple}")
        counts[index[tuple(pos[int(x)] for x in r)]] += 1
    return TripleCounts(triple, counts)


def halfspace_frequency(freqs, d: int, s: int = 1) -> float:
    """Frequency of ``s * <c_d, X> >= 0``; ``d`` is 0, 1, 2 for c1, c2, c3."""
    f = _as_freqs(freqs)
    return float(f[SIGNS[:, d] == s].sum())


def cone_frequency(freqs, d1: int, s1: int, d2: int, s2: int) -> float:
    """Frequency of ``s1 <c_d1, X> >= 0`` and ``s2 <c_d2, X> >= 0``."""
    if d1 == d2:
        raise InputError("a cone needs two different difference vectors")
    f = _as_freqs(freqs)
    return float(f[(SIGNS[:, d1] == s1) & (SIGNS[:, d2] == s2)].sum())


def _as_freqs(freqs) -> np.ndarray:
    if isinstance(freqs, TripleCounts):
        return freqs.frequencies
    f = np.asarray(freqs, dtype=float)
    if f.shape != (6,):
        raise InputError("expected 6 ordering frequencies")
    return f


def estimate_alphas(freqs, gamma_floor: float) -> tuple[np.ndarray, tuple]:
    """Probit transform of the three half-plane frequencies.

    Frequencies are clamped to ``[gamma_floor, 1 - gamma_floor]`` so the
    quantile stays finite. Returns the alphas and the clamp flags.
    """
    f = _as_freqs(freqs)
    raw = np.array([halfspace_frequency(f, d) for d in range(3)])
    lo, hi = gamma_floor, 1.0 - gamma_floor
    clamped = tuple(bool(x) for x in (raw < lo) | (raw > hi))
    return ndtri(np.clip(raw, lo, hi)), clamped


def _frame(theta, d1, d2):
    """Unit normals and mean of the angle-search frame.

    ``v1 = e2`` and ``v2 = (sin theta, -cos theta)``, so ``<v1, v2> = -cos theta``;
    the mean satisfies ``<m, v1> = d1`` and ``<m, v2> = d2``.
    """
    theta = np.asarray(theta, dtype=float)
    s, c = np.sin(theta), np.cos(theta)
    v1 = np.stack([np.zeros_like(theta), np.ones_like(theta)], axis=-1)
    v2 = np.stack([s, -c], axis=-1)
    m = np.stack([(d2 + d1 * c) / s, np.broadcast_to(d1, theta.shape)], axis=-1)
    return v1, v2, m


_SIGN_PAIRS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def event_probabilities(theta, d1, d2, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Masses of the four cones ``(+-v1, +-v2)`` at angle ``theta``, shape (..., 4)."""
    theta = np.asarray(theta, dtype=float)
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    theta, d1, d2 = np.broadcast_arrays(theta, d1, d2)
    v1, v2, m = _frame(theta, d1, d2)
    sg = np.array(_SIGN_PAIRS, dtype=float)
    n1 = v1[..., None, :] * sg[:, 0, None]
    n2 = v2[..., None, :] * sg[:, 1, None]
    mean = np.broadcast_to(m[..., None, :], n1.shape)
    return cone_mass(n1, n2, mean, tol)


def _objective(theta, d1, d2, observed, tol):
    probs = event_probabilities(theta, d1[..., None], d2[..., None], tol)
    return np.abs(probs - observed[..., None, :]).max(axis=-1)


def estimate_angles(d1, d2, observed, tol: float = DEFAULT_TOL, grid_points: int = GRID_POINTS):
    """Vectorized angle search for several normal pairs at once.

    Parameters
    ----------
    d1, d2 : ndarray, shape (K,)
        Nonnegative projected means with ``d1 >= d2``.
    observed : ndarray, shape (K, 4)
        Observed frequencies of the cones ``(+v1,+v2), (+v1,-v2), (-v1,+v2),
        (-v1,-v2)``.
    grid_points : int
        Size of the coarse angle grid that brackets the golden-section search.

    Returns
    -------
    beta : ndarray, shape (K,)
        ``-cos(theta_hat)``.
    residual : ndarray, shape (K,)
        Largest cone misfit at ``theta_hat``.
    """
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if grid_points < 3:
        raise InputError("the angle grid needs at least 3 points")
    grid = np.linspace(THETA_MIN, np.pi - THETA_MIN, int(grid_points))
    vals = _objective(grid[None, :], d1, d2, observed, tol)
    best = np.argmin(vals, axis=1)
    step = grid[1] - grid[0]
    lo = np.maximum(grid[best] - step, THETA_MIN)
    hi = np.minimum(grid[best] + step, np.pi - THETA_MIN)
    # golden-section search on the bracketing cells
    g = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - g * (hi - lo)
    x2 = lo + g * (hi - lo)
    f1 = _objective(x1[:, None], d1, d2, observed, tol)[:, 0]
    f2 = _objective(x2[:, None], d1, d2, observed, tol)[:, 0]
    while np.max(hi - lo) > GOLDEN_TOL:
        left = f1 <= f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        new = np.where(left, hi - g * (hi - lo), lo + g * (hi - lo))
        fn = _objective(new[:, None], d1, d2, observed, tol)[:, 0]
        x2, f2, x1, f1 = (
            np.where(left, x1, new),
            np.where(left, f1, fn),
            np.where(left, new, x2),
            np.where(left, fn, f2),
        )
    theta = 0.5 * (lo + hi)
    resid = _objective(theta[:, None], d1, d2, observed, tol)[:, 0]
    grid_best = vals[np.arange(len(best)), best]
    use_grid = grid_best < resid
    theta = np.where(use_grid, grid[best], theta)
    resid = np.where(use_grid, grid_best, resid)
    return -np.cos(theta), resid


def estimate_angle(d1: float, d2: float, observed, residual_cap: float = np.inf,
                   tol: float = DEFAULT_TOL, grid_points: int = GRID_POINTS) -> tuple[float, float]:
    """Single-pair version of :func:`estimate_angles`.

    Raises
    ------
    NoFeasibleAngle
        If the best misfit exceeds ``residual_cap``.
    """
    if not d1 >= d2 >= 0:
        raise InputError(f"need d1 >= d2 >= 0, got ({d1}, {d2})")
    beta, resid = estimate_angles(
        [d1], [d2], np.asarray(observed, dtype=float)[None, :], tol, grid_points
    )
    if resid[0] > residual_cap:
        raise NoFeasibleAngle(f"best cone misfit {resid[0]:.3g} exceeds {residual_cap:.3g}")
    return float(beta[0]), float(resid[0])


def reconstruct_three(alphas, betas, triple=(0, 1, 2), **diagnostics) -> ThreeItemEstimate:
    """Rebuild ``(mu, Sigma)`` from alphas and whitened-normal inner products.

    ``betas`` are ``(beta_12, beta_13, beta_23)``. The scale is fixed by
    mapping ``c1`` to ``(1, 0)``; ``c2`` and ``c3`` then have lengths ``s``
    and ``t`` solving ``c3 = c1 + c2`` in the plane.
    """
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)
    b12, b13, _ = betas
    if max(abs(b12), abs(b13)) > 1.0 - ANGLE_FLOOR:
        raise SingularSystem("whitened normals are (nearly) parallel")
    r12, r13 = np.sqrt(1.0 - b12 * b12), np.sqrt(1.0 - b13 * b13)
    system = np.array([[b13, b12], [r13, r12]])
    det = b13 * r12 - b12 * r13
    if abs(det) < 1e-12:
        raise SingularSystem(f"scale system is singular (det = {det:.3g})")
    t, neg_s = np.linalg.solve(system, np.array([1.0, 0.0]))
    s = -neg_s
    if s <= 0 or t <= 0:
        raise NegativeScale(f"solved scales s = {s:.4g}, t = {t:.4g}")
    if s >= t:
        case_tag, other, beta, scale = "s>=t", 1, b12, s
    else:
        case_tag, other, beta, scale = "t>s", 2, b13, t
    c = DIFFS[[0, other]]
    b = np.array([[1.0, beta], [0.0, np.sqrt(1.0 - beta * beta)]])
    a = b @ np.diag([1.0, scale]) @ np.linalg.inv(c @ c.T)
    root = a @ c
    sigma = root.T @ root
    sigma = 0.5 * (sigma + sigma.T)
    q = alphas[[0, other]]
    mu = root.T @ np.linalg.solve(b.T, q)
    return ThreeItemEstimate(
        tuple(triple), mu, sigma, alphas, betas, case_tag, scales=(float(s), float(t)),
        **diagnostics,
    )


def residual_cap_for(total: int | None) -> float:
    if total is None:
        return EXACT_RESIDUAL_CAP
    return 10.0 * np.sqrt(np.log(6.0 * total) / total)


def estimate_from_frequencies(
    freqs,
    triple=(0, 1, 2),
    total: int | None = None,
    tol: float = DEFAULT_TOL,
    grid_points: int = GRID_POINTS,
) -> ThreeItemEstimate:
    """Run the estimator on ordering frequencies.

    ``total`` is the sample size behind ``freqs``; ``None`` means the
    frequencies are exact probabilities.
    """
    f = _as_freqs(freqs)
    gamma_floor = 1.0 / (2.0 * total) if total else 1e-15
    alphas, clamped = estimate_alphas(f, gamma_floor)
    signs = np.where(alphas >= 0, 1, -1)
    d = np.abs(alphas)
    d1 = np.empty(3)
    d2 = np.empty(3)
    observed = np.empty((3, 4))
    swapped = np.zeros(3, dtype=bool)
    for p, (i, j) in enumerate(PAIRS):
        if d[j] > d[i]:
            i, j = j, i
            swapped[p] = True
        d1[p], d2[p] = d[i], d[j]
        for e, (g1, g2) in enumerate(_SIGN_PAIRS):
            observed[p, e] = cone_frequency(f, i, g1 * signs[i], j, g2 * signs[j])
    beta_v, resid = estimate_angles(d1, d2, observed, tol, grid_points)
    cap = residual_cap_for(total)
    if np.any(resid > cap):
        worst = int(np.argmax(resid))
        raise NoFeasibleAngle(
            f"pair {PAIRS[worst]}: cone misfit {resid[worst]:.3g} exceeds cap {cap:.3g}"
        )
    betas = np.array([signs[i] * signs[j] for i, j in PAIRS]) * beta_v
    return reconstruct_three(
        alphas,
        betas,
        triple,
        residuals=resid,
        clamped=clamped,
        sign_flips=tuple(int(x) for x in signs),
        total=total,
    )


def estimate_triple(
    counts: TripleCounts,
    min_samples: int = MIN_SAMPLES_PER_TRIPLE,
    gamma_warn: float = GAMMA_FLOOR_WARN,
    tol: float = DEFAULT_TOL,
    grid_points: int = GRID_POINTS,
) -> tuple[ThreeItemEstimate, ObservabilityReport]:
    """Estimate a triple's model from its ordering counts.

    Warns with :class:`ObservabilityTooLow` when some ordering is rarer
    than ``gamma_warn``; estimation still proceeds.
    """
    if counts.total < min_samples:
        raise InsufficientSamples(
            f"triple {counts.triple}: {counts.total} < {min_samples} observations"
        )
    report = ObservabilityReport(float(counts.frequencies.min()))
    if report.gamma_hat < gamma_warn:
        warnings.warn(
            f"triple {counts.triple}: rarest ordering frequency {report.gamma_hat:.2g}",
            ObservabilityTooLow,
            stacklevel=2,
        )
    est = estimate_from_frequencies(
        counts.frequencies, counts.triple, counts.total, tol, grid_points
    )
    return est, report


# counts CSV

COUNTS_HEADER = ["i", "j", "k", "perm", "count"]


def write_counts_csv(path: Union[str, PathLike], counts: Iterable[TripleCounts]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COUNTS_HEADER)
        for tc in sorted(counts, key=lambda c: c.triple):
            for code, cnt in zip(PERMS, tc.counts):
                w.writerow([*tc.triple, code, int(cnt)])


def read_counts_csv(path: Union[str, PathLike]) -> list[TripleCounts]:
    """Parse a counts CSV; orderings without a row count as zero."""
    table: dict[tuple, np.ndarray] = {}
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != COUNTS_HEADER:
            raise ParseError(f"{path}: line 1: expected header {','.join(COUNTS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ParseError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
            try:
                triple = tuple(int(x) for x in row[:3])
                count = int(row[4])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            code = row[3].strip()
            if code not in PERMS:
                raise ParseError(f"{path}: line {lineno}: unknown ordering code {code!r}")
            if count < 0:
                raise ParseError(f"{path}: line {lineno}: negative count")
            if len(set(triple)) != 3:
                raise ParseError(f"{path}: line {lineno}: repeated item in {triple}")
            if (triple, code) in seen:
                raise ParseError(f"{path}: line {lineno}: duplicate row for {triple} {code}")
            seen.add((triple, code))
            table.setdefault(triple, np.zeros(6, dtype=np.int64))[PERMS.index(code)] = count
    out = []
    for triple in sorted(table):
        if table[triple].sum() == 0:
            raise ParseError(f"{path}: triple {triple} has no observations")
        out.append(TripleCounts(triple, table[triple]))
    return out
