"""Constructive negative results.

* :func:`pairwise_equivalent_family` builds distinct normalized models that
  share every pairwise choice probability with a given model, so pairwise
  comparisons cannot identify the covariance.
* :func:`lowerbound_pair` builds two zero-mean models whose covariances are
  far apart in sup norm while every triple's ranking distribution is close
  in KL divergence.

Families are built in the difference form (item 0 pinned at zero utility,
trace ``n - 1``), where pairwise probabilities have the simple form
``Phi((mu_i - mu_j) / sigma_ij)`` with ``sigma_ij^2 = S_ii + S_jj - 2 S_ij``.
Which perturbation applies depends on the mean pattern:

1. two non-pinned items share a mean: move their covariance, since their
   comparison is a fair coin whatever its variance;
2. a non-pinned item ties with item 0: inflate its variance and shift its
   covariances so only the coin-flip comparison with item 0 changes;
3. all means distinct: move the means and rescale each variance so every
   standardized difference is unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import EpsilonOutOfRange, InputError, ShrinkFailed, SupportMismatch
from .model import ProbitModel, centering, check_normalized, from_diffform, to_diffform
from .probability import DEFAULT_TOL, pairwise_matrix, triple_rank_probabilities_batch

PAIRWISE_MATCH_TOL = 1e-9
MIN_NU = 1e-10
EIGEN_MARGIN = 0.1
# means closer than this (relative) are treated as tied
TIE_TOL = 1e-12


@dataclass
class EquivalenceFamily:
    base: ProbitModel
    members: list
    case_tag: int
    perturbation_scale: float
    min_gap: float = 0.0
    max_pairwise_diff: float = 0.0
    details: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "case": self.case_tag,
            "nu": self.perturbation_scale,
            "members": len(self.members),
            "min_sigma_gap": self.min_gap,
            "max_pairwise_diff": self.max_pairwise_diff,
            **self.details,
        }


def _detect_case(mu: np.ndarray):
    """Case number and the items it uses, from difference-form means."""
    n = mu.shape[0]
    scale = max(np.abs(mu).max(), 1.0)
    for i, j in combinations(range(1, n), 2):
        if abs(mu[i] - mu[j]) <= TIE_TOL * scale:
            return 1, (i, j)
    for i in range(1, n):
        if abs(mu[i]) <= TIE_TOL * scale:
            return 2, (i,)
    return 3, ()


def _case1(mu, sig, delta, items):
    i, j = items
    s = sig.copy()
    s[i, j] += delta
    s[j, i] += delta
    return mu.copy(), s


def _case2(mu, sig, delta, items):
    (i,) = items
    n = mu.shape[0]
    s = sig.copy()
    others = [l for l in range(1, n) if l != i]
    s[i, i] += delta
    # +delta/2 keeps Var(X_i - X_l) fixed for every l other than item 0
    s[i, others] += 0.5 * delta
    s[others, i] += 0.5 * delta
    t = np.trace(s) / (n - 1)
    return mu / np.sqrt(t), s / t


def _case3(mu, sig, delta, direction):
    n = mu.shape[0]
    mt = mu + delta * direction
    st = np.zeros_like(sig)
    mid = np.arange(1, n - 1)
    st[mid, mid] = (mt[mid] / mu[mid]) ** 2 * sig[mid, mid]
    last = n - 1
    st[last, last] = (n - 1) - st[mid, mid].sum()
    if st[last, last] <= 0:
        return None
    mt[last] = np.sqrt(st[last, last] / sig[last, last]) * mu[last]
    d = np.diag(sig)
    for i, j in combinations(range(1, n), 2):
        var = d[i] + d[j] - 2 * sig[i, j]
        ratio = (mt[i] - mt[j]) / (mu[i] - mu[j])
        st[i, j] = st[j, i] = 0.5 * (st[i, i] + st[j, j] - ratio * ratio * var)
    return mt, st


def _subblock_min_eig(sig):
    return float(np.linalg.eigvalsh(sig[1:, 1:])[0])


def pairwise_equivalent_family(
    base: ProbitModel,
    count: int = 5,
    nu: float = 0.4,
    rng_seed=0,
) -> EquivalenceFamily:
    """Normalized models with exactly the pairwise probabilities of ``base``.

    Member ``m`` uses perturbation size ``nu * (1/2 + m / (2 (count - 1)))``;
    ``nu`` is halved until every member stays positive definite on the
    hyperplane with an eigenvalue margin.

    Raises
    ------
    ShrinkFailed
        If no ``nu >= 1e-10`` gives valid members.
    """
    if base.n < 3:
        raise InputError("families need at least 3 items")
    if count < 1:
        raise InputError("count must be positive")
    check_normalized(base, 1e-6)
    diff = to_diffform(base)
    mu, sig = diff.mu.copy(), diff.sigma.copy()
    n = base.n
    case, items = _detect_case(mu)
    direction = None
    if case == 3:
        rng = np.random.default_rng(rng_seed)
        direction = np.zeros(n)
        free = np.arange(1, n - 1)
        v = rng.standard_normal(free.size)
        direction[free] = v / np.linalg.norm(v)
    floor = EIGEN_MARGIN * _subblock_min_eig(sig)
    fractions = (
        np.array([1.0]) if count == 1 else 0.5 + np.arange(count) / (2.0 * (count - 1))
    )
    target = pairwise_matrix(base)
    while nu >= MIN_NU:
        members = []
        for frac in fractions:
            delta = nu * frac
            if case == 1:
                out = _case1(mu, sig, delta, items)
            elif case == 2:
                out = _case2(mu, sig, delta, items)
            else:
                out = _case3(mu, sig, delta, direction)
            if out is None or not np.all(np.isfinite(out[1])):
                break
            m_mu, m_sig = out
            if _subblock_min_eig(m_sig) < floor:
                break
            member = from_diffform(ProbitModel(m_mu, 0.5 * (m_sig + m_sig.T)))
            if np.abs(pairwise_matrix(member) - target).max() > PAIRWISE_MATCH_TOL:
                break
            members.append(member)
        if len(members) == count:
            gaps = [np.abs(m.sigma - base.sigma).max() for m in members]
            pdiff = max(np.abs(pairwise_matrix(m) - target).max() for m in members)
            return EquivalenceFamily(
                base, members, case, nu, float(min(gaps)), float(pdiff),
                {"items": [int(x) for x in items]},
            )
        nu *= 0.5
    raise ShrinkFailed("no perturbation size keeps the family valid")


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def triple_separation(base: ProbitModel, member: ProbitModel, tol: float = DEFAULT_TOL):
    """Largest total-variation distance between ranking laws over all triples."""
    triples = list(combinations(range(base.n), 3))
    p = triple_rank_probabilities_batch(base, triples, tol)
    q = triple_rank_probabilities_batch(member, triples, tol)
    tv = 0.5 * np.abs(p - q).sum(axis=1)
    k = int(np.argmax(tv))
    return float(tv[k]), triples[k]


def discrete_kl(p, q) -> float:
    """``sum p log(p / q)`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pos = p > 0
    if np.any(q[pos] <= 0):
        raise SupportMismatch("an outcome has positive probability under p only")
    return float(max(np.sum(p[pos] * np.log(p[pos] / q[pos])), 0.0))


def kl_choice_triple(model1: ProbitModel, model2: ProbitModel, triple,
                     tol: float = DEFAULT_TOL) -> float:
    """KL divergence between two models' ranking laws on one triple."""
    p = triple_rank_probabilities_batch(model1, [tuple(triple)], tol)[0]
    q = triple_rank_probabilities_batch(model2, [tuple(triple)], tol)[0]
    return discrete_kl(p, q)


@dataclass
class LowerBoundPair:
    sigma1: np.ndarray
    sigma2: np.ndarray
    epsilon: float
    i_star: int
    j_star: int
    kl_per_triple: dict

    @property
    def n(self) -> int:
        return self.sigma1.shape[0]

    @property
    def gap(self) -> float:
        return float(np.abs(self.sigma1 - self.sigma2).max())

    def models(self) -> tuple[ProbitModel, ProbitModel]:
        z = np.zeros(self.n)
        return ProbitModel(z, self.sigma1, True), ProbitModel(z, self.sigma2, True)

    def report(self) -> dict:
        kl = np.array(list(self.kl_per_triple.values()))
        return {
            "n": self.n,
            "epsilon": self.epsilon,
            "i_star": self.i_star,
            "j_star": self.j_star,
            "trace1": float(np.trace(self.sigma1)),
            "trace2": float(np.trace(self.sigma2)),
            "sup_gap": self.gap,
            "max_kl": float(kl.max()),
            "kl_bound": self.epsilon**2,
            "kl_per_triple": {
                ",".join(map(str, t)): v for t, v in sorted(self.kl_per_triple.items())
            },
        }


def lowerbound_pair(n: int, epsilon: float, i_star: int = 0, j_star: int = 1,
                    tol: float = DEFAULT_TOL) -> LowerBoundPair:
    """Two zero-mean models that triples can barely tell apart.

    ``Sigma1`` is the exchangeable covariance; ``Sigma2`` adds ``epsilon``
    to the ``(i_star, j_star)`` correlation before projecting and
    renormalizing. Their sup-norm gap is at least ``epsilon / 2``.
    """
    if n < 3:
        raise InputError("need at least 3 items")
    if not 0 < epsilon <= 2.0**-4:
        raise EpsilonOutOfRange(f"epsilon = {epsilon} not in (0, 1/16]")
    if i_star == j_star or not (0 <= i_star < n and 0 <= j_star < n):
        raise InputError("i_star and j_star must be distinct items")
    m = centering(n)
    sigma1 = n / (n - 1) * m
    bump = np.eye(n)
    bump[i_star, j_star] += epsilon
    bump[j_star, i_star] += epsilon
    sigma2 = n / ((n - 1) - 2 * epsilon / n) * (m @ bump @ m)
    sigma2 = 0.5 * (sigma2 + sigma2.T)
    z = np.zeros(n)
    m1, m2 = ProbitModel(z, sigma1), ProbitModel(z, sigma2)
    triples = list(combinations(range(n), 3))
    p = triple_rank_probabilities_batch(m1, triples, tol)
    q = triple_rank_probabilities_batch(m2, triples, tol)
    kl = {t: discrete_kl(a, b) for t, a, b in zip(triples, p, q)}
    return LowerBoundPair(sigma1, sigma2, epsilon, i_star, j_star, kl)


def dump_family(family: EquivalenceFamily) -> str:
    return json.dumps(
        {
            "base": family.base.to_dict(),
            "members": [m.to_dict() for m in family.members],
            "report": family.report(),
        },
        sort_keys=True,
        indent=1,
    )
