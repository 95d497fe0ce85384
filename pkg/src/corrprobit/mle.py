"""Maximum-likelihood fitting of correlated probit models.

The covariance is parameterized as ``Sigma = M F F' M`` (``M`` centers on
the hyperplane orthogonal to ``1``), so every iterate is a valid model.
Choice probabilities ignore shifts and scale; a quadratic penalty pins
``<mu, 1> = 0`` and ``tr(Sigma) = n`` so the optimum is isolated. A weak
ridge toward the exchangeable covariance selects a fit along directions the
data cannot see (pairwise data leave most of ``Sigma`` unidentified).

Likelihood terms:

* pairwise: ``P{X_i > X_j} = Phi((mu_i - mu_j) / sigma_ij)``;
* triples: ``P{X_a > X_b > X_c}`` is a bivariate normal orthant
  ``F2(h, k, rho)`` of the two successive differences.

Both come with analytic gradients, and optimization is deterministic
L-BFGS from a seeded start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_ndtr

from .aggregator import repair_psd
from .errors import InputError, NonFiniteLikelihood
from .estimator3 import TripleCounts
from .model import ProbitModel, centering, normalize
from .probability import DEFAULT_TOL, PERM_ORDERS, bvn_cdf, bvn_cdf_grad

PENALTY = 1.0
# weak pull toward the exchangeable covariance; picks a fit along flat directions
SHRINK = 1e-4
# on the per-observation objective; far below the sampling noise of the gradient
GTOL = 1e-5
INIT_NOISE = 0.1
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FitResult:
    model: ProbitModel
    nll: float
    iterations: int
    converged: bool
    repaired: bool = False


def pairwise_nll(mu: np.ndarray, sigma: np.ndarray, wins: np.ndarray, grad: bool = False):
    """Negative log-likelihood of a win-count matrix.

    ``wins[i, j]`` counts observations where ``i`` beat ``j``.
    Returns the value, or ``(value, d/dmu, d/dSigma)`` when ``grad`` is set.
    """
    ii, jj = np.nonzero(wins)
    w = wins[ii, jj].astype(float)
    d = np.diag(sigma)
    var = d[ii] + d[jj] - 2.0 * sigma[ii, jj]
    if np.any(var <= 0):
        return (np.inf, None, None) if grad else np.inf
    s = np.sqrt(var)
    diff = mu[ii] - mu[jj]
    z = diff / s
    logp = log_ndtr(z)
    value = -float(w @ logp)
    if not grad:
        return value
    # d log Phi(z) / dz = phi(z) / Phi(z)
    ratio = np.exp(-0.5 * z * z - _LOG_SQRT_2PI - logp)
    gz = -w * ratio
    n = mu.shape[0]
    gmu = np.zeros(n)
    np.add.at(gmu, ii, gz / s)
    np.add.at(gmu, jj, -gz / s)
    # dz/dvar = -z / (2 var); dvar/dSigma = c c'
    gv = gz * (-0.5 * z / var)
    gs = np.zeros((n, n))
    np.add.at(gs, (ii, ii), gv)
    np.add.at(gs, (jj, jj), gv)
    np.add.at(gs, (ii, jj), -gv)
    np.add.at(gs, (jj, ii), -gv)
    return value, gmu, gs


def _ordering_vectors():
    """Local difference vectors (6, 2, 3) for the orderings of a triple."""
    eye = np.eye(3)
    out = np.zeros((6, 2, 3))
    for p, o in enumerate(PERM_ORDERS):
        out[p, 0] = eye[o[0]] - eye[o[1]]
        out[p, 1] = eye[o[1]] - eye[o[2]]
    return out


_ORDER_VECS = _ordering_vectors()


def triple_nll(
    mu: np.ndarray,
    sigma: np.ndarray,
    triples: np.ndarray,
    counts: np.ndarray,
    grad: bool = False,
    tol: float = DEFAULT_TOL,
):
    """Negative log-likelihood of triple ordering counts.

    Parameters
    ----------
    triples : ndarray, shape (T, 3)
    counts : ndarray, shape (T, 6)
        Columns follow ``PERMS``.
    """
    triples = np.asarray(triples, dtype=int)
    counts = np.asarray(counts, dtype=float)
    mu3 = mu[triples]  # (T, 3)
    sig3 = sigma[triples[:, :, None], triples[:, None, :]]  # (T, 3, 3)
    c1 = _ORDER_VECS[None, :, 0, :]  # (1, 6, 3)
    c2 = _ORDER_VECS[None, :, 1, :]
    m1 = np.einsum("pk,tk->tp", _ORDER_VECS[:, 0], mu3)
    m2 = np.einsum("pk,tk->tp", _ORDER_VECS[:, 1], mu3)
    sc1 = np.einsum("tkl,pl->tpk", sig3, _ORDER_VECS[:, 0])
    sc2 = np.einsum("tkl,pl->tpk", sig3, _ORDER_VECS[:, 1])
    v1 = np.einsum("tpk,pk->tp", sc1, _ORDER_VECS[:, 0])
    v2 = np.einsum("tpk,pk->tp", sc2, _ORDER_VECS[:, 1])
    v12 = np.einsum("tpk,pk->tp", sc1, _ORDER_VECS[:, 1])
    if np.any(v1 <= 0) or np.any(v2 <= 0):
        return (np.inf, None, None) if grad else np.inf
    s1, s2 = np.sqrt(v1), np.sqrt(v2)
    h, k = m1 / s1, m2 / s2
    rho = np.clip(v12 / (s1 * s2), -1 + 1e-12, 1 - 1e-12)
    prob = np.maximum(bvn_cdf(h, k, rho, tol), 1e-300)
    value = -float(np.sum(counts * np.log(prob)))
    if not grad:
        return value
    dh, dk, dr = bvn_cdf_grad(h, k, rho)
    gp = -counts / prob
    gh, gk, gr = gp * dh, gp * dk, gp * dr
    # local (T, 3) mean gradient
    gmu3 = (gh / s1)[..., None] * c1 + (gk / s2)[..., None] * c2
    gmu3 = gmu3.sum(axis=1)
    a11 = -gh * m1 / (2 * v1 * s1) - gr * rho / (2 * v1)
    a22 = -gk * m2 / (2 * v2 * s2) - gr * rho / (2 * v2)
    a12 = gr / (2 * s1 * s2)
    outer11 = c1[..., :, None] * c1[..., None, :]
    outer22 = c2[..., :, None] * c2[..., None, :]
    outer12 = c1[..., :, None] * c2[..., None, :]
    outer12 = outer12 + np.swapaxes(outer12, -1, -2)
    gs3 = (
        a11[..., None, None] * outer11
        + a22[..., None, None] * outer22
        + a12[..., None, None] * outer12
    ).sum(axis=1)
    n = mu.shape[0]
    gmu = np.zeros(n)
    np.add.at(gmu, triples, gmu3)
    gs = np.zeros((n, n))
    np.add.at(gs, (triples[:, :, None], triples[:, None, :]), gs3)
    return value, gmu, gs


def _unpack(theta, n):
    return theta[:n], theta[n:].reshape(n, n)


def _fit(n: int, loss, total: float, rng_seed, maxiter: int) -> FitResult:
    m = centering(n)
    rng = np.random.default_rng(rng_seed)
    f0 = np.eye(n) + INIT_NOISE * rng.standard_normal((n, n))
    anchor = n / (n - 1) * m
    theta0 = np.r_[np.zeros(n), f0.ravel()]

    def objective(theta):
        mu, f = _unpack(theta, n)
        g = m @ f
        sigma = g @ g.T
        value, gmu, gs = loss(mu, sigma)
        if not np.isfinite(value):
            return np.inf, np.zeros_like(theta)
        value /= total
        gmu = gmu / total
        gs = gs / total
        tr = np.trace(sigma) - n
        sm = mu.sum()
        dev = sigma - anchor
        value += PENALTY * (tr * tr + sm * sm) + SHRINK * float(np.sum(dev * dev))
        gmu = gmu + 2 * PENALTY * sm
        gs = 0.5 * (gs + gs.T) + 2 * PENALTY * tr * np.eye(n) + 2 * SHRINK * dev
        gf = 2.0 * m @ gs @ g
        return value, np.r_[gmu, gf.ravel()]

    res = minimize(
        objective, theta0, jac=True, method="L-BFGS-B",
        options={"maxiter": maxiter, "gtol": GTOL, "ftol": 1e-15, "maxcor": 20},
    )
    if not np.isfinite(res.fun):
        raise NonFiniteLikelihood("likelihood became non-finite during fitting")
    mu, f = _unpack(res.x, n)
    g = m @ f
    sigma = g @ g.T
    # flat directions of the likelihood may leave Sigma rank deficient
    sigma, repaired = repair_psd(sigma * n / np.trace(sigma), n)
    model, _ = normalize(ProbitModel(mu, sigma))
    nll = float(loss(model.mu, model.sigma)[0])
    if not np.isfinite(nll):
        raise NonFiniteLikelihood("fitted model has non-finite likelihood")
    return FitResult(model, nll, int(res.nit), bool(res.success), repaired)


def fit_probit_pairwise_mle(wins: np.ndarray, rng_seed=0, maxiter: int = 3000) -> FitResult:
    """Fit a probit model to pairwise win counts."""
    wins = np.asarray(wins)
    if wins.ndim != 2 or wins.shape[0] != wins.shape[1]:
        raise InputError("wins must be a square count matrix")
    total = float(wins.sum())
    if total <= 0:
        raise InputError("no pairwise observations")
    return _fit(wins.shape[0], lambda mu, s: pairwise_nll(mu, s, wins, True), total,
                rng_seed, maxiter)


def fit_probit_triple_mle(
    counts: Sequence[TripleCounts], n: int, rng_seed=0, maxiter: int = 3000,
    tol: float = DEFAULT_TOL,
) -> FitResult:
    """Fit a probit model to best-of-three ordering counts."""
    if len(counts) == 0:
        raise InputError("no triple observations")
    triples = np.array([c.triple for c in counts], dtype=int)
    table = np.array([c.counts for c in counts], dtype=float)
    if triples.max() >= n:
        raise InputError("triple item outside 0..n-1")
    total = float(table.sum())
    return _fit(
        n, lambda mu, s: triple_nll(mu, s, triples, table, True, tol), total, rng_seed, maxiter
    )


def sample_pairwise_wins(model: ProbitModel, total: int, rng: np.random.Generator) -> np.ndarray:
    """Win counts from ``total`` comparisons of uniformly random pairs."""
    n = model.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    alloc = rng.multinomial(total, np.full(len(pairs), 1.0 / len(pairs)))
    from scipy.special import ndtr

    wins = np.zeros((n, n), dtype=np.int64)
    d = np.diag(model.sigma)
    for (i, j), m in zip(pairs, alloc):
        if m == 0:
            continue
        p = ndtr((model.mu[i] - model.mu[j]) / np.sqrt(d[i] + d[j] - 2 * model.sigma[i, j]))
        w = rng.binomial(m, p)
        wins[i, j] += w
        wins[j, i] += m - w
    return wins
