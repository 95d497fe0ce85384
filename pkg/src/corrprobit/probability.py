"""Choice probabilities of correlated probit models.

Every ranking event on three items is a cone in the plane of utility
differences. After whitening, the mass of a cone
``{z : <n1, z> >= 0, <n2, z> >= 0}`` under ``N(m, I)`` reduces to a one
dimensional integral over the polar angle. With ``u(t) = (cos t, sin t)``,
``p = <m, u(t)>`` and ``q = <m, u(t)^perp>`` the radial integral is closed
form and

    mass = int_{wedge} exp(-|m|^2 / 2) / (2 pi) + phi(q) p Phi(p) dt.

The angular integral is evaluated by vectorized adaptive Gauss-Kronrod
quadrature, so thousands of wedges are integrated in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (
    DegenerateCovariance,
    InputError,
    IntegrationFailure,
    ParallelVectors,
    ZeroVariancePair,
)
from .model import RANK_TOL, ProbitModel

#: Orderings of a triple ``(i, j, k)``, best first; ``a, b, c`` name positions.
PERMS = ("abc", "acb", "bac", "bca", "cab", "cba")
PERM_ORDERS = tuple(tuple("abc".index(ch) for ch in code) for code in PERMS)

DEFAULT_TOL = 1e-10
MAX_ROUNDS = 60
MAX_PANELS = 2_000_000

# Orthonormal basis of the plane orthogonal to (1, 1, 1).
PROJECTION = np.array(
    [
        [1.0, 1.0, -2.0],
        [1.0, -1.0, 0.0],
    ]
) / np.array([[np.sqrt(6.0)], [np.sqrt(2.0)]])

# Gauss-Kronrod 7/15 rule (QUADPACK qk15 constants).
_XGK = np.array(
    [
        0.991455371120812639206854697526329,
        0.949107912342758524526189684047851,
        0.864864423359769072789712788640926,
        0.741531185599394439863864773280788,
        0.586087235467691130294144845693013,
        0.405845151377397166906606412076961,
        0.207784955007898467600689403773245,
        0.000000000000000000000000000000000,
    ]
)
_WGK = np.array(
    [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
    ]
)
_WG = np.array(
    [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
    ]
)
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KWEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
_GWEIGHTS = np.zeros(15)
# Gauss nodes are the odd-indexed Kronrod nodes.
for _pos, _w in zip((1, 3, 5), _WG[:3]):
    _GWEIGHTS[_pos] = _w
    _GWEIGHTS[14 - _pos] = _w
_GWEIGHTS[7] = _WG[3]

_INV_2PI = 1.0 / (2.0 * np.pi)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_BREAK_OFFSETS = np.array([-27.0, -9.0, -3.0, -1.0, 0.0, 1.0, 3.0, 9.0, 27.0])


def _polar_density(t: np.ndarray, m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Angular density of ``N(m, I)`` at polar angle ``t`` (broadcasting)."""
    c, s = np.cos(t), np.sin(t)
    p = m1 * c + m2 * s
    q = m2 * c - m1 * s
    r2 = m1 * m1 + m2 * m2
    return np.exp(-0.5 * r2) * _INV_2PI + _INV_SQRT_2PI * np.exp(-0.5 * q * q) * p * ndtr(p)


def _gk15(a, b, m1, m2):
    half = 0.5 * (b - a)
    center = 0.5 * (a + b)
    t = center[:, None] + half[:, None] * _NODES[None, :]
    f = _polar_density(t, m1[:, None], m2[:, None])
    kron = half * (f @ _KWEIGHTS)
    gauss = half * (f @ _GWEIGHTS)
    # QUADPACK error estimate
    avg = 0.5 * (f @ _KWEIGHTS)
    resasc = np.abs(half) * (np.abs(f - avg[:, None]) @ _KWEIGHTS)
    err = np.abs(kron - gauss)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = resasc * np.minimum(1.0, (200.0 * err / resasc) ** 1.5)
    err = np.where((resasc > 0) & (err > 0), scaled, err)
    # below this the estimate is roundoff, so refining cannot help
    roundoff = 50.0 * np.finfo(float).eps * np.abs(half) * (np.abs(f) @ _KWEIGHTS)
    return kron, err, roundoff


def wedge_mass(
    lo: np.ndarray,
    hi: np.ndarray,
    mean: np.ndarray,
    tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """Mass of the angular wedges ``lo <= angle <= hi`` under ``N(mean, I)``.

    Parameters
    ----------
    lo, hi : array_like, shape (K,)
        Wedge limits in radians, ``0 <= hi - lo <= 2 pi``.
    mean : array_like, shape (K, 2)
        Mean of each isotropic Gaussian.
    tol : float
        Absolute error target for every wedge.

    Returns
    -------
    ndarray, shape (K,)

    Raises
    ------
    IntegrationFailure
        If adaptive bisection does not meet ``tol`` within the budget.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    mean = np.asarray(mean, dtype=float).reshape(-1, 2)
    k = lo.shape[0]
    m1, m2 = mean[:, 0], mean[:, 1]
    radius = np.hypot(m1, m2)
    # breakpoints cluster around the mean direction where the density peaks
    psi = np.arctan2(m2, m1)
    width = 1.0 / np.maximum(radius, 1.0)
    cand = psi[:, None] + _BREAK_OFFSETS[None, :] * width[:, None]
    cand = lo[:, None] + np.mod(cand - lo[:, None], 2.0 * np.pi)
    cand = np.minimum(cand, hi[:, None])
    pts = np.sort(np.concatenate([lo[:, None], cand, hi[:, None]], axis=1), axis=1)
    owner = np.repeat(np.arange(k), pts.shape[1] - 1)
    a = pts[:, :-1].ravel()
    b = pts[:, 1:].ravel()
    keep = b > a
    owner, a, b = owner[keep], a[keep], b[keep]

    total = np.zeros(k)
    for _ in range(MAX_ROUNDS):
        if owner.size == 0:
            return total
        if owner.size > MAX_PANELS:
            break
        val, err, roundoff = _gk15(a, b, m1[owner], m2[owner])
        local = tol * (b - a) / np.pi
        done = (err <= np.maximum(local, roundoff)) | (b - a < 1e-13)
        np.add.at(total, owner[done], val[done])
        owner, a, b = owner[~done], a[~done], b[~done]
        mid = 0.5 * (a + b)
        owner = np.concatenate([owner, owner])
        a, b = np.concatenate([a, mid]), np.concatenate([mid, b])
    raise IntegrationFailure(
        f"adaptive quadrature did not reach tolerance {tol:g}; "
        f"{owner.size} panels still open"
    )


def _cone_interval(n1: np.ndarray, n2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Angular interval of ``{z : <n1, z> >= 0, <n2, z> >= 0}``."""
    phi1 = np.arctan2(n1[:, 1], n1[:, 0])
    phi2 = np.arctan2(n2[:, 1], n2[:, 0])
    delta = np.mod(phi2 - phi1 + np.pi, 2.0 * np.pi) - np.pi
    lo = phi1 + np.maximum(delta, 0.0) - 0.5 * np.pi
    hi = phi1 + np.minimum(delta, 0.0) + 0.5 * np.pi
    return lo, hi


def cone_mass(n1, n2, mean, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``P{<n1, W> >= 0, <n2, W> >= 0}`` for ``W ~ N(mean, I)`` in the plane.

    All arguments broadcast over leading axes; normals need not be unit.
    """
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    mean = np.asarray(mean, dtype=float)
    shape = np.broadcast_shapes(n1.shape, n2.shape, mean.shape)
    n1 = np.broadcast_to(n1, shape).reshape(-1, 2)
    n2 = np.broadcast_to(n2, shape).reshape(-1, 2)
    mean = np.broadcast_to(mean, shape).reshape(-1, 2)
    lo, hi = _cone_interval(n1, n2)
    return wedge_mass(lo, hi, mean, tol).reshape(shape[:-1])


def cone_probability_zero_mean(u1, u2) -> float:
    """Standard Gaussian mass of ``{<u1, z> >= 0, <u2, z> >= 0}``.

    Parameters
    ----------
    u1, u2 : array_like, shape (2,)
        Unit normals.

    Returns
    -------
    float
        ``1/2 - arccos(<u1, u2>) / (2 pi)``.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if u1.shape != (2,) or u2.shape != (2,):
        raise InputError("cone normals must be 2-vectors")
    for u in (u1, u2):
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise InputError(f"normal {u} is not a unit vector")
    dot = float(u1 @ u2)
    if abs(dot) >= 1.0 - 1e-9:
        raise ParallelVectors(f"<u1, u2> = {dot:.12g}")
    return 0.5 - np.arccos(dot) / (2.0 * np.pi)


def bvn_cdf(h, k, rho, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``P{Y1 <= h, Y2 <= k}`` for standard bivariate normal with correlation ``rho``."""
    h, k, rho = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(rho, dtype=float)
    )
    s = np.sqrt(1.0 - rho * rho)
    n1 = np.stack([np.ones_like(h), np.zeros_like(h)], axis=-1)
    n2 = np.stack([rho, s], axis=-1)
    mean = np.stack([h, (k - rho * h) / s], axis=-1)
    return cone_mass(n1, n2, mean, tol)


def bvn_cdf_grad(h, k, rho):
    """Partial derivatives of :func:`bvn_cdf` with respect to ``h``, ``k``, ``rho``."""
    h, k, rho = (np.asarray(x, dtype=float) for x in (h, k, rho))
    s2 = 1.0 - rho * rho
    s = np.sqrt(s2)
    phi_h = _INV_SQRT_2PI * np.exp(-0.5 * h * h)
    phi_k = _INV_SQRT_2PI * np.exp(-0.5 * k * k)
    dh = phi_h * ndtr((k - rho * h) / s)
    dk = phi_k * ndtr((h - rho * k) / s)
    drho = np.exp(-(h * h - 2 * rho * h * k + k * k) / (2 * s2)) * _INV_2PI / s
    return dh, dk, drho


def pairwise_probability(model: ProbitModel, i: int, j: int) -> float:
    """``P{X_i > X_j}``."""
    if i == j:
        raise InputError("pairwise probability needs two distinct items")
    s = model.sigma
    var = s[i, i] + s[j, j] - 2.0 * s[i, j]
    if var <= RANK_TOL * max(np.trace(s), 1e-300) / model.n:
        raise ZeroVariancePair(f"Var(X_{i} - X_{j}) = {var:.3g}")
    return float(ndtr((model.mu[i] - model.mu[j]) / np.sqrt(var)))


def pairwise_matrix(model: ProbitModel) -> np.ndarray:
    """All pairwise probabilities; entry ``[i, j]`` is ``P{X_i > X_j}``."""
    s = model.sigma
    d = np.diag(s)
    var = d[:, None] + d[None, :] - 2.0 * s
    off = ~np.eye(model.n, dtype=bool)
    if np.any(var[off] <= RANK_TOL * max(np.trace(s), 1e-300) / model.n):
        raise ZeroVariancePair("some difference X_i - X_j has zero variance")
    np.fill_diagonal(var, 1.0)
    p = ndtr((model.mu[:, None] - model.mu[None, :]) / np.sqrt(var))
    np.fill_diagonal(p, 0.5)
    return p


def _triple_cone_geometry(mu3: np.ndarray, sig3: np.ndarray):
    """Whitened mean and unnormalized cone normals for a batch of triples.

    Returns ``m`` of shape (T, 2) and, for each of the 6 orderings, the two
    normals ``(T, 6, 2)`` whose cone is that ordering.
    """
    pmu = mu3 @ PROJECTION.T
    cov = PROJECTION @ sig3 @ PROJECTION.T
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance("projected triple covariance is singular") from exc
    m = np.linalg.solve(chol, pmu[..., None])[..., 0]
    eye = np.eye(3)
    firsts = np.array([eye[o[0]] - eye[o[1]] for o in PERM_ORDERS])
    seconds = np.array([eye[o[1]] - eye[o[2]] for o in PERM_ORDERS])
    # n_c = L^T P c
    lt = np.swapaxes(chol, -1, -2)
    n1 = np.einsum("tab,cb->tca", lt, firsts @ PROJECTION.T)
    n2 = np.einsum("tab,cb->tca", lt, seconds @ PROJECTION.T)
    return m, n1, n2


def triple_probabilities_from_moments(mu3, sig3, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Ordering probabilities for a batch of 3-item Gaussians.

    Parameters
    ----------
    mu3 : array_like, shape (T, 3)
    sig3 : array_like, shape (T, 3, 3)

    Returns
    -------
    ndarray, shape (T, 6)
        Columns follow :data:`PERMS`.
    """
    mu3 = np.asarray(mu3, dtype=float).reshape(-1, 3)
    sig3 = np.asarray(sig3, dtype=float).reshape(-1, 3, 3)
    m, n1, n2 = _triple_cone_geometry(mu3, sig3)
    mean = np.broadcast_to(m[:, None, :], n1.shape)
    return cone_mass(n1, n2, mean, tol)


@dataclass(frozen=True)
class RankDistribution3:
    """Probabilities of the six orderings of ``triple``, indexed like :data:`PERMS`."""

    triple: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (6,):
            raise InputError("a triple distribution has exactly 6 entries")
        object.__setattr__(self, "probs", p)

    def as_dict(self) -> dict:
        return dict(zip(PERMS, self.probs.tolist()))


def triple_rank_probabilities(
    model: ProbitModel,
    i: int,
    j: int,
    k: int,
    grid_resolution: int | None = None,
    tol: float = DEFAULT_TOL,
) -> RankDistribution3:
    """Probabilities of the six orderings of items ``(i, j, k)``.

    ``grid_resolution`` is accepted for interface compatibility; the
    quadrature is adaptive and refines until ``tol`` is met.
    """
    if len({i, j, k}) != 3:
        raise InputError(f"triple ({i}, {j}, {k}) has repeated items")
    probs = triple_rank_probabilities_batch(model, [(i, j, k)], tol)[0]
    return RankDistribution3((i, j, k), probs)


def triple_rank_probabilities_batch(
    model: ProbitModel, triples: Sequence[Sequence[int]], tol: float = DEFAULT_TOL
) -> np.ndarray:
    """Ordering probabilities for many triples at once, shape (T, 6)."""
    idx = np.asarray(triples, dtype=int).reshape(-1, 3)
    mu3 = model.mu[idx]
    sig3 = model.sigma[idx[:, :, None], idx[:, None, :]]
    return triple_probabilities_from_moments(mu3, sig3, tol)


def all_triples(n: int) -> list[tuple[int, int, int]]:
    return list(combinations(range(n), 3))


def observability(model: ProbitModel, triples=None, tol: float = DEFAULT_TOL) -> float:
    """Smallest probability of any ordering of any triple."""
    if triples is None:
        triples = all_triples(model.n)
    if len(triples) == 0:
        raise InputError("observability needs at least 3 items")
    return float(triple_rank_probabilities_batch(model, triples, tol).min())
