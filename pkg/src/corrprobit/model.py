"""Correlated probit models and their normalizations.

A model is a Gaussian utility vector ``X ~ N(mu, sigma)``. Choices only see
the ordering of utilities, so shifting every utility by the same (random)
amount or scaling all of them by ``t > 0`` changes nothing observable. Two
canonical representatives of each equivalence class are supported:

* the sum-zero form: ``<mu, 1> = 0``, ``sigma @ 1 = 0``, ``tr(sigma) = n``;
* the difference form: ``mu[0] = 0``, ``sigma[0, :] = 0``, ``tr(sigma) = n - 1``
  (item 0's utility pinned to zero).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike
from typing import Union

import numpy as np

from .errors import (
    AsymmetricInput,
    DegenerateCovariance,
    InputError,
    NormalizationViolated,
)

# Relative to the trace: eigenvalues below this count as zero.
RANK_TOL = 1e-8
SYMMETRY_TOL = 1e-12
INVARIANT_TOL = 1e-9
PRECONDITION_TOL = 1e-6


@dataclass(frozen=True)
class ProbitModel:
    mu: np.ndarray
    sigma: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        sigma = np.array(self.sigma, dtype=float)
        n = mu.shape[0]
        if n < 2:
            raise InputError(f"need at least 2 items, got {n}")
        if sigma.shape != (n, n):
            raise InputError(f"sigma has shape {sigma.shape}, expected {(n, n)}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise InputError("non-finite model parameters")
        scale = max(np.abs(sigma).max(), 1.0)
        if np.abs(sigma - sigma.T).max() > SYMMETRY_TOL * scale:
            raise AsymmetricInput("sigma is not symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def restrict(self, items) -> "ProbitModel":
        """Marginal model on a subset of items (in the given order)."""
        idx = np.asarray(items, dtype=int)
        return ProbitModel(self.mu[idx], self.sigma[np.ix_(idx, idx)])

    def rescaled(self, t: float) -> "ProbitModel":
        """The model of ``t * X``; same choice law for ``t > 0``."""
        return ProbitModel(t * self.mu, t * t * self.sigma, self.normalized)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "normalized": bool(self.normalized),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProbitModel":
        try:
            n = int(data["n"])
            model = cls(data["mu"], data["sigma"], bool(data.get("normalized", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed model record: {exc}") from exc
        if model.n != n:
            raise InputError(f"declared n={n} but mu has {model.n} entries")
        if model.normalized:
            check_normalized(model)
        return model


@dataclass(frozen=True)
class NormalizationReport:
    """Outcome of :func:`normalize`.

    ``scale`` is the divisor ``t`` of the covariance (utilities are divided by
    ``sqrt(t)``); ``max_pairwise_shift`` is the largest change of any pairwise
    choice probability, which should be at rounding level.
    """

    scale: float
    max_pairwise_shift: float
    eigenvalues: np.ndarray = field(repr=False)


def centering(n: int) -> np.ndarray:
    return np.eye(n) - np.full((n, n), 1.0 / n)


def hyperplane_eigenvalues(sigma: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of ``sigma``; the first is the one along ``1``."""
    return np.linalg.eigvalsh(sigma)


def check_normalized(model: ProbitModel, tol: float = INVARIANT_TOL) -> None:
    """Raise :class:`NormalizationViolated` unless the sum-zero invariants hold."""
    n = model.n
    mu, sigma = model.mu, model.sigma
    if abs(mu.sum()) > tol:
        raise NormalizationViolated(f"<mu, 1> = {mu.sum():.3g}")
    if np.abs(sigma.sum(axis=1)).max() > tol:
        raise NormalizationViolated("sigma @ 1 != 0")
    if abs(np.trace(sigma) - n) > tol:
        raise NormalizationViolated(f"tr(sigma) = {np.trace(sigma):.12g}, expected {n}")
    _check_rank(sigma, n)


def _check_rank(sigma: np.ndarray, n: int) -> np.ndarray:
    evals = hyperplane_eigenvalues(sigma)
    trace = max(np.trace(sigma), 1e-300)
    if evals[0] < -RANK_TOL * trace:
        raise DegenerateCovariance(f"negative eigenvalue {evals[0]:.3g}")
    if n > 1 and evals[1] <= RANK_TOL * trace:
        raise DegenerateCovariance(
            f"rank below n-1: second smallest eigenvalue {evals[1]:.3g}"
        )
    return evals


def _pairwise_z(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    d = np.diag(sigma)
    var = d[:, None] + d[None, :] - 2 * sigma
    diff = mu[:, None] - mu[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / np.sqrt(var)
    np.fill_diagonal(z, 0.0)
    return z


def normalize(model: ProbitModel) -> tuple[ProbitModel, NormalizationReport]:
    """Map a model to the sum-zero representative of its choice class."""
    from scipy.special import ndtr

    n = model.n
    m = centering(n)
    sig = m @ model.sigma @ m
    sig = 0.5 * (sig + sig.T)
    t = np.trace(sig) / n
    if not t > RANK_TOL:
        raise DegenerateCovariance(f"projected trace {n * t:.3g} is not positive")
    mu = (m @ model.mu) / np.sqrt(t)
    sig = sig / t
    # exact bookkeeping of the invariants
    mu = mu - mu.mean()
    evals = _check_rank(sig, n)
    out = ProbitModel(mu, sig, normalized=True)
    before = ndtr(_pairwise_z(model.mu, model.sigma))
    after = ndtr(_pairwise_z(out.mu, out.sigma))
    shift = float(np.nanmax(np.abs(before - after))) if n > 1 else 0.0
    return out, NormalizationReport(float(t), shift, evals)


def normalized(model: ProbitModel) -> ProbitModel:
    return normalize(model)[0]


def to_diffform(model: ProbitModel) -> ProbitModel:
    """Sum-zero form -> difference form (utilities measured against item 0)."""
    try:
        check_normalized(model, PRECONDITION_TOL)
    except DegenerateCovariance as exc:
        raise NormalizationViolated(str(exc)) from exc
    n = model.n
    mv = np.eye(n) - np.outer(np.ones(n), np.eye(n)[0])
    sig = mv @ model.sigma @ mv.T
    t = np.trace(sig) / (n - 1)
    mu = (mv @ model.mu) / np.sqrt(t)
    sig = sig / t
    mu[0] = 0.0
    sig[0, :] = 0.0
    sig[:, 0] = 0.0
    return ProbitModel(mu, 0.5 * (sig + sig.T), normalized=False)


def check_diffform(model: ProbitModel, tol: float = PRECONDITION_TOL) -> None:
    n = model.n
    if abs(model.mu[0]) > tol or np.abs(model.sigma[0]).max() > tol:
        raise NormalizationViolated("item 0 is not pinned to zero")
    if abs(np.trace(model.sigma) - (n - 1)) > tol:
        raise NormalizationViolated(
            f"tr(sigma) = {np.trace(model.sigma):.12g}, expected {n - 1}"
        )


def from_diffform(model: ProbitModel) -> ProbitModel:
    """Difference form -> sum-zero form."""
    check_diffform(model)
    return normalize(model)[0]


def save_model(model: ProbitModel, path: Union[str, PathLike]) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path: Union[str, PathLike]) -> ProbitModel:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    return ProbitModel.from_dict(data)
