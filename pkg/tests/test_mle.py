import numpy as np
import pytest

from corrprobit.errors import InputError
from corrprobit.estimator3 import TripleCounts
from corrprobit.mle import (
    fit_probit_pairwise_mle,
    fit_probit_triple_mle,
    pairwise_nll,
    sample_pairwise_wins,
    triple_nll,
)
from corrprobit.model import check_normalized
from corrprobit.probability import all_triples, pairwise_matrix, triple_rank_probabilities_batch
from corrprobit.sampling import sample_triple_counts
from corrprobit.witness import pairwise_equivalent_family

from conftest import exchangeable, random_model


def finite_difference(f, mu, sigma, h=1e-6):
    gmu = np.zeros_like(mu)
    for i in range(mu.size):
        e = np.zeros_like(mu)
        e[i] = h
        gmu[i] = (f(mu + e, sigma) - f(mu - e, sigma)) / (2 * h)
    gs = np.zeros_like(sigma)
    for i in range(sigma.shape[0]):
        for j in range(sigma.shape[1]):
            e = np.zeros_like(sigma)
            e[i, j] = h
            gs[i, j] = (f(mu, sigma + e) - f(mu, sigma - e)) / (2 * h)
    return gmu, gs


def symmetric_part(g):
    return 0.5 * (g + g.T)


class TestPairwiseNll:
    def test_gradient(self, rng):
        m = random_model(rng, 4)
        wins = rng.integers(0, 50, (4, 4))
        np.fill_diagonal(wins, 0)
        _, gmu, gs = pairwise_nll(m.mu, m.sigma, wins, grad=True)
        fmu, fs = finite_difference(lambda a, b: pairwise_nll(a, b, wins), m.mu, m.sigma)
        np.testing.assert_allclose(gmu, fmu, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(symmetric_part(gs), symmetric_part(fs), rtol=1e-5, atol=1e-5)

    def test_fair_coin(self):
        wins = np.array([[0, 3], [5, 0]])
        m = exchangeable(2)
        assert pairwise_nll(m.mu, m.sigma, wins) == pytest.approx(8 * np.log(2))

    def test_zero_variance_is_infinite(self):
        wins = np.array([[0, 1], [1, 0]])
        assert pairwise_nll(np.zeros(2), np.ones((2, 2)), wins) == np.inf

    def test_equivalence_family_same_likelihood(self, rng):
        base = random_model(rng, 5)
        fam = pairwise_equivalent_family(base, rng_seed=1)
        wins = sample_pairwise_wins(base, 5000, rng)
        ref = pairwise_nll(base.mu, base.sigma, wins)
        for m in fam.members:
            assert pairwise_nll(m.mu, m.sigma, wins) == pytest.approx(ref, abs=1e-6)


class TestTripleNll:
    def test_gradient(self, rng):
        m = random_model(rng, 4)
        triples = np.array(all_triples(4))
        counts = rng.integers(1, 40, (len(triples), 6))
        _, gmu, gs = triple_nll(m.mu, m.sigma, triples, counts, grad=True)
        fmu, fs = finite_difference(
            lambda a, b: triple_nll(a, 0.5 * (b + b.T), triples, counts), m.mu, m.sigma
        )
        np.testing.assert_allclose(gmu, fmu, rtol=1e-4, atol=1e-4)
        np.testing.assert_allclose(symmetric_part(gs), symmetric_part(fs), rtol=1e-4, atol=1e-4)

    def test_matches_probabilities(self, rng):
        m = random_model(rng, 4)
        triples = np.array(all_triples(4))
        counts = rng.integers(0, 20, (len(triples), 6))
        probs = triple_rank_probabilities_batch(m, triples)
        expected = -np.sum(counts * np.log(probs))
        assert triple_nll(m.mu, m.sigma, triples, counts) == pytest.approx(expected, rel=1e-9)


class TestFits:
    def test_pairwise_exchangeable(self):
        truth = exchangeable(4)
        wins = sample_pairwise_wins(truth, 20000, np.random.default_rng(2))
        fit = fit_probit_pairwise_mle(wins)
        check_normalized(fit.model)
        assert np.abs(fit.model.mu).max() < 0.05
        # only pairwise probabilities are identified; all are coin flips here
        off = pairwise_matrix(fit.model)[~np.eye(4, dtype=bool)]
        assert np.abs(off - 0.5).max() < 0.02

    def test_pairwise_deterministic(self, rng):
        wins = sample_pairwise_wins(random_model(rng, 4), 2000, rng)
        a = fit_probit_pairwise_mle(wins, rng_seed=3)
        b = fit_probit_pairwise_mle(wins, rng_seed=3)
        np.testing.assert_array_equal(a.model.sigma, b.model.sigma)

    def test_pairwise_invalid(self):
        with pytest.raises(InputError):
            fit_probit_pairwise_mle(np.zeros((3, 3)))
        with pytest.raises(InputError):
            fit_probit_pairwise_mle(np.zeros((3, 2)))

    def test_triple_recovery(self, rng):
        truth = random_model(rng, 5)
        counts = [
            TripleCounts(t, sample_triple_counts(truth, t, 20000, rng)) for t in all_triples(5)
        ]
        fit = fit_probit_triple_mle(counts, 5)
        check_normalized(fit.model)
        assert np.abs(fit.model.mu - truth.mu).max() < 0.1
        assert np.abs(fit.model.sigma - truth.sigma).max() < 0.1

    def test_triple_invalid(self):
        with pytest.raises(InputError):
            fit_probit_triple_mle([], 4)
        with pytest.raises(InputError):
            fit_probit_triple_mle([TripleCounts((0, 1, 5), np.ones(6))], 4)


class TestSampleWins:
    def test_total_and_diagonal(self, rng):
        wins = sample_pairwise_wins(random_model(rng, 5), 1000, rng)
        assert wins.sum() == 1000
        assert np.all(np.diag(wins) == 0)
