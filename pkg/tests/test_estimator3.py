import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from corrprobit.errors import (
    InputError,
    InsufficientSamples,
    MixedTriples,
    NegativeScale,
    NoFeasibleAngle,
    ObservabilityTooLow,
    ParseError,
    SingularSystem,
)
from corrprobit.estimator3 import (
    DIFFS,
    TripleCounts,
    cone_frequency,
    counts_from_rankings,
    estimate_alphas,
    estimate_angle,
    estimate_from_frequencies,
    estimate_triple,
    event_probabilities,
    halfspace_frequency,
    read_counts_csv,
    reconstruct_three,
    write_counts_csv,
)
from corrprobit.model import ProbitModel, centering, normalize
from corrprobit.probability import PERM_ORDERS, PERMS, observability, triple_rank_probabilities_batch
from corrprobit.sampling import sample_triple_counts

from conftest import exchangeable, random_model


def exact_freqs(model, triple=(0, 1, 2)):
    return triple_rank_probabilities_batch(model, [triple])[0]


def whitened(model):
    """Direct alphas and normal Gram matrix of a 3-item model."""
    s, mu = model.sigma, model.mu
    norms = np.sqrt(np.einsum("ij,jk,ik->i", DIFFS, s, DIFFS))
    gram = DIFFS @ s @ DIFFS.T / np.outer(norms, norms)
    return DIFFS @ mu / norms, np.array([gram[0, 1], gram[0, 2], gram[1, 2]])


def renormalized(est):
    return normalize(ProbitModel(est.mu_hat, est.sigma_hat))[0]


def observable_model(rng, gamma, n=3, mean_scale=1.0):
    while True:
        m = random_model(rng, n, mean_scale)
        if observability(m) >= gamma:
            return m


class TestTripleCounts:
    def test_one_of_each(self):
        rankings = [tuple(order) for order in PERM_ORDERS]
        tc = counts_from_rankings(rankings)
        assert tc.triple == (0, 1, 2)
        np.testing.assert_array_equal(tc.counts, np.ones(6))
        assert tc.total == 6

    def test_labels_follow_sorted_positions(self):
        tc = counts_from_rankings([(9, 4, 7)])
        assert tc.triple == (4, 7, 9)
        assert tc.counts[PERMS.index("cab")] == 1

    def test_empty_raises(self):
        with pytest.raises(InsufficientSamples):
            counts_from_rankings([])

    def test_mixed_raises(self):
        with pytest.raises(MixedTriples):
            counts_from_rankings([(0, 1, 2), (0, 1, 3)])

    @pytest.mark.parametrize("bad", [(0, 0, 1), (0, 1)])
    def test_invalid_triple(self, bad):
        with pytest.raises(InputError):
            TripleCounts(bad, np.ones(6))

    def test_zero_total_raises(self):
        with pytest.raises(InsufficientSamples):
            TripleCounts((0, 1, 2), np.zeros(6))

    def test_negative_count_raises(self):
        with pytest.raises(InputError):
            TripleCounts((0, 1, 2), [1, 1, 1, 1, 1, -1])

    def test_exchangeable_frequencies(self):
        total = 10**6
        counts = sample_triple_counts(exchangeable(3), (0, 1, 2), total, np.random.default_rng(5))
        sd = np.sqrt((1 / 6) * (5 / 6) / total)
        assert np.all(np.abs(counts / total - 1 / 6) < 4 * sd)


class TestFrequencies:
    def test_uniform_halfspace(self):
        f = np.full(6, 1 / 6)
        for d in range(3):
            assert halfspace_frequency(f, d) == pytest.approx(0.5, abs=1e-15)

    def test_point_mass(self):
        f = np.zeros(6)
        f[PERMS.index("abc")] = 1.0
        assert halfspace_frequency(f, 0, +1) == 1.0
        assert halfspace_frequency(f, 0, -1) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=6, max_size=6).filter(lambda c: sum(c) > 0))
    def test_complementarity_and_partition(self, counts):
        tc = TripleCounts((0, 1, 2), counts)
        for d in range(3):
            assert halfspace_frequency(tc, d, 1) + halfspace_frequency(tc, d, -1) == pytest.approx(1.0)
        for d1, d2 in [(0, 1), (0, 2), (1, 2)]:
            total = sum(cone_frequency(tc, d1, a, d2, b) for a in (1, -1) for b in (1, -1))
            assert total == pytest.approx(1.0)

    def test_uniform_cones(self):
        f = np.full(6, 1 / 6)
        # c1 >= 0 and c2 >= 0 is the single ordering abc
        assert cone_frequency(f, 0, 1, 1, 1) == pytest.approx(1 / 6)
        # c1 >= 0 and c2 <= 0 holds for acb and cab
        assert cone_frequency(f, 0, 1, 1, -1) == pytest.approx(1 / 3)

    def test_same_vector_raises(self):
        with pytest.raises(InputError):
            cone_frequency(np.full(6, 1 / 6), 0, 1, 0, -1)


class TestAlphas:
    def test_half(self):
        alphas, clamped = estimate_alphas(np.full(6, 1 / 6), 1e-6)
        np.testing.assert_allclose(alphas, 0.0, atol=1e-15)
        assert clamped == (False, False, False)

    def test_phi_one(self):
        # put mass Phi(1) on c1 >= 0 and split it evenly among its orderings
        p = float(ndtr(1.0))
        f = np.zeros(6)
        f[[PERMS.index(c) for c in ("abc", "acb", "cab")]] = p / 3
        f[[PERMS.index(c) for c in ("bac", "bca", "cba")]] = (1 - p) / 3
        alphas, _ = estimate_alphas(f, 1e-6)
        assert alphas[0] == pytest.approx(1.0, abs=1e-12)

    def test_clamped_bound(self):
        f = np.zeros(6)
        f[0] = 1.0
        floor = 1e-4
        alphas, clamped = estimate_alphas(f, floor)
        assert all(clamped)
        assert np.all(np.abs(alphas) <= np.sqrt(2 * np.log(1 / floor)))

    def test_exact_model(self, rng):
        for _ in range(10):
            # tail frequencies far below the quadrature tolerance are out of reach
            m = observable_model(rng, 0.01)
            alphas, _ = estimate_alphas(exact_freqs(m), 1e-15)
            np.testing.assert_allclose(alphas, whitened(m)[0], atol=1e-6)


class TestAngle:
    def test_orthogonal(self):
        beta, resid = estimate_angle(0.0, 0.0, [0.25] * 4)
        assert beta == pytest.approx(0.0, abs=1e-6)
        assert resid < 1e-8

    def test_sixth(self):
        # the (-v1, -v2) cone holds 1/6 when the normals meet at 120 degrees
        beta, _ = estimate_angle(0.0, 0.0, [1 / 6, 1 / 3, 1 / 3, 1 / 6])
        assert beta == pytest.approx(-0.5, abs=1e-6)

    def test_order_precondition(self):
        with pytest.raises(InputError):
            estimate_angle(0.1, 0.5, [0.25] * 4)

    def test_infeasible(self):
        with pytest.raises(NoFeasibleAngle):
            estimate_angle(0.0, 0.0, [0.7, 0.1, 0.1, 0.1], residual_cap=1e-3)

    def test_grid_points_validated(self):
        with pytest.raises(InputError):
            estimate_angle(0.0, 0.0, [0.25] * 4, grid_points=2)

    def test_exact_model(self, rng):
        for _ in range(10):
            m = observable_model(rng, 0.01)
            est = estimate_from_frequencies(exact_freqs(m))
            np.testing.assert_allclose(est.betas, whitened(m)[1], atol=1e-5)

    def test_events_monotone_in_angle(self, rng):
        theta = np.linspace(0.01, np.pi - 0.01, 100)
        for _ in range(20):
            d1, d2 = np.sort(rng.uniform(0, 2, 2))[::-1]
            # the (+v1, +v2) cone opens as the normals align; it may saturate
            # at the ends, where successive values agree to rounding
            probs = event_probabilities(theta, d1, d2)[:, 0]
            steps = np.diff(probs)
            assert np.all(steps > -1e-12)
            interior = (probs[1:] - probs[0] > 1e-9) & (probs[-1] - probs[:-1] > 1e-9)
            assert np.all(steps[interior] > 0)
            assert probs[-1] > probs[0]


class TestReconstruct:
    def test_exchangeable(self):
        alphas, betas = whitened(exchangeable(3))
        est = reconstruct_three(alphas, betas)
        m3 = centering(3)
        np.testing.assert_allclose(est.sigma_hat / est.sigma_hat[0, 0], m3 / m3[0, 0], atol=1e-12)
        np.testing.assert_allclose(est.mu_hat, 0.0, atol=1e-12)
        probs = triple_rank_probabilities_batch(ProbitModel(est.mu_hat, est.sigma_hat), [(0, 1, 2)])
        np.testing.assert_allclose(probs[0], 1 / 6, atol=1e-9)

    def test_fifty_random(self, rng):
        for _ in range(50):
            m = random_model(rng, 3)
            alphas, betas = whitened(m)
            fit = renormalized(reconstruct_three(alphas, betas))
            np.testing.assert_allclose(fit.mu, m.mu, atol=1e-4)
            np.testing.assert_allclose(fit.sigma, m.sigma, atol=1e-4)

    def test_invariants(self, rng):
        m = random_model(rng, 3)
        est = reconstruct_three(*whitened(m))
        np.testing.assert_allclose(est.sigma_hat @ np.ones(3), 0.0, atol=1e-12)
        assert abs(est.mu_hat.sum()) < 1e-12
        evals = np.linalg.eigvalsh(est.sigma_hat)
        assert evals[0] > -1e-12 and evals[1] > 1e-6
        assert est.quadratic_form(0, 1) == pytest.approx(1.0)
        assert est.trace >= 0.5
        assert np.all(np.abs(est.betas) < 1)

    def test_both_cases_occur(self, rng):
        tags = {reconstruct_three(*whitened(random_model(rng, 3))).case_tag for _ in range(40)}
        assert tags == {"s>=t", "t>s"}

    def test_parallel_raises(self):
        with pytest.raises(SingularSystem):
            reconstruct_three(np.zeros(3), [-1.0, 0.5, 0.5])

    def test_singular_system(self):
        with pytest.raises(SingularSystem):
            reconstruct_three(np.zeros(3), [0.3, 0.3, 0.3])

    def test_negative_scale(self):
        with pytest.raises(NegativeScale):
            reconstruct_three(np.zeros(3), [0.5, -0.5, 0.5])

    def test_sensitivity(self, rng):
        eps = 1e-3
        for _ in range(5):
            m = observable_model(rng, 0.05)
            alphas, betas = whitened(m)
            base = renormalized(reconstruct_three(alphas, betas))
            for which in range(6):
                a, b = alphas.copy(), betas.copy()
                if which < 3:
                    a[which] += eps
                else:
                    b[which - 3] += eps
                pert = renormalized(reconstruct_three(a, b))
                change = max(np.abs(pert.mu - base.mu).max(), np.abs(pert.sigma - base.sigma).max())
                assert change <= 1.0


class TestEstimateTriple:
    def test_exact_recovery(self, rng):
        for _ in range(10):
            m = observable_model(rng, 0.01)
            fit = renormalized(estimate_from_frequencies(exact_freqs(m)))
            np.testing.assert_allclose(fit.mu, m.mu, atol=1e-4)
            np.testing.assert_allclose(fit.sigma, m.sigma, atol=1e-4)

    def test_scale_invariance(self, rng):
        m = random_model(rng, 3)
        a = estimate_from_frequencies(exact_freqs(m))
        b = estimate_from_frequencies(exact_freqs(m.rescaled(3.0)))
        np.testing.assert_allclose(a.sigma_hat, b.sigma_hat, atol=1e-8)
        np.testing.assert_allclose(a.mu_hat, b.mu_hat, atol=1e-8)

    def test_identical_inputs_identical_outputs(self, rng):
        f = exact_freqs(random_model(rng, 3))
        a = estimate_from_frequencies(f)
        b = estimate_from_frequencies(f.copy())
        np.testing.assert_array_equal(a.sigma_hat, b.sigma_hat)

    def test_permutation_equivariance(self, rng):
        m = random_model(rng, 3)
        perm = [2, 0, 1]
        pm = ProbitModel(m.mu[perm], m.sigma[np.ix_(perm, perm)])
        a = renormalized(estimate_from_frequencies(exact_freqs(m)))
        b = renormalized(estimate_from_frequencies(exact_freqs(pm)))
        np.testing.assert_allclose(b.mu, a.mu[perm], atol=1e-6)
        np.testing.assert_allclose(b.sigma, a.sigma[np.ix_(perm, perm)], atol=1e-6)

    def test_exchangeable_sampled(self):
        truth = exchangeable(3)
        counts = sample_triple_counts(truth, (0, 1, 2), 10**6, np.random.default_rng(11))
        est, report = estimate_triple(TripleCounts((0, 1, 2), counts))
        fit = renormalized(est)
        assert np.abs(fit.sigma - truth.sigma).max() <= 0.03
        assert np.abs(fit.mu).max() <= 0.03
        assert 0 <= report.gamma_hat <= 1 / 6 + 1e-3

    def test_random_sampled(self, rng):
        m = observable_model(rng, 0.05)
        counts = sample_triple_counts(m, (0, 1, 2), 10**6, np.random.default_rng(12))
        fit = renormalized(estimate_triple(TripleCounts((0, 1, 2), counts))[0])
        assert max(np.abs(fit.mu - m.mu).max(), np.abs(fit.sigma - m.sigma).max()) <= 0.05

    def test_min_samples(self):
        with pytest.raises(InsufficientSamples):
            estimate_triple(TripleCounts((0, 1, 2), np.ones(6)))

    def test_low_observability_warns(self):
        counts = np.array([500, 300, 150, 49, 1, 0]) * 10
        with pytest.warns(ObservabilityTooLow):
            try:
                estimate_triple(TripleCounts((0, 1, 2), counts))
            except (NoFeasibleAngle, SingularSystem, NegativeScale):
                pass


class TestCountsCsv:
    def test_round_trip(self, tmp_path, rng):
        data = [
            TripleCounts((0, 1, 2), rng.integers(0, 50, 6) + 1),
            TripleCounts((1, 3, 4), rng.integers(0, 50, 6) + 1),
        ]
        path = tmp_path / "counts.csv"
        write_counts_csv(path, data)
        text = path.read_text()
        back = read_counts_csv(path)
        assert [c.triple for c in back] == [c.triple for c in data]
        for a, b in zip(back, data):
            np.testing.assert_array_equal(a.counts, b.counts)
        write_counts_csv(path, back)
        assert path.read_text() == text

    def test_missing_ordering_is_zero(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("i,j,k,perm,count\n0,1,2,abc,5\n0,1,2,cba,2\n")
        (tc,) = read_counts_csv(path)
        assert tc.counts.tolist() == [5, 0, 0, 0, 0, 2]

    @pytest.mark.parametrize(
        "body, line",
        [
            ("0,1,2,abc,5\n0,1,2,xyz,1\n", 3),
            ("0,1,2,abc,5\n0,1,2,abc,1\n", 3),
            ("0,1,2,abc,-1\n", 2),
            ("0,1,abc,5\n", 2),
            ("0,1,two,abc,5\n", 2),
            ("0,1,1,abc,5\n", 2),
        ],
    )
    def test_parse_errors_name_line(self, tmp_path, body, line):
        path = tmp_path / "bad.csv"
        path.write_text("i,j,k,perm,count\n" + body)
        with pytest.raises(ParseError, match=f"line {line}"):
            read_counts_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ParseError, match="line 1"):
            read_counts_csv(path)
