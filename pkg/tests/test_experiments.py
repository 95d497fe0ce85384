import csv
import io
import json

import numpy as np
import pytest

from corrprobit.errors import InputError, RegimeUnsatisfiable
from corrprobit.experiments import (
    AccuracyTask,
    DisconnectedComparisons,
    LogitModel,
    SyntheticRegime,
    best_menu,
    diversification_model,
    fit_logit,
    fit_methods,
    generate_regime,
    loglog_slope,
    matrix_to_csv,
    predict_pair,
    reports_to_csv,
    reports_to_json,
    run_accuracy,
    run_regime,
    run_welfare,
    simulate_training_data,
)
from corrprobit.model import ProbitModel, check_normalized, normalize
from corrprobit.probability import observability, pairwise_probability
from corrprobit.sampling import paired_welfare_difference

from conftest import exchangeable, random_model


class TestRegimes:
    @pytest.mark.parametrize("mu", ["zero", "random"])
    @pytest.mark.parametrize("sigma", ["identity", "random_diagonal", "bin", "random_full"])
    def test_normalized_and_idempotent(self, mu, sigma):
        m = generate_regime(SyntheticRegime(mu, sigma, n=6, seed=1))
        check_normalized(m)
        again, _ = normalize(m)
        np.testing.assert_allclose(again.sigma, m.sigma, atol=1e-9)
        np.testing.assert_allclose(again.mu, m.mu, atol=1e-9)

    def test_zero_identity_is_exchangeable(self):
        m = generate_regime(SyntheticRegime("zero", "identity", n=5))
        np.testing.assert_allclose(m.sigma, exchangeable(5).sigma, atol=1e-12)
        np.testing.assert_array_equal(m.mu, 0.0)

    def test_bin_blocks(self):
        m = generate_regime(SyntheticRegime("zero", "bin", n=8, seed=4))
        corr = m.sigma / np.sqrt(np.outer(np.diag(m.sigma), np.diag(m.sigma)))
        off = corr[~np.eye(8, dtype=bool)]
        # strongly correlated within a block, anticorrelated across
        assert off.max() > 0.9 and off.min() < -0.9
        assert observability(m) >= 1e-4

    def test_seeded(self):
        a = generate_regime(SyntheticRegime("random", "random_full", seed=3))
        b = generate_regime(SyntheticRegime("random", "random_full", seed=3))
        np.testing.assert_array_equal(a.sigma, b.sigma)

    def test_unsatisfiable(self):
        with pytest.raises(RegimeUnsatisfiable):
            generate_regime(SyntheticRegime("zero", "bin", n=6, gamma_floor=0.1))

    @pytest.mark.parametrize("kw", [{"mu_kind": "big"}, {"sigma_kind": "x"}, {"n": 2}])
    def test_invalid(self, kw):
        with pytest.raises(InputError):
            SyntheticRegime(**kw)


class TestLogit:
    def test_three_to_one(self):
        lm = fit_logit([(0, 1)] * 3 + [(1, 0)], 2)
        assert lm.utilities[0] - lm.utilities[1] == pytest.approx(np.log(3), abs=1e-6)
        assert lm.pair_probability(0, 1) == pytest.approx(0.75, abs=1e-6)

    def test_weights_match_repeats(self):
        a = fit_logit([(0, 1, 2), (2, 1, 0), (1, 0, 2)], 3, weights=[3, 1, 2])
        b = fit_logit([(0, 1, 2)] * 3 + [(2, 1, 0)] + [(1, 0, 2)] * 2, 3)
        np.testing.assert_allclose(a.utilities, b.utilities, atol=1e-6)

    def test_uniform_data(self):
        rankings = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
        np.testing.assert_allclose(fit_logit(rankings, 3).utilities, 0.0, atol=1e-6)

    def test_centered(self):
        lm = fit_logit([(0, 1, 2)] * 5 + [(1, 2, 0)] * 2 + [(2, 0, 1)], 3)
        assert abs(lm.utilities.sum()) < 1e-12

    def test_disconnected_warns(self):
        with pytest.warns(DisconnectedComparisons):
            lm = fit_logit([(0, 1), (2, 3)], 4)
        assert np.all(np.isfinite(lm.utilities))

    def test_invalid(self):
        with pytest.raises(InputError):
            fit_logit([], 3)
        with pytest.raises(InputError):
            fit_logit([(0, 0)], 3)
        with pytest.raises(InputError):
            fit_logit([(0, 5)], 3)

    def test_independence_of_irrelevant_alternatives(self):
        lm = LogitModel(np.array([0.4, -0.1, 0.9, -1.2]))
        p3 = lm.choice_probabilities([0, 1, 2])
        p2 = lm.choice_probabilities([0, 1])
        assert p3[0] / p3[1] == pytest.approx(p2[0] / p2[1])
        assert p3.sum() == pytest.approx(1.0)

    def test_prediction_ignores_context(self):
        lm = LogitModel(np.array([0.4, -0.1, 0.9, -1.2]))
        task = AccuracyTask(trials=1)
        a, _ = predict_pair(lm, [2, 3], 0, 1, task, 0)
        b, _ = predict_pair(lm, [3, 2], 0, 1, task, 0)
        assert a == b == lm.pair_probability(0, 1)


class TestTrainingAndFits:
    def test_budgets(self, rng):
        data = simulate_training_data(random_model(rng, 5), 1000, 1)
        assert data.n_pairwise == 1000
        assert data.n_triple == 1000
        rankings, weights = data.rankings()
        assert weights.sum() == 1000
        assert all(len(r) == 3 for r in rankings)

    def test_invalid_budget(self, rng):
        with pytest.raises(InputError):
            simulate_training_data(random_model(rng, 4), 0, 1)

    @pytest.mark.filterwarnings("ignore::corrprobit.errors.ObservabilityTooLow")
    def test_fit_all_methods(self, rng):
        truth = random_model(rng, 5)
        data = simulate_training_data(truth, 20000, 2)
        fitted = fit_methods(
            data, truth, ("oracle", "logit", "probit_pairwise", "probit_triple", "probit_moments")
        )
        assert fitted["oracle"] is truth
        assert isinstance(fitted["logit"], LogitModel)
        for name in ("probit_pairwise", "probit_triple", "probit_moments"):
            check_normalized(fitted[name])

    def test_unknown_method(self, rng):
        data = simulate_training_data(random_model(rng, 4), 100, 1)
        with pytest.raises(InputError):
            fit_methods(data, None, ("nope",))
        with pytest.raises(InputError):
            fit_methods(data, None, ("oracle",))


class TestAccuracy:
    def test_small_run(self, rng):
        truth = random_model(rng, 6)
        task = AccuracyTask(trials=50, context_size=2, target_accepted=50, bootstrap=20)
        fitted = {"oracle": truth, "logit": LogitModel(truth.mu)}
        reports = run_accuracy(truth, fitted, task, 3, {"tag": "x"})
        assert [r.method for r in reports] == ["oracle", "logit"]
        for r in reports:
            assert 0 <= r.mean <= 1
            q25, q50, q75 = r.quantiles
            assert q25 <= q50 <= q75
            assert r.config["tag"] == "x"
            assert "fallbacks" in r.config

    def test_deterministic(self, rng):
        truth = random_model(rng, 6)
        task = AccuracyTask(trials=30, context_size=2, target_accepted=30, bootstrap=10)
        a = run_accuracy(truth, {"oracle": truth}, task, 8)
        b = run_accuracy(truth, {"oracle": truth}, task, 8)
        assert a[0].mean == b[0].mean

    def test_too_many_items(self, rng):
        truth = random_model(rng, 4)
        with pytest.raises(InputError):
            run_accuracy(truth, {"oracle": truth}, AccuracyTask(trials=1, context_size=4), 0)

    def test_size_mismatch(self, rng):
        truth = random_model(rng, 6)
        with pytest.raises(InputError):
            run_accuracy(truth, {"x": random_model(rng, 5)}, AccuracyTask(trials=1, context_size=2), 0)

    def test_fallback_on_impossible_context(self):
        mu = np.array([50.0, 0.0, -50.0, 0.0, 0.0])
        m = normalize(ProbitModel(mu, np.eye(5)))[0]
        task = AccuracyTask(trials=1, target_accepted=10, mc_cap=1000)
        p, fell_back = predict_pair(m, [2, 0], 1, 3, task, 0)
        assert fell_back
        assert p == pytest.approx(pairwise_probability(m, 1, 3))

    def test_invalid_task(self):
        with pytest.raises(InputError):
            AccuracyTask(trials=0)

    def test_run_regime(self):
        task = AccuracyTask(trials=20, context_size=2, target_accepted=20, bootstrap=10)
        reports, fitted = run_regime(
            SyntheticRegime("random", "random_diagonal", n=5, seed=2), task, 2000,
            ("oracle", "logit"),
        )
        assert set(fitted) == {"oracle", "logit"}
        oracle = next(r for r in reports if r.method == "oracle")
        assert oracle.error_curve[0]["sigma_error"] == 0.0


class TestWelfare:
    def test_size_one_is_argmax(self):
        m = diversification_model()
        (r,) = run_welfare(m, {"model": m}, sizes=(1,), mc_samples=20000)
        assert r.menu == (int(np.argmax(m.mu)),)

    def test_values_grow_with_size(self):
        m = diversification_model()
        reps = run_welfare(m, {"model": m}, sizes=(1, 2, 3), mc_samples=50000)
        values = [r.true_value for r in reps]
        assert values[0] < values[1] < values[2]
        for r in reps:
            assert sum(r.rank_histogram) == 50000

    def test_logit_menu_is_top_utilities(self):
        lm = LogitModel(np.array([0.2, 1.0, -0.3, 0.7]))
        assert best_menu(lm, 2, 10, 0) == (1, 3)

    def test_diversification(self):
        m = diversification_model()
        check_normalized(m)
        menu = best_menu(m, 2, 200000, 0)
        assert menu == (0, 2)
        top = best_menu(LogitModel(m.mu), 2, 10, 0)
        assert top == (0, 1)
        diff, se = paired_welfare_difference(m, menu, top, 200000, 1)
        assert diff > 3 * se


class TestSerialization:
    def test_csv(self):
        text = reports_to_csv([{"a": 1, "b": 2.5}, {"a": 3, "c": "x"}])
        rows = list(csv.DictReader(io.StringIO(text)))
        assert rows[0] == {"a": "1", "b": "2.5", "c": ""}
        assert rows[1]["c"] == "x"
        assert reports_to_csv([]) == ""

    def test_json(self, rng):
        truth = random_model(rng, 4)
        task = AccuracyTask(trials=5, context_size=1, target_accepted=5, bootstrap=5)
        reports = run_accuracy(truth, {"oracle": truth}, task, 0)
        data = json.loads(reports_to_json(reports))
        assert data[0]["method"] == "oracle"
        assert reports[0].row()["method"] == "oracle"

    def test_matrix_round_trip(self, rng):
        a = rng.standard_normal((3, 3))
        back = np.loadtxt(io.StringIO(matrix_to_csv(a)), delimiter=",")
        np.testing.assert_array_equal(back, a)


def test_loglog_slope():
    budgets = np.array([1e3, 4e3, 1.6e4])
    assert loglog_slope(budgets, 2.0 / np.sqrt(budgets)) == pytest.approx(-0.5)
