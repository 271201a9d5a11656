"""
Tests for the likelihoods and the REML / ML fits.
"""
import numpy as np
import pytest

from src.errors import ConfigError, NumericalError
from src.data_processing.contrasts import ContrastData
from src.data_processing.data_loader import data_loader
from src.models.model import (HeterogeneityStructure, ModelFit, evaluate_objective, fit_mean_shift, fit_model,
                              log_likelihood, marginal_precision, profile_mu, restricted_log_likelihood)
from src.models.model_utils import (RotatedContrasts, correlation_logdet, correlation_matrix, get_objective_from_str,
                                    spd_inverse)

from conftest import CASE_STUDY_PATH, univariate_oracle

Y = np.array([-0.5, 0.3, -0.1, 0.8, -0.9, 0.2, -0.35])
V = np.array([0.04, 0.09, 0.05, 0.12, 0.06, 0.08, 0.03])


def univariate_contrasts(y=Y, v=V):
    return [ContrastData(trial_id=k + 1, reference=0, treatments=(1,), y=np.array([y_k]), s=np.array([[v_k]]),
                         arm_order=(1, 0), informative_count=1) for k, (y_k, v_k) in enumerate(zip(y, v))]


class TestUtils:
    """Tests for linear algebra helpers."""

    @pytest.mark.parametrize("dim", [1, 2, 3, 5])
    def test_correlation_logdet(self, dim):
        sign, value = np.linalg.slogdet(correlation_matrix(dim))

        assert sign == 1
        assert np.isclose(correlation_logdet(dim), value)

    def test_spd_inverse(self):
        matrix = np.array([[2.0, 0.5], [0.5, 1.0]])

        assert np.allclose(spd_inverse(matrix) @ matrix, np.eye(2))
        with pytest.raises(NumericalError):
            spd_inverse(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_objective_names(self):
        assert get_objective_from_str("reml") == "REML"
        assert get_objective_from_str("Ml") == "ML"
        with pytest.raises(ConfigError):
            get_objective_from_str("bayes")

    def test_heterogeneity_structure(self):
        structure = HeterogeneityStructure(tau2=0.04, dimension=3)

        assert np.allclose(structure.psi, 0.04 * np.array([[1, .5, .5], [.5, 1, .5], [.5, .5, 1]]))
        assert np.isclose(structure.logdet, np.linalg.slogdet(structure.psi)[1])
        assert np.allclose(structure.restricted(2), 0.04 * correlation_matrix(2))
        assert HeterogeneityStructure(tau2=0.0, dimension=2).logdet == -np.inf
        with pytest.raises(ConfigError):
            HeterogeneityStructure(tau2=-1.0, dimension=2)


class TestDirectTerms:
    """Tests for marginal precision, GLS and the direct likelihoods."""

    def test_marginal_precision_scalar(self):
        contrast = univariate_contrasts()[0]

        assert np.allclose(marginal_precision(contrast, 0.2), [[1 / 0.24]])

    def test_marginal_precision_pair(self):
        s = np.array([[0.2, 0.1], [0.1, 0.3]])
        contrast = ContrastData(trial_id=1, reference=0, treatments=(1, 2), y=np.zeros(2), s=s, arm_order=(0, 1, 2),
                                informative_count=2)

        expected = np.linalg.inv(np.array([[0.3, 0.15], [0.15, 0.4]]))
        assert np.allclose(marginal_precision(contrast, 0.1), expected)

        with pytest.raises(ConfigError):
            marginal_precision(contrast, -0.1)

    def test_profile_mu_weighted_mean(self):
        mu, mu_cov = profile_mu(univariate_contrasts(), 0.05)
        w = 1 / (V + 0.05)

        assert np.isclose(mu[0], np.sum(w * Y) / np.sum(w))
        assert np.isclose(mu_cov[0, 0], 1 / np.sum(w))

    @pytest.mark.parametrize("tau2", [0.0, 0.01, 0.5])
    def test_rotated_objective_matches_direct(self, case_study, tau2):
        contrasts = list(case_study.contrasts)
        rotated = RotatedContrasts.from_contrasts(contrasts, case_study.num_treatments)

        ml, mu, _ = evaluate_objective(rotated, tau2, method="ML")
        reml, _, _ = evaluate_objective(rotated, tau2, method="REML")
        mu_direct, _ = profile_mu(contrasts, tau2, case_study.num_treatments)

        assert np.allclose(mu, mu_direct, atol=1e-9)
        assert ml == pytest.approx(log_likelihood(contrasts, mu_direct, tau2), rel=1e-9)
        assert reml == pytest.approx(restricted_log_likelihood(contrasts, tau2, case_study.num_treatments), rel=1e-9)

    def test_unrotate(self, case_study):
        rotated = RotatedContrasts.from_contrasts(case_study.contrasts, case_study.num_treatments)

        for y, contrast in zip(rotated.unrotate(), case_study.contrasts):
            assert np.allclose(y, contrast.y, atol=1e-10)


class TestFitModel:
    """Tests for fit_model against an independent univariate implementation."""

    @pytest.mark.parametrize("method", ["REML", "ML"])
    def test_univariate_oracle(self, method):
        fit = fit_model(univariate_contrasts(), method=method)
        tau2, mu, var = univariate_oracle(Y, V, method=method)

        assert fit.tau2 > 0
        assert fit.tau2 == pytest.approx(tau2, abs=1e-6)
        assert fit.mu[0] == pytest.approx(mu, abs=1e-6)
        assert fit.mu_cov[0, 0] == pytest.approx(var, abs=1e-6)
        assert fit.method == method
        assert fit.converged

    def test_gls_stationarity(self, case_study, case_study_fit):
        fit, score = case_study_fit, np.zeros(case_study.num_treatments)
        for contrast in case_study.contrasts:
            design = contrast.design(case_study.num_treatments)
            score += design.T @ marginal_precision(contrast, fit.tau2) @ (contrast.y - design @ fit.mu)

        assert np.allclose(score, 0, atol=1e-8)

    def test_permutation_invariance(self, case_study, case_study_fit):
        reversed_fit = fit_model(list(case_study.contrasts)[::-1], num_treatments=case_study.num_treatments)

        assert reversed_fit.tau2 == pytest.approx(case_study_fit.tau2, abs=1e-7)
        assert np.allclose(reversed_fit.mu, case_study_fit.mu, atol=1e-6)

    def test_relabelled_treatments(self, case_study, case_study_fit):
        labels = [treatment.label for treatment in case_study.treatments]
        relabelled = data_loader(input_path=CASE_STUDY_PATH, treatments=[labels[0], *labels[:0:-1]])
        fit = fit_model(relabelled.contrasts, num_treatments=relabelled.num_treatments)

        # Column of each relabelled treatment in the original coding
        order = [labels.index(treatment.label) - 1 for treatment in relabelled.treatments[1:]]

        assert relabelled.treatments[1].label == labels[-1]
        assert fit.tau2 == pytest.approx(case_study_fit.tau2, abs=1e-7)
        assert np.allclose(fit.mu, case_study_fit.mu[order], atol=1e-6)
        assert np.allclose(fit.mu_cov, case_study_fit.mu_cov[np.ix_(order, order)], atol=1e-6)

    def test_identical_trials_give_zero_heterogeneity(self):
        contrasts = univariate_contrasts(y=np.full(4, 0.2), v=np.full(4, 0.05))

        for method in ["REML", "ML"]:
            fit = fit_model(contrasts, method=method)
            assert fit.tau2 == 0.0
            assert fit.mu[0] == pytest.approx(0.2)

    def test_upper_bound_warning(self):
        with pytest.warns(UserWarning, match="upper search bound"):
            fit = fit_model(univariate_contrasts(), tau2_max=1e-4)

        assert fit.at_upper_bound
        assert fit.tau2 == pytest.approx(1e-4)

    def test_contrast_reciprocity(self, case_study_fit):
        for a, b in [(0, 3), (2, 5), (7, 1)]:
            forward, backward = case_study_fit.contrast(a, b), case_study_fit.contrast(b, a)
            assert forward[0] == pytest.approx(-backward[0])
            assert forward[1] == pytest.approx(backward[1])

        assert case_study_fit.contrast(4, 4) == (0.0, 0.0)

    def test_unidentified_treatment(self):
        with pytest.raises(NumericalError):
            fit_model(univariate_contrasts(), num_treatments=2)

    def test_invalid_settings(self):
        with pytest.raises(ConfigError):
            fit_model(univariate_contrasts(), grid_size=2)
        with pytest.raises(ConfigError):
            fit_model(univariate_contrasts(), method="OLS")

    def test_summary_properties(self, case_study_fit):
        assert isinstance(case_study_fit, ModelFit)
        assert case_study_fit.num_treatments == 7
        assert case_study_fit.num_trials == 26
        assert case_study_fit.tau == pytest.approx(np.sqrt(case_study_fit.tau2))
        assert case_study_fit.heterogeneity.dimension == 7


class TestMeanShift:
    """Tests for the mean-shifted fit."""

    def test_eta_is_trial_residual(self):
        contrasts = univariate_contrasts()
        fit = fit_mean_shift(contrasts, shifted=4, method="ML")

        assert fit.shifted_trial == 4
        assert fit.eta[0] == pytest.approx(Y[3] - fit.mu[0])
        assert fit.eta_treatments == (1,)

    def test_shift_removes_trial_from_mean(self):
        contrasts = univariate_contrasts()
        fit = fit_mean_shift(contrasts, shifted=4, method="ML")

        w = 1 / (np.delete(V, 3) + fit.tau2)
        assert fit.mu[0] == pytest.approx(np.sum(w * np.delete(Y, 3)) / np.sum(w), abs=1e-10)

    def test_shift_never_decreases_likelihood(self):
        contrasts = univariate_contrasts()
        null = fit_model(contrasts, method="ML")

        for trial_id in range(1, len(Y) + 1):
            assert fit_mean_shift(contrasts, shifted=trial_id).loglik >= null.loglik - 1e-9
