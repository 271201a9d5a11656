"""
Tests for continuity correction, reference augmentation and contrast construction.
"""
import numpy as np
import pytest

from src.errors import ConfigError, NetworkDataError
from src.data_processing.contrasts import (apply_continuity_correction, augment_reference, compute_contrasts,
                                           rebase_contrasts, rebase_matrix, temporary_reference,
                                           transform_contrasts, trial_odds_ratio)
from src.data_processing.trials import Treatment, Trial, TrialArm

PLACEBO, DRUG_A, DRUG_B = Treatment(0, "Placebo"), Treatment(1, "A"), Treatment(2, "B")


def _log_odds(events, size):
    return np.log(events) - np.log(size - events)


def _variance(events, size):
    return 1 / events + 1 / (size - events)


class TestCorrections:
    """Tests for continuity correction and augmentation."""

    def test_case_study_corrections(self, case_study):
        corrected = {trial.id: trial for trial in case_study.trials if trial.corrected}

        assert sorted(corrected) == [5, 7]  # VHAS, NICS-EH
        assert [(arm.events, arm.size) for arm in corrected[5].real_arms] == [(2.5, 708), (0.5, 708)]
        assert [(arm.events, arm.size) for arm in corrected[7].real_arms] == [(0.5, 205), (3.5, 211)]

    def test_no_correction_needed(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(PLACEBO, 5, 50), TrialArm(DRUG_A, 3, 50)))

        assert apply_continuity_correction(trial) is trial

    def test_full_cell_corrected(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(PLACEBO, 50, 50), TrialArm(DRUG_A, 3, 50)))
        corrected = apply_continuity_correction(trial, increment=0.5)

        assert corrected.corrected
        assert corrected.arm(0).events == 50.5 and corrected.arm(0).size == 51

    def test_invalid_increment(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(PLACEBO, 0, 50), TrialArm(DRUG_A, 3, 50)))

        with pytest.raises(ConfigError):
            apply_continuity_correction(trial, increment=0)

    def test_augmentation(self, case_study):
        trial = case_study.trial(22)  # E-COST: ARB vs CT

        assert trial.augmented
        assert trial.arms[-1].pseudo
        assert (trial.arms[-1].events, trial.arms[-1].size) == (0.001, 0.01)
        assert len(trial.real_arms) == 2

    def test_augmentation_skipped_with_reference(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(DRUG_A, 5, 50), TrialArm(PLACEBO, 3, 50)))

        assert augment_reference(trial, reference=PLACEBO) is trial

    def test_invalid_augmentation_counts(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(DRUG_A, 5, 50), TrialArm(DRUG_B, 3, 50)))

        with pytest.raises(ConfigError):
            augment_reference(trial, d0=0.01, n0=0.01, reference=PLACEBO)


class TestComputeContrasts:
    """Tests for log odds ratios and within-trial covariances."""

    def test_syst_eur(self, case_study):
        contrast = case_study.contrast(1)
        expected = _log_odds(37, 2398) - _log_odds(49, 2297)

        assert contrast.treatments == (5,)
        assert np.isclose(contrast.y[0], expected, rtol=1e-12)
        assert contrast.y[0] == pytest.approx(-0.3299, abs=1e-4)
        assert contrast.s[0, 0] == pytest.approx(_variance(37, 2398) + _variance(49, 2297), rel=1e-12)
        assert contrast.s[0, 0] == pytest.approx(0.04830, abs=1e-5)

    def test_shared_reference_covariance(self, case_study):
        contrast = case_study.contrast(22)  # E-COST against its pseudo placebo arm
        shared = _variance(0.001, 0.01)

        assert contrast.pseudo_reference
        assert contrast.observed_count == 2
        assert contrast.informative_count == 1
        assert contrast.s[0, 1] == pytest.approx(1111.11, abs=0.01)
        assert contrast.s[0, 1] == pytest.approx(shared, rel=1e-12)
        assert contrast.s[0, 0] == pytest.approx(shared + _variance(35, 1053), rel=1e-12)

    def test_three_arm_trial(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(DRUG_A, 10, 100), TrialArm(PLACEBO, 20, 100),
                                             TrialArm(DRUG_B, 15, 100)))
        contrast = compute_contrasts(trial)

        assert contrast.treatments == (1, 2)
        assert contrast.arm_order == (1, 0, 2)
        assert np.allclose(contrast.y, [_log_odds(10, 100) - _log_odds(20, 100),
                                        _log_odds(15, 100) - _log_odds(20, 100)])
        assert np.isclose(contrast.s[0, 1], _variance(20, 100))

    def test_design_and_mask(self, case_study):
        contrast = case_study.contrast(22)
        design = contrast.design(case_study.num_treatments)

        assert design.shape == (2, 7)
        assert design[0, 2] == 1 and design[1, 5] == 1 and np.abs(design).sum() == 2
        assert list(np.flatnonzero(contrast.observed_mask(7))) == [2, 5]

        full = contrast.full_y(7)
        assert np.isnan(full).sum() == 5
        assert full[2] == contrast.y[0]

    def test_zero_cell_without_correction(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(PLACEBO, 0, 50), TrialArm(DRUG_A, 3, 50)))

        with pytest.raises(NetworkDataError, match="zero cell"):
            compute_contrasts(trial)


class TestRebasing:
    """Tests for re-basing contrasts onto another arm."""

    def test_transitivity_multi_arm(self, case_study):
        trial, contrast = case_study.trial(8), case_study.contrast(8)  # STOP-2: CCB, CT, ACEI vs pseudo placebo

        transformed = transform_contrasts(contrast, 2)
        direct = rebase_contrasts(trial, 2)

        assert transformed.treatments == direct.treatments == (5, 6)
        assert np.allclose(transformed.y, direct.y, rtol=0, atol=1e-10)
        assert np.allclose(transformed.s, direct.s, rtol=0, atol=1e-8)
        assert not transformed.pseudo_reference

    def test_transitivity_two_arm(self, case_study):
        trial, contrast = case_study.trial(23), case_study.contrast(23)  # Jikei: ARB, CT

        transformed = transform_contrasts(contrast, 3)

        assert transformed.y[0] == pytest.approx(_log_odds(36, 1540) - _log_odds(19, 1541), abs=1e-10)
        assert transformed.s[0, 0] == pytest.approx(_variance(36, 1540) + _variance(19, 1541), abs=1e-8)
        assert np.allclose(transformed.y, rebase_contrasts(trial, 3).y, atol=1e-10)

    def test_round_trip(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(DRUG_A, 10, 100), TrialArm(PLACEBO, 20, 100),
                                             TrialArm(DRUG_B, 15, 100)))
        contrast = compute_contrasts(trial)

        back = transform_contrasts(transform_contrasts(contrast, 2), 0)

        assert back.treatments == contrast.treatments
        assert np.allclose(back.y, contrast.y, atol=1e-12)
        assert np.allclose(back.s, contrast.s, atol=1e-12)

    def test_rebase_matrix(self):
        trial = Trial(id=1, label="T", arms=(TrialArm(DRUG_A, 10, 100), TrialArm(PLACEBO, 20, 100),
                                             TrialArm(DRUG_B, 15, 100)))
        matrix, treatments = rebase_matrix(compute_contrasts(trial), 1)

        assert treatments == (0, 2)
        assert np.array_equal(matrix, [[-1, 0], [-1, 1]])

    def test_pseudo_reference_not_allowed(self, case_study):
        with pytest.raises(NetworkDataError):
            rebase_matrix(case_study.contrast(22), 0)

    def test_temporary_reference_policies(self, case_study):
        contrast = case_study.contrast(16)  # ALLHAT 2002: CCB, DD, ACEI

        assert temporary_reference(contrast, "lowest_index") == 2
        assert temporary_reference(contrast, "first_arm") == 5
        with pytest.raises(ConfigError):
            temporary_reference(contrast, "largest")


class TestTrialOddsRatio:
    """Observed odds ratios of single trials."""

    @pytest.mark.parametrize("trial_id, treatment_a, treatment_b, expected", [
        (23, 3, 6, 0.522),  # Jikei, ARB vs CT
        (26, 3, 0, 1.047),  # TRANSCEND, ARB vs placebo
        (24, 7, 0, 0.375),  # HYVET, DD vs placebo
    ])
    def test_case_study(self, case_study, trial_id, treatment_a, treatment_b, expected):
        odds_ratio, lower, upper = trial_odds_ratio(case_study.trial(trial_id), treatment_a, treatment_b)

        assert odds_ratio == pytest.approx(expected, abs=0.002)
        assert lower < odds_ratio < upper

    def test_reciprocal(self, case_study):
        forward = trial_odds_ratio(case_study.trial(23), 3, 6)
        backward = trial_odds_ratio(case_study.trial(23), 6, 3)

        assert forward[0] == pytest.approx(1 / backward[0])
        assert forward[1] == pytest.approx(1 / backward[2])
