"""
The synthetic cohort must carry the stage information it claims to: a
plug-in Gaussian classifier on hand-made spectral and heart-rate features
separates the stages, and the confusability knobs remove exactly the
separations they target.
"""

import multiprocessing
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy.signal import find_peaks, welch
from sklearn.naive_bayes import GaussianNB

from errors import ConfigError
from recording_io import DEEP, LIGHT, REM, WAKE
from synth import SynthConfig, generate_subject, synth_generate

UNIFORM = tuple((0.25, 0.25, 0.25, 0.25) for _ in range(4))
BANDS = ((0.5, 4), (4, 8), (8, 12), (12, 15), (15, 30))


def eeg_features(subject, rate):
    epochs = subject.sceeg.samples.reshape(-1, int(30 * rate))
    freqs, psd = welch(epochs, fs=rate, nperseg=int(2 * rate), axis=-1)
    return np.log(np.column_stack([psd[:, (freqs >= lo) & (freqs < hi)].sum(axis=1) for lo, hi in BANDS]))


def ppg_features(subject, rate):
    rows = []
    for epoch in subject.ppg.samples.reshape(-1, int(30 * rate)):
        peaks, _ = find_peaks(epoch, distance=int(0.3 * rate), prominence=0.5)
        ibi = np.diff(peaks) / rate
        rows.append([60.0 / ibi.mean(), ibi.std() / ibi.mean()])
    return np.array(rows)


def balanced_accuracy(features, cohort, classes, train_n):
    """Fit on the first train_n subjects, score mean recall over classes on the rest."""
    stages = [s.hypnogram.stages for s in cohort]
    fit_x = np.vstack(features[:train_n])
    fit_y = np.concatenate(stages[:train_n])
    test_x = np.vstack(features[train_n:])
    test_y = np.concatenate(stages[train_n:])
    keep_fit, keep_test = np.isin(fit_y, classes), np.isin(test_y, classes)
    model = GaussianNB().fit(fit_x[keep_fit], fit_y[keep_fit])
    pred = model.predict(test_x[keep_test])
    truth = test_y[keep_test]
    return float(np.mean([np.mean(pred[truth == c] == c) for c in classes]))


def cohort(**knobs):
    cfg = SynthConfig(n_subjects=8, epochs_per_subject=80, transitions=UNIFORM, **knobs)
    return cfg, synth_generate(cfg, workers=3)


class TestDeterminism:
    def test_same_seed_same_subject(self):
        cfg = SynthConfig(n_subjects=2, epochs_per_subject=6)
        a, b = generate_subject(cfg, 1), generate_subject(cfg, 1)
        np.testing.assert_array_equal(a.sceeg.samples, b.sceeg.samples)
        np.testing.assert_array_equal(a.ppg.samples, b.ppg.samples)
        np.testing.assert_array_equal(a.hypnogram.stages, b.hypnogram.stages)

    def test_worker_count_does_not_matter(self):
        cfg = SynthConfig(n_subjects=3, epochs_per_subject=4)
        serial, pooled = synth_generate(cfg, workers=1), synth_generate(cfg, workers=3)
        for a, b in zip(serial, pooled):
            np.testing.assert_array_equal(a.ppg.samples, b.ppg.samples)

    def test_same_subject_in_a_fresh_process(self):
        cfg = SynthConfig(n_subjects=2, epochs_per_subject=4, seed=9)
        with ProcessPoolExecutor(max_workers=1, mp_context=multiprocessing.get_context("spawn")) as pool:
            remote = pool.submit(generate_subject, cfg, 1).result()
        local = generate_subject(cfg, 1)
        np.testing.assert_array_equal(remote.sceeg.samples, local.sceeg.samples)
        np.testing.assert_array_equal(remote.ppg.samples, local.ppg.samples)
        np.testing.assert_array_equal(remote.hypnogram.stages, local.hypnogram.stages)

    def test_layout(self):
        cfg = SynthConfig(n_subjects=1, epochs_per_subject=5)
        subject = generate_subject(cfg, 0)
        assert subject.sceeg.samples.size == 5 * 30 * 200
        assert subject.ppg.samples.size == 5 * 30 * 256
        assert subject.hypnogram.subject_id == subject.sceeg.subject_id == "S000"

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(transitions=((1.0, 0.0, 0.0, 0.0),) * 3)
        with pytest.raises(ConfigError):
            SynthConfig(ppg_deep_rem_confusability=1.5)
        with pytest.raises(ConfigError):
            SynthConfig(sceeg_rate=50.0)


class TestStageInformation:
    def test_eeg_separates_light_from_wake(self):
        cfg, subjects = cohort(sceeg_light_wake_confusability=0.0)
        features = [eeg_features(s, cfg.sceeg_rate) for s in subjects]
        assert balanced_accuracy(features, subjects, [WAKE, LIGHT], 4) > 0.9

    def test_eeg_confusability_hides_light(self):
        cfg, subjects = cohort(sceeg_light_wake_confusability=1.0)
        features = [eeg_features(s, cfg.sceeg_rate) for s in subjects]
        assert balanced_accuracy(features, subjects, [WAKE, LIGHT], 4) < 0.65

    def test_ppg_separates_deep_from_rem(self):
        cfg, subjects = cohort(ppg_deep_rem_confusability=0.0)
        features = [ppg_features(s, cfg.ppg_rate) for s in subjects]
        assert balanced_accuracy(features, subjects, [DEEP, REM], 4) > 0.9

    def test_ppg_confusability_hides_deep(self):
        cfg, subjects = cohort(ppg_deep_rem_confusability=0.5)
        features = [ppg_features(s, cfg.ppg_rate) for s in subjects]
        assert balanced_accuracy(features, subjects, [DEEP, REM], 4) < 0.65

    def test_heart_rate_shift(self):
        base_cfg, base = cohort()
        _, shifted = cohort(hr_offset_bpm=10.0)
        base_hr = np.mean([ppg_features(s, base_cfg.ppg_rate)[:, 0].mean() for s in base])
        shifted_hr = np.mean([ppg_features(s, base_cfg.ppg_rate)[:, 0].mean() for s in shifted])
        assert shifted_hr - base_hr == pytest.approx(10.0, abs=2.5)
