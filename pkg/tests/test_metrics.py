import numpy as np
import pytest
from sklearn.metrics import cohen_kappa_score, confusion_matrix

from errors import DataError
from metrics import (class_metrics, confusion, kappa, measures_mae, per_subject_measures, sleep_measures,
                     summarize, weighted_kappa)
from recording_io import Hypnogram

LABELS = [0, 1, 2, 3]


def night(wake, light, deep, rem):
    return np.repeat(LABELS, [wake, light, deep, rem])


class TestAgreement:
    def test_confusion_matches_sklearn(self, np_rng):
        truth, pred = np_rng.integers(0, 4, 200), np_rng.integers(0, 4, 200)
        np.testing.assert_array_equal(confusion(pred, truth), confusion_matrix(truth, pred, labels=LABELS))

    def test_kappa_matches_sklearn(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(20, 120))
            truth = rng.integers(0, 4, n)
            pred = np.where(rng.random(n) < rng.random(), truth, rng.integers(0, 4, n))
            cm = confusion(pred, truth)
            assert kappa(cm) == pytest.approx(cohen_kappa_score(truth, pred, labels=LABELS), abs=1e-12)
            assert weighted_kappa(cm) == pytest.approx(
                cohen_kappa_score(truth, pred, labels=LABELS, weights="linear"), abs=1e-12)

    def test_perfect_and_total_chance(self):
        assert kappa(confusion([1, 2, 3, 0], [1, 2, 3, 0])) == 1.0
        assert kappa(confusion([1, 1, 1], [1, 1, 1])) == 1.0
        assert kappa([[0, 0, 0, 0], [0, 0, 3, 0], [0, 0, 0, 0], [0, 0, 0, 0]]) == 0.0

    def test_kappa_matches_direct_formula(self):
        rng = np.random.default_rng(23)
        for _ in range(1000):
            cm = rng.integers(0, 40, (4, 4))
            cm[0, 0] += 1
            n = cm.sum()
            p_o = np.trace(cm) / n
            p_e = float((cm.sum(axis=1) / n) @ (cm.sum(axis=0) / n))
            assert kappa(cm) == pytest.approx((p_o - p_e) / (1 - p_e), abs=1e-12)

    def test_kappa_ignores_joint_relabelling(self, np_rng):
        truth = np_rng.integers(0, 4, 300)
        pred = np.where(np_rng.random(300) < 0.6, truth, np_rng.integers(0, 4, 300))
        for perm in ([1, 0, 3, 2], [3, 1, 0, 2], [2, 3, 1, 0]):
            mapping = np.array(perm)
            assert kappa(confusion(mapping[pred], mapping[truth])) == pytest.approx(
                kappa(confusion(pred, truth)), abs=1e-12)

    def test_errors(self):
        with pytest.raises(DataError):
            confusion([0, 1], [0])
        with pytest.raises(DataError):
            confusion([0, 4], [0, 1])
        with pytest.raises(DataError):
            kappa(np.zeros((4, 4)))

    def test_class_metrics_flags_missing_stage(self):
        metrics = class_metrics(confusion([0, 1, 1, 3], [0, 1, 3, 3]))
        assert metrics.recall == [1.0, 1.0, 0.0, 0.5]
        assert metrics.degenerate == [False, False, True, False]
        assert metrics.accuracy == 0.75

    def test_summary_is_json_ready(self, np_rng):
        truth = np_rng.integers(0, 4, 50)
        summary = summarize(truth, truth)
        assert summary["kappa"] == 1.0 and summary["n_epochs"] == 50
        assert isinstance(summary["confusion"], list)


class TestSleepMeasures:
    def test_worked_example(self):
        m = sleep_measures(night(100, 500, 200, 160))
        assert m.tst_min == 430.0
        assert m.se_pct == pytest.approx(89.583, abs=1e-3)
        assert m.fr_light_pct == pytest.approx(58.14, abs=1e-2)
        assert m.fr_light_pct + m.fr_deep_pct + m.fr_rem_pct == pytest.approx(100.0, abs=1e-9)

    def test_stage_fractions_sum_to_100(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            stages = rng.integers(0, 4, int(rng.integers(2, 400)))
            stages[0] = 1
            m = sleep_measures(stages)
            assert m.fr_light_pct + m.fr_deep_pct + m.fr_rem_pct == pytest.approx(100.0, abs=1e-9)

    def test_all_wake_is_degenerate(self):
        m = sleep_measures(np.zeros(20, dtype=int))
        assert m.degenerate and m.tst_min == 0.0

    def test_hypnogram_input(self):
        hyp = Hypnogram("S1", night(2, 4, 2, 2))
        assert sleep_measures(hyp).se_pct == pytest.approx(80.0)

    def test_mae_over_subjects(self):
        refs = [Hypnogram("A", night(10, 20, 10, 10)), Hypnogram("B", night(0, 10, 10, 0))]
        preds = [Hypnogram("A", night(10, 20, 10, 10)), Hypnogram("B", night(0, 20, 0, 0))]
        mae = measures_mae(preds, refs)
        assert mae["tst_min"] == 0.0
        assert mae["fr_light_pct"] == pytest.approx(25.0)
        assert mae["fr_deep_pct"] == pytest.approx(25.0)

    def test_subject_mismatch(self):
        with pytest.raises(DataError):
            per_subject_measures([Hypnogram("A", night(1, 1, 1, 1))], [Hypnogram("B", night(1, 1, 1, 1))])
