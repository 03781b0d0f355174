"""
Slow complementarity runs on a synthetic cohort where scEEG cannot tell Light
from Wake and PPG cannot tell Deep from REM. For each seed the tiny encoders
are trained, their features cached once, and the score, cross-attention and
Mamba fusion heads fitted on top and compared on the test subjects. A second
run fine-tunes the PPG encoder on a shifted target cohort.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from fusion import CrossAttentionFusion, MambaFusion, fusion_config, grid_search_alpha, score_fusion
from metrics import summarize
from pipeline import build_model, encode_dataset, paired_datasets, preprocess_directory, window_datasets
from preprocess import PreprocessConfig
from recording_io import DEEP, LIGHT, REM, list_subjects, split_subjects
from synth import SynthConfig, synth_generate, write_cohort
from training import TrainConfig, direct_transfer, evaluate_model, fine_tune, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
WINDOW = 6
STAY = (0.9, 0.8, 0.85, 0.85)
# sticky nights where Wake outnumbers Light, so an undecided scEEG model says Wake
TRANSITIONS = tuple(tuple(STAY[i] if i == j else (1.0 - STAY[i]) / 3 for j in range(4)) for i in range(4))
PREPROCESS = {"sceeg_rate": 20.0, "sceeg_epoch_len": 600, "ppg_epoch_len": 256}
ENCODER_TRAIN = {"learning_rate": 1e-3, "epochs": 12, "batch_size": 8, "patience": 4}
FUSION_TRAIN = {"learning_rate": 3e-3, "epochs": 30, "batch_size": 8, "patience": 8}


def experiment_config(run_config_path):
    run_cfg = json.loads(run_config_path.read_text())
    run_cfg["preprocess"] = dict(PREPROCESS)
    run_cfg["sceeg"] = {"preset": "tiny", "epoch_len": PREPROCESS["sceeg_epoch_len"]}
    run_cfg["ppg"] = {"preset": "tiny", "epoch_len": PREPROCESS["ppg_epoch_len"]}
    return run_cfg


def build_cohort(root, cfg: SynthConfig, run_cfg, seed):
    raw, pre = root / "raw", root / "pre"
    write_cohort(raw, synth_generate(cfg, workers=4))
    for modality in ("sceeg", "ppg"):
        preprocess_directory(raw, pre, modality, PreprocessConfig(**run_cfg["preprocess"]), workers=4)
    return pre, split_subjects(list_subjects(pre), (0.6, 0.2, 0.2), seed=seed)


def deep_rem_confusion(report):
    cm = np.array(report["confusion"])
    return (cm[DEEP, REM] + cm[REM, DEEP]) / (cm[DEEP].sum() + cm[REM].sum())


def stage_report(probs, labels):
    return summarize(np.argmax(probs, axis=-1).reshape(-1), labels.reshape(-1))


@pytest.fixture(scope="module")
def cohort(tmp_path_factory, run_config_path):
    run_cfg = experiment_config(run_config_path)
    synth = SynthConfig(n_subjects=40, epochs_per_subject=48, transitions=TRANSITIONS,
                        sceeg_light_wake_confusability=1.0, ppg_deep_rem_confusability=0.5, seed=11)
    pre, manifest = build_cohort(tmp_path_factory.mktemp("experiment"), synth, run_cfg, seed=11)
    return run_cfg, synth, pre, manifest


def run_seed(run_cfg, pre, manifest, seed):
    encoders = {}
    for modality in ("sceeg", "ppg"):
        parts = window_datasets(pre, modality, manifest, WINDOW)
        model = build_model(modality, run_cfg, WINDOW, seed=seed)
        train(model, parts["train"], parts["val"], TrainConfig(seed=seed, **ENCODER_TRAIN), desc=modality)
        encoders[modality] = model

    paired = paired_datasets(pre, manifest, WINDOW)
    features = {part: encode_dataset(encoders["sceeg"], encoders["ppg"], paired[part])
                for part in ("train", "val", "test")}
    val, test = features["val"], features["test"]

    alpha, _ = grid_search_alpha(val.p_ppg.reshape(-1, 4), val.p_sceeg.reshape(-1, 4), val.labels)
    fused = score_fusion(test.p_ppg.reshape(-1, 4), test.p_sceeg.reshape(-1, 4), alpha)

    head_cfg = fusion_config(run_cfg["fusion"])
    fusion_train = TrainConfig(seed=seed, **FUSION_TRAIN)
    cross = CrossAttentionFusion(head_cfg, seed=seed)
    cross_state, _ = train(cross, features["train"], val, fusion_train, desc="xattn")
    mamba = MambaFusion(head_cfg, seed=seed)
    mamba.init_from_cross(cross_state)
    train(mamba, features["train"], val, fusion_train, desc="mamba")

    return {
        "encoders": encoders,
        "alpha": alpha,
        "sceeg": stage_report(test.p_sceeg, test.labels),
        "ppg": stage_report(test.p_ppg, test.labels),
        "score": stage_report(fused, test.labels),
        "xattn": evaluate_model(cross, test),
        "mamba": evaluate_model(mamba, test),
    }


@pytest.fixture(scope="module")
def runs(cohort):
    run_cfg, _, pre, manifest = cohort
    return {seed: run_seed(run_cfg, pre, manifest, seed) for seed in SEEDS}


class TestComplementarity:
    def test_sceeg_misses_light_that_ppg_finds(self, runs):
        for seed, run in runs.items():
            assert run["sceeg"]["recall"][LIGHT] < run["ppg"]["recall"][LIGHT], seed

    def test_ppg_mixes_deep_and_rem_more_than_sceeg(self, runs):
        for seed, run in runs.items():
            assert deep_rem_confusion(run["ppg"]) > deep_rem_confusion(run["sceeg"]), seed

    def test_optimal_weight_is_interior(self, runs):
        for seed, run in runs.items():
            assert 0.0 < run["alpha"] < 1.0, seed

    @pytest.mark.parametrize("strategy", ["xattn", "mamba"])
    def test_learned_fusion_beats_both_modalities(self, runs, strategy):
        for seed, run in runs.items():
            best_single = max(run["sceeg"]["kappa"], run["ppg"]["kappa"])
            assert run[strategy]["kappa"] >= best_single + 0.03, seed

    def test_mamba_matches_score_fusion_on_most_seeds(self, runs):
        wins = sum(run["mamba"]["kappa"] >= run["score"]["kappa"] for run in runs.values())
        assert wins >= 2


class TestDomainShift:
    @pytest.fixture(scope="class")
    def target(self, tmp_path_factory, cohort):
        run_cfg, source, _, _ = cohort
        shifted = replace(source, n_subjects=20, seed=12, hr_offset_bpm=10.0, eeg_gain=1.5, alpha_shift_hz=1.0,
                          subject_prefix="T")
        pre, manifest = build_cohort(tmp_path_factory.mktemp("target"), shifted, run_cfg, seed=12)
        return window_datasets(pre, "ppg", manifest, WINDOW)

    def test_fine_tuning_never_loses_to_direct_transfer(self, runs, target):
        model = runs[0]["encoders"]["ppg"]
        source_state = model.state_dict()
        transfer = direct_transfer(model, target["val"])
        _, log = fine_tune(model, source_state, target["train"], target["val"],
                           TrainConfig(learning_rate=1e-4, epochs=4, batch_size=8, patience=4))
        assert log.best_kappa >= transfer["kappa"]
        assert evaluate_model(model, target["val"])["kappa"] >= transfer["kappa"] - 1e-12
        model.load_state_dict(source_state)
