"""
Shared fixtures: seeded generators, tiny model configs and a small synthetic
cohort (raw + preprocessed + split) built once per test session.
"""

import copy
import json

import numpy as np
import pytest

from neural import SeededRng
from pipeline import preprocess_directory
from preprocess import PreprocessConfig
from recording_io import list_subjects, split_subjects
from synth import SynthConfig, synth_generate, write_cohort

TINY_RUN_CONFIG = {
    "seed": 0,
    "preprocess": {"sceeg_rate": 10.0, "sceeg_epoch_len": 300, "ppg_epoch_len": 64},
    "sceeg": {"preset": "tiny"},
    "ppg": {"preset": "tiny"},
    "fusion": {"preset": "tiny", "blocks": 1},
    "train": {"epochs": 2, "batch_size": 4, "patience": 2},
    "fusion_train": {"epochs": 2, "batch_size": 4, "patience": 2, "learning_rate": 3e-3},
    "fine_tune": {"epochs": 1, "batch_size": 4, "patience": 1},
    "synth": {"n_subjects": 5, "epochs_per_subject": 12},
}


@pytest.fixture
def rng():
    return SeededRng(42)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_preprocess():
    return PreprocessConfig(**TINY_RUN_CONFIG["preprocess"])


@pytest.fixture(scope="session")
def raw_cohort(tmp_path_factory):
    directory = tmp_path_factory.mktemp("raw")
    cfg = SynthConfig(**TINY_RUN_CONFIG["synth"])
    write_cohort(directory, synth_generate(cfg, workers=2))
    return directory


@pytest.fixture(scope="session")
def preprocessed_cohort(raw_cohort, tmp_path_factory, tiny_preprocess):
    directory = tmp_path_factory.mktemp("pre")
    for modality in ("sceeg", "ppg"):
        preprocess_directory(raw_cohort, directory, modality, tiny_preprocess, workers=2)
    return directory


@pytest.fixture(scope="session")
def split_manifest(preprocessed_cohort, tmp_path_factory):
    manifest = split_subjects(list_subjects(preprocessed_cohort), (0.6, 0.2, 0.2), seed=0)
    path = tmp_path_factory.mktemp("split") / "splits.json"
    manifest.save(path)
    return manifest, path


@pytest.fixture
def run_config():
    return copy.deepcopy(TINY_RUN_CONFIG)


@pytest.fixture(scope="session")
def run_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "run.json"
    path.write_text(json.dumps(TINY_RUN_CONFIG))
    return path
