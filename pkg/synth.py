"""
Generate a synthetic paired scEEG/PPG sleep cohort.

Stages follow a Markov chain; every 30 s epoch is rendered from a
stage-conditioned recipe:
  scEEG  band-limited oscillations (Deep: strong delta, Wake: alpha, Light: theta + spindles)
  PPG    pulse train whose heart rate and beat-interval variability depend on the stage

Two knobs make the modalities complementary: a share of Light epochs is
rendered with the Wake EEG recipe, and a share of Deep/REM epochs swap their
PPG profile. Shift knobs (heart-rate offset, EEG gain, alpha shift, noise
scale) produce a "target cohort" for cross-dataset experiments.

Usage:
  python synth.py --out data/raw                  # default 40-subject cohort
  python synth.py --out data/target --config c.json
"""

import argparse
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from config import SFUS_THREADS, config_hash, from_dict, load_json_config, setup_logging
from errors import ConfigError
from neural import SeededRng
from recording_io import (DEEP, LIGHT, REM, WAKE, Hypnogram, RawRecording, hypnogram_path,
                          recording_path, write_container, write_hypnogram)

logger = logging.getLogger(__name__)

# ============================================
# STAGE RECIPES
# ============================================

# (low Hz, high Hz, amplitude) oscillation components per stage
EEG_RECIPES = {
    WAKE: [(8.0, 12.0, 2.0), (15.0, 25.0, 0.8)],
    LIGHT: [(4.0, 7.0, 1.5)],
    DEEP: [(1.0, 2.5, 4.0)],
    REM: [(4.0, 7.0, 1.0), (15.0, 25.0, 0.8), (8.0, 12.0, 0.5)],
}
SPINDLE = (12.0, 14.0, 2.0)
ALPHA_BAND = (8.0, 12.0)

# mean heart rate (bpm) and relative beat-interval SD per stage
PPG_PROFILES = {
    WAKE: (84.0, 0.06),
    LIGHT: (64.0, 0.025),
    DEEP: (56.0, 0.012),
    REM: (70.0, 0.05),
}

DEFAULT_TRANSITIONS = (
    (0.85, 0.13, 0.00, 0.02),
    (0.04, 0.86, 0.06, 0.04),
    (0.01, 0.12, 0.87, 0.00),
    (0.03, 0.09, 0.00, 0.88),
)


@dataclass
class SynthConfig:
    n_subjects: int = 40
    epochs_per_subject: int = 240
    transitions: Tuple[Tuple[float, ...], ...] = DEFAULT_TRANSITIONS
    initial_stage: int = WAKE
    sceeg_rate: float = 200.0
    ppg_rate: float = 256.0
    eeg_noise: float = 0.5
    ppg_noise: float = 0.05
    sceeg_light_wake_confusability: float = 0.4
    ppg_deep_rem_confusability: float = 0.4
    hr_offset_bpm: float = 0.0
    eeg_gain: float = 1.0
    alpha_shift_hz: float = 0.0
    noise_scale: float = 1.0
    subject_prefix: str = "S"
    seed: int = 0

    def __post_init__(self):
        self.transitions = tuple(tuple(float(p) for p in row) for row in self.transitions)
        matrix = np.array(self.transitions)
        if matrix.shape != (4, 4) or (matrix < 0).any() or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("synth.transitions must be a 4x4 row-stochastic matrix")
        if self.n_subjects < 1 or self.epochs_per_subject < 1:
            raise ConfigError("synth.n_subjects and synth.epochs_per_subject must be >= 1")
        if self.initial_stage not in (WAKE, LIGHT, DEEP, REM):
            raise ConfigError("synth.initial_stage must be a stage index 0..3")
        for knob in ("sceeg_light_wake_confusability", "ppg_deep_rem_confusability"):
            if not 0.0 <= getattr(self, knob) <= 1.0:
                raise ConfigError(f"synth.{knob} must lie in [0, 1]")
        if self.sceeg_rate <= 70 or self.ppg_rate <= 20:
            raise ConfigError("synth sampling rates are too low for the preprocessing filters")


class SubjectRecording(NamedTuple):
    sceeg: RawRecording
    ppg: RawRecording
    hypnogram: Hypnogram


# ============================================
# GENERATORS
# ============================================

def generate_stages(cfg: SynthConfig, rng: SeededRng) -> np.ndarray:
    matrix = np.array(cfg.transitions)
    stages = np.empty(cfg.epochs_per_subject, dtype=np.int64)
    stages[0] = cfg.initial_stage
    for i in range(1, stages.size):
        stages[i] = rng.choice(4, p=matrix[stages[i - 1]])
    return stages


def render_eeg_epoch(stage: int, cfg: SynthConfig, rng: SeededRng) -> np.ndarray:
    n = int(round(30 * cfg.sceeg_rate))
    t = np.arange(n) / cfg.sceeg_rate
    x = np.zeros(n)
    for low, high, amp in EEG_RECIPES[stage]:
        if (low, high) == ALPHA_BAND:
            low, high = low + cfg.alpha_shift_hz, high + cfg.alpha_shift_hz
        # three random partials per band
        for _ in range(3):
            freq = rng.uniform(low, high)
            x += (amp / math.sqrt(3)) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    if stage == LIGHT:
        low, high, amp = SPINDLE
        for _ in range(2):
            center = rng.uniform(2.0, 28.0)
            envelope = np.exp(-0.5 * ((t - center) / 0.35) ** 2)
            x += amp * envelope * np.sin(2 * np.pi * rng.uniform(low, high) * t)
    x *= cfg.eeg_gain
    return x + rng.normal(0.0, cfg.eeg_noise * cfg.noise_scale, n)


def render_ppg(profile_stages: np.ndarray, cfg: SynthConfig, rng: SeededRng, hr_offset: float) -> np.ndarray:
    """Pulse train (systolic + diastolic Gaussian waves) over the whole night."""
    epoch_samples = int(round(30 * cfg.ppg_rate))
    n = profile_stages.size * epoch_samples
    duration = n / cfg.ppg_rate
    x = np.zeros(n)
    beat = rng.uniform(0.0, 0.5)
    half_width = int(round(0.6 * cfg.ppg_rate))
    while beat < duration:
        stage = profile_stages[min(int(beat // 30), profile_stages.size - 1)]
        hr, sd = PPG_PROFILES[stage]
        ipi = 60.0 / (hr + hr_offset) * (1.0 + sd * rng.normal())
        center = int(round(beat * cfg.ppg_rate))
        lo, hi = max(center - half_width, 0), min(center + 2 * half_width, n)
        if lo < hi:
            local_t = (np.arange(lo, hi) - center) / cfg.ppg_rate
            x[lo:hi] += np.exp(-0.5 * (local_t / 0.08) ** 2)
            x[lo:hi] += 0.4 * np.exp(-0.5 * ((local_t - 0.3 * ipi) / 0.12) ** 2)
        beat += max(ipi, 0.25)
    t = np.arange(n) / cfg.ppg_rate
    x += 0.1 * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
    return x + rng.normal(0.0, cfg.ppg_noise * cfg.noise_scale, n)


def generate_subject(cfg: SynthConfig, index: int) -> SubjectRecording:
    rng = SeededRng(cfg.seed, 500, index)
    subject_id = f"{cfg.subject_prefix}{index:03d}"
    stages = generate_stages(cfg, rng.child(1))

    eeg_rng = rng.child(2)
    eeg_stages = stages.copy()
    light = stages == LIGHT
    eeg_stages[light & (eeg_rng.random(stages.size) < cfg.sceeg_light_wake_confusability)] = WAKE
    eeg = np.concatenate([render_eeg_epoch(s, cfg, eeg_rng) for s in eeg_stages])

    ppg_rng = rng.child(3)
    ppg_stages = stages.copy()
    swap = ppg_rng.random(stages.size) < cfg.ppg_deep_rem_confusability
    ppg_stages[swap & (stages == DEEP)] = REM
    ppg_stages[swap & (stages == REM)] = DEEP
    hr_offset = ppg_rng.uniform(-2.0, 2.0) + cfg.hr_offset_bpm
    ppg = render_ppg(ppg_stages, cfg, ppg_rng, hr_offset)

    meta = {"source": "synth", "config_hash": config_hash(cfg)}
    return SubjectRecording(
        RawRecording(eeg, cfg.sceeg_rate, "sceeg", subject_id, "C4-M1", dict(meta)),
        RawRecording(ppg, cfg.ppg_rate, "ppg", subject_id, "PPG", dict(meta)),
        Hypnogram(subject_id, stages, "fused4"),
    )


def synth_generate(cfg: SynthConfig, workers: Optional[int] = None) -> List[SubjectRecording]:
    """One (scEEG, PPG, hypnogram) triple per subject; seed-deterministic regardless of workers."""
    workers = workers or SFUS_THREADS
    with ThreadPoolExecutor(max_workers=workers) as pool:
        subjects = list(pool.map(lambda i: generate_subject(cfg, i), range(cfg.n_subjects)))
    logger.info(f"[SYNTH] generated {len(subjects)} subjects x {cfg.epochs_per_subject} epochs")
    return subjects


def write_cohort(directory, subjects: List[SubjectRecording]) -> List[str]:
    written = []
    for subject in subjects:
        sid = subject.hypnogram.subject_id
        write_container(recording_path(directory, sid, "sceeg"), subject.sceeg)
        write_container(recording_path(directory, sid, "ppg"), subject.ppg)
        write_hypnogram(hypnogram_path(directory, sid), subject.hypnogram)
        written.append(sid)
    return written


def main():
    parser = argparse.ArgumentParser(description="Generate a synthetic sleep cohort")
    parser.add_argument("--out", required=True, help="Output cohort directory")
    parser.add_argument("--config", help="JSON run config (uses the 'synth' section)")
    args = parser.parse_args()

    setup_logging()
    cfg = from_dict(SynthConfig, load_json_config(args.config).get("synth"), "synth")
    print(f"Started: {datetime.now().isoformat()}")
    subjects = synth_generate(cfg)
    written = write_cohort(args.out, subjects)
    print(f"✓ Wrote {len(written)} subjects to {args.out}")


if __name__ == "__main__":
    main()
