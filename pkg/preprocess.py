"""
Signal preprocessing for scEEG and PPG recordings.

  scEEG: bandpass 0.3-35 Hz -> resample to 100 Hz -> recording z-score -> 30 s epochs (3000 samples)
  PPG:   Chebyshev-II lowpass 8 Hz -> resample to 1024 samples / 30 s -> clip +-3 SD -> z-score -> epochs

Filters run as single-pass causal second-order sections unless zero_phase is set.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import signal as sps

from config import config_hash
from errors import ConfigError, DataError, SignalError
from recording_io import PreprocessedRecording, RawRecording

logger = logging.getLogger(__name__)

# Window lengths in epochs and their report labels
WINDOW_LABELS = {1: "30s", 2: "1min", 6: "3min", 10: "5min", 20: "10min", 60: "30min"}
VALID_WINDOWS = tuple(WINDOW_LABELS)


def parse_window(value: Union[str, int]) -> int:
    """'3min' / '6' / 6 -> 6 epochs."""
    if isinstance(value, int) or str(value).isdigit():
        epochs = int(value)
        if epochs not in WINDOW_LABELS:
            raise ConfigError(f"Window of {epochs} epochs is not one of {VALID_WINDOWS}")
        return epochs
    for epochs, label in WINDOW_LABELS.items():
        if label == str(value).strip().lower():
            return epochs
    raise ConfigError(f"Unknown window '{value}' (expected one of {', '.join(WINDOW_LABELS.values())})")


@dataclass
class PreprocessConfig:
    sceeg_band: Tuple[float, float] = (0.3, 35.0)
    sceeg_rate: float = 100.0
    sceeg_epoch_len: int = 3000
    sceeg_hp_order: int = 2
    sceeg_lp_order: int = 8
    ppg_cutoff: float = 8.0
    ppg_filter_order: int = 8
    ppg_stopband_db: float = 40.0
    ppg_stopband_ratio: float = 1.25
    ppg_epoch_len: int = 1024
    clip_sigma: float = 3.0
    epoch_seconds: int = 30
    zero_phase: bool = False
    resample_beta: float = 8.6
    taps_per_phase: int = 32

    def __post_init__(self):
        self.sceeg_band = tuple(self.sceeg_band)
        low, high = self.sceeg_band
        if not 0 < low < high:
            raise ConfigError(f"sceeg_band must satisfy 0 < low < high, got {self.sceeg_band}")
        if self.sceeg_rate * self.epoch_seconds != self.sceeg_epoch_len:
            raise ConfigError("sceeg_epoch_len must equal sceeg_rate * epoch_seconds")
        if self.ppg_filter_order < 2 or self.ppg_filter_order % 2:
            raise ConfigError("ppg_filter_order must be an even number >= 2")
        if self.clip_sigma <= 0 or self.epoch_seconds <= 0 or self.taps_per_phase < 2:
            raise ConfigError("clip_sigma, epoch_seconds and taps_per_phase must be positive")

    @property
    def sceeg_target(self) -> Fraction:
        return Fraction(self.sceeg_epoch_len, self.epoch_seconds)

    @property
    def ppg_target(self) -> Fraction:
        return Fraction(self.ppg_epoch_len, self.epoch_seconds)


@dataclass
class EpochWindow:
    """T consecutive epochs of one subject, starting at epoch start_epoch."""
    epochs: np.ndarray
    modality: str
    subject_id: str
    start_epoch: int

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]


# ============================================
# FILTERS
# ============================================

def design_cheby2_lowpass(order: int = 8, cutoff_hz: float = 8.0, stopband_atten_db: float = 40.0,
                          rate_hz: float = 256.0, stopband_ratio: float = 1.25) -> np.ndarray:
    """
    Chebyshev type II lowpass as second-order sections, shape (order/2, 6).

    The stopband (>= stopband_atten_db down) starts at stopband_ratio * cutoff_hz.
    """
    nyquist = rate_hz / 2.0
    edge = stopband_ratio * cutoff_hz
    if cutoff_hz <= 0 or cutoff_hz >= nyquist:
        raise SignalError(f"Lowpass cutoff {cutoff_hz} Hz must lie below Nyquist ({nyquist} Hz)")
    if edge >= nyquist:
        raise SignalError(f"Stopband edge {edge} Hz is at or above Nyquist ({nyquist} Hz)")
    return sps.cheby2(order, stopband_atten_db, edge, btype="low", fs=rate_hz, output="sos")


def apply_sos(sos: np.ndarray, x: np.ndarray, zero_phase: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if zero_phase:
        return sps.sosfiltfilt(sos, x)
    return sps.sosfilt(sos, x)


def design_sceeg_bandpass(rate_hz: float, band=(0.3, 35.0), hp_order: int = 2, lp_order: int = 8) -> np.ndarray:
    if rate_hz <= 2 * band[1]:
        raise SignalError(f"scEEG rate {rate_hz} Hz is too low for a {band[1]} Hz band edge")
    highpass = sps.butter(hp_order, band[0], btype="highpass", fs=rate_hz, output="sos")
    lowpass = sps.butter(lp_order, band[1], btype="lowpass", fs=rate_hz, output="sos")
    return np.vstack([highpass, lowpass])


def bandpass_sceeg(x, rate_hz: float, cfg: Optional[PreprocessConfig] = None) -> np.ndarray:
    cfg = cfg or PreprocessConfig()
    sos = design_sceeg_bandpass(rate_hz, cfg.sceeg_band, cfg.sceeg_hp_order, cfg.sceeg_lp_order)
    return apply_sos(sos, x, cfg.zero_phase)


# ============================================
# RESAMPLING
# ============================================

def resample_ratio(from_hz, to_hz) -> Fraction:
    if not (from_hz > 0 and to_hz > 0):
        raise SignalError(f"Resampling rates must be positive, got {from_hz} -> {to_hz}")
    ratio = (Fraction(to_hz).limit_denominator(100000) / Fraction(from_hz).limit_denominator(100000)).limit_denominator(10000)
    exact = float(to_hz) / float(from_hz)
    if abs(float(ratio) - exact) > 1e-9 * exact:
        logger.warning(f"[PREPROCESS] resampling {from_hz} -> {to_hz} Hz approximated as {ratio} "
                       f"(off by {float(ratio) / exact - 1:.2e})")
    return ratio


def polyphase_filter(up: int, down: int, beta: float = 8.6, taps_per_phase: int = 32) -> np.ndarray:
    """Kaiser-windowed sinc whose polyphase branches each sum to 1/up (exact DC gain)."""
    max_rate = max(up, down)
    half = (taps_per_phase // 2) * max_rate
    h = sps.firwin(2 * half + 1, 1.0 / max_rate, window=("kaiser", beta))
    for phase in range(up):
        branch = h[phase::up]
        h[phase::up] = branch / (branch.sum() * up)
    return h


def resample(x, from_hz, to_hz, beta: float = 8.6, taps_per_phase: int = 32) -> np.ndarray:
    """Rational polyphase resampling; output length is round(len * to / from)."""
    x = np.asarray(x, dtype=np.float64)
    ratio = resample_ratio(from_hz, to_hz)
    n_out = int(math.floor(x.size * ratio + Fraction(1, 2)))
    if n_out < 1:
        raise SignalError(f"Resampling {x.size} samples from {from_hz} to {to_hz} Hz leaves nothing")
    if ratio == 1:
        return x.copy()
    up, down = ratio.numerator, ratio.denominator
    h = polyphase_filter(up, down, beta, taps_per_phase)
    y = sps.resample_poly(x, up, down, window=h, padtype="line")
    return y[:n_out]


# ============================================
# AMPLITUDE + SEGMENTATION
# ============================================

def clip_sd(x, k: float = 3.0) -> np.ndarray:
    """Clip to mean +- k population SD of the input; a constant signal passes through."""
    x = np.asarray(x, dtype=np.float64)
    mu, sd = x.mean(), x.std()
    if sd == 0:
        return x.copy()
    return np.clip(x, mu - k * sd, mu + k * sd)


def zscore_recording(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0 or not np.isfinite(sd):
        raise SignalError("Recording has zero variance; cannot z-score")
    return (x - x.mean()) / sd


def segment_epochs(x, epoch_len: int) -> np.ndarray:
    """Non-overlapping epochs[n, epoch_len]; the trailing remainder is dropped."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size // epoch_len
    if n < 1:
        raise SignalError(f"Signal of {x.size} samples is shorter than one epoch ({epoch_len})")
    return x[: n * epoch_len].reshape(n, epoch_len).copy()


def build_windows(epochs: np.ndarray, window: int, stride: Optional[int] = None,
                  modality: str = "", subject_id: str = "") -> List[EpochWindow]:
    if window < 1:
        raise SignalError(f"Window length must be >= 1 epoch, got {window}")
    stride = stride or window
    n = epochs.shape[0]
    if n < window:
        raise SignalError(f"{subject_id or 'recording'}: {n} epochs is fewer than one {window}-epoch window")
    return [
        EpochWindow(epochs[start:start + window], modality, subject_id, start)
        for start in range(0, n - window + 1, stride)
    ]


# ============================================
# PIPELINES
# ============================================

def preprocess_ppg(recording: RawRecording, cfg: Optional[PreprocessConfig] = None) -> PreprocessedRecording:
    """lowpass -> resample -> clip -> z-score -> segment."""
    cfg = cfg or PreprocessConfig()
    if recording.modality != "ppg":
        raise DataError(f"{recording.subject_id}: expected a PPG recording, got {recording.modality}")
    sos = design_cheby2_lowpass(cfg.ppg_filter_order, cfg.ppg_cutoff, cfg.ppg_stopband_db,
                                recording.rate_hz, cfg.ppg_stopband_ratio)
    x = apply_sos(sos, recording.samples, cfg.zero_phase)
    x = resample(x, recording.rate_hz, cfg.ppg_target, cfg.resample_beta, cfg.taps_per_phase)
    x = clip_sd(x, cfg.clip_sigma)
    x = zscore_recording(x)
    epochs = segment_epochs(x, cfg.ppg_epoch_len)
    logger.debug(f"[PREPROCESS] {recording.subject_id} ppg: {epochs.shape[0]} epochs")
    return PreprocessedRecording(epochs, float(cfg.ppg_target), "ppg", recording.subject_id,
                                 recording.channel, config_hash(cfg))


def preprocess_sceeg(recording: RawRecording, cfg: Optional[PreprocessConfig] = None) -> PreprocessedRecording:
    """bandpass -> resample -> z-score -> segment."""
    cfg = cfg or PreprocessConfig()
    if recording.modality != "sceeg":
        raise DataError(f"{recording.subject_id}: expected an scEEG recording, got {recording.modality}")
    x = bandpass_sceeg(recording.samples, recording.rate_hz, cfg)
    x = resample(x, recording.rate_hz, cfg.sceeg_target, cfg.resample_beta, cfg.taps_per_phase)
    x = zscore_recording(x)
    epochs = segment_epochs(x, cfg.sceeg_epoch_len)
    logger.debug(f"[PREPROCESS] {recording.subject_id} sceeg: {epochs.shape[0]} epochs")
    return PreprocessedRecording(epochs, float(cfg.sceeg_target), "sceeg", recording.subject_id,
                                 recording.channel, config_hash(cfg))


def preprocess_recording(recording: RawRecording, cfg: Optional[PreprocessConfig] = None) -> PreprocessedRecording:
    if recording.modality == "ppg":
        return preprocess_ppg(recording, cfg)
    return preprocess_sceeg(recording, cfg)
