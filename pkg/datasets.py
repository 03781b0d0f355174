"""
Window datasets assembled from preprocessed recordings and hypnograms.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from errors import DataError
from neural import SeededRng
from preprocess import build_windows
from recording_io import Hypnogram, PreprocessedRecording

logger = logging.getLogger(__name__)


@dataclass
class WindowDataset:
    """inputs[N, T, L] with labels[N, T]; subject_ids/starts locate each window in its night."""
    inputs: np.ndarray
    labels: np.ndarray
    subject_ids: List[str]
    starts: List[int]
    modality: str = ""

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def window(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, index) -> "WindowDataset":
        index = np.asarray(index, dtype=np.int64)
        return WindowDataset(self.inputs[index], self.labels[index],
                             [self.subject_ids[i] for i in index], [self.starts[i] for i in index], self.modality)


@dataclass
class PairedWindowDataset:
    """Time-aligned scEEG and PPG windows of the same subjects and epochs."""
    sceeg: np.ndarray
    ppg: np.ndarray
    labels: np.ndarray
    subject_ids: List[str]
    starts: List[int]

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def window(self) -> int:
        return int(self.labels.shape[1])

    def modality(self, name: str) -> WindowDataset:
        inputs = self.sceeg if name == "sceeg" else self.ppg
        return WindowDataset(inputs, self.labels, self.subject_ids, self.starts, name)


@dataclass
class FeatureDataset:
    """Frozen-encoder outputs per window: features [N, T, d] and probabilities [N, T, 4]."""
    f_sceeg: np.ndarray
    f_ppg: np.ndarray
    p_sceeg: np.ndarray
    p_ppg: np.ndarray
    labels: np.ndarray
    subject_ids: List[str]
    starts: List[int]

    def __len__(self):
        return int(self.labels.shape[0])


def _aligned_epochs(rec: PreprocessedRecording, hyp: Hypnogram) -> int:
    n = min(rec.n_epochs, len(hyp))
    if rec.n_epochs != len(hyp):
        logger.warning(f"[DATA] {rec.subject_id}: {rec.n_epochs} {rec.modality} epochs vs "
                       f"{len(hyp)} scored epochs; using the first {n}")
    return n


def build_window_dataset(recordings: Dict[str, PreprocessedRecording], hypnograms: Dict[str, Hypnogram],
                         subjects: Sequence[str], window: int, modality: str = "") -> WindowDataset:
    inputs, labels, ids, starts = [], [], [], []
    for sid in subjects:
        if sid not in recordings or sid not in hypnograms:
            raise DataError(f"Subject {sid} is missing a recording or hypnogram")
        rec, hyp = recordings[sid], hypnograms[sid]
        n = _aligned_epochs(rec, hyp)
        for w in build_windows(rec.epochs[:n], window, modality=rec.modality, subject_id=sid):
            inputs.append(w.epochs)
            labels.append(hyp.stages[w.start_epoch:w.start_epoch + window])
            ids.append(sid)
            starts.append(w.start_epoch)
    if not inputs:
        raise DataError("No windows could be built for the requested subjects")
    return WindowDataset(np.stack(inputs), np.stack(labels), ids, starts, modality)


def build_paired_dataset(sceeg: Dict[str, PreprocessedRecording], ppg: Dict[str, PreprocessedRecording],
                         hypnograms: Dict[str, Hypnogram], subjects: Sequence[str], window: int) -> PairedWindowDataset:
    eeg_windows, ppg_windows, labels, ids, starts = [], [], [], [], []
    for sid in subjects:
        if sid not in sceeg or sid not in ppg or sid not in hypnograms:
            raise DataError(f"Subject {sid} is missing a recording or hypnogram")
        hyp = hypnograms[sid]
        n = min(_aligned_epochs(sceeg[sid], hyp), _aligned_epochs(ppg[sid], hyp))
        eeg_w = build_windows(sceeg[sid].epochs[:n], window, subject_id=sid)
        ppg_w = build_windows(ppg[sid].epochs[:n], window, subject_id=sid)
        for a, b in zip(eeg_w, ppg_w):
            eeg_windows.append(a.epochs)
            ppg_windows.append(b.epochs)
            labels.append(hyp.stages[a.start_epoch:a.start_epoch + window])
            ids.append(sid)
            starts.append(a.start_epoch)
    if not labels:
        raise DataError("No paired windows could be built for the requested subjects")
    return PairedWindowDataset(np.stack(eeg_windows), np.stack(ppg_windows), np.stack(labels), ids, starts)


def iterate_batches(n: int, batch_size: int, rng: Optional[SeededRng] = None) -> Iterator[np.ndarray]:
    """Index batches over n items, shuffled when an rng is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
