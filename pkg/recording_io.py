"""
Recording containers, hypnograms, AASM label mapping and subject splits.

Cohort directory layout (one subject = three files):
  <dir>/<subject>_sceeg.srec
  <dir>/<subject>_ppg.srec
  <dir>/<subject>_hypnogram.csv

SREC container (little-endian):
  b"SREC", version u32, header-length u32, UTF-8 JSON header, float32 payload
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import ContainerError, DataError
from neural import SeededRng

logger = logging.getLogger(__name__)

# ============================================
# CONSTANTS
# ============================================

STAGE_NAMES = ("Wake", "Light", "Deep", "REM")
WAKE, LIGHT, DEEP, REM = range(4)
MODALITIES = ("sceeg", "ppg")

# AASM 5-class -> 4-class scheme (Light = N1 + N2)
AASM_TO_4CLASS = {"W": WAKE, "N1": LIGHT, "N2": LIGHT, "N3": DEEP, "REM": REM}
AASM_ALIASES = {"WAKE": "W", "R": "REM", "STAGE R": "REM", "S1": "N1", "S2": "N2", "S3": "N3"}

SREC_MAGIC = b"SREC"
SREC_VERSION = 1
HEADER_SCHEMA = {
    "subject_id": str,
    "modality": str,
    "channel": str,
    "rate_hz": (int, float),
    "n_samples": int,
    "preprocessed": bool,
}


# ============================================
# TYPES
# ============================================

@dataclass
class RawRecording:
    """One subject's continuous single-channel signal."""
    samples: np.ndarray
    rate_hz: float
    modality: str
    subject_id: str
    channel: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.modality not in MODALITIES:
            raise DataError(f"Unknown modality '{self.modality}' (expected sceeg or ppg)")
        if not self.rate_hz > 0:
            raise DataError(f"{self.subject_id}: sampling rate must be positive, got {self.rate_hz}")
        if self.samples.size == 0:
            raise DataError(f"{self.subject_id}: empty recording")
        if not np.isfinite(self.samples).all():
            raise DataError(f"{self.subject_id}: recording contains NaN or Inf")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate_hz


@dataclass
class PreprocessedRecording:
    """Epoch-aligned output of the preprocessing pipeline: epochs[n_epochs, epoch_len]."""
    epochs: np.ndarray
    rate_hz: float
    modality: str
    subject_id: str
    channel: str = ""
    config_hash: str = ""

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]

    @property
    def epoch_len(self) -> int:
        return self.epochs.shape[1]


@dataclass
class Hypnogram:
    subject_id: str
    stages: np.ndarray
    source_scheme: str = "fused4"
    aasm: Optional[List[str]] = None

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.int64).reshape(-1)
        if self.stages.size and (self.stages.min() < 0 or self.stages.max() > 3):
            raise DataError(f"{self.subject_id}: stage labels must be in 0..3")
        if self.aasm is not None and len(self.aasm) != self.stages.size:
            raise DataError(f"{self.subject_id}: AASM column length differs from stages")

    def __len__(self):
        return int(self.stages.size)


@dataclass
class SplitManifest:
    train: List[str]
    val: List[str]
    test: List[str]
    seed: int = 0

    def __post_init__(self):
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(set().union(*parts)) != total or total != len(self.train) + len(self.val) + len(self.test):
            raise DataError("Split partitions overlap or contain duplicate subjects")

    def subjects(self, partition: str) -> List[str]:
        if partition not in ("train", "val", "test"):
            raise DataError(f"Unknown split partition '{partition}'")
        return list(getattr(self, partition))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        payload = {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed}
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Split manifest not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return cls(list(data["train"]), list(data["val"]), list(data["test"]), int(data.get("seed", 0)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"Split manifest {path} is malformed: {e}")


# ============================================
# LABELS
# ============================================

def normalize_aasm_label(raw) -> Optional[str]:
    """Normalize scorer exports ('Stage 2', 'n2', 'R', 'Wake') to W/N1/N2/N3/REM/S4."""
    if raw is None:
        return None
    label = str(raw).strip().upper()
    if label.startswith("STAGE ") and label != "STAGE R":
        label = "N" + label[6:] if label[6:] in ("1", "2", "3") else label[6:]
    if label in ("S4", "N4", "4"):
        return "S4"
    return AASM_ALIASES.get(label, label)


def map_aasm_to_4class(label, allow_s4: bool = False) -> int:
    """W->0, N1/N2->1, N3->2, REM->3; legacy S4 -> Deep only if allowed."""
    normalized = normalize_aasm_label(label)
    if normalized == "S4":
        if allow_s4:
            return DEEP
        raise DataError("Legacy stage S4 found; enable allow_s4 to score it as Deep")
    if normalized not in AASM_TO_4CLASS:
        raise DataError(f"Unknown AASM stage label '{label}'")
    return AASM_TO_4CLASS[normalized]


def hypnogram_from_aasm(subject_id: str, labels: Sequence[str], allow_s4: bool = False) -> Hypnogram:
    stages = [map_aasm_to_4class(label, allow_s4) for label in labels]
    return Hypnogram(subject_id, np.array(stages, dtype=np.int64), "AASM5", [str(label) for label in labels])


# ============================================
# SREC CONTAINER
# ============================================

def write_container(path, recording: Union[RawRecording, PreprocessedRecording]):
    """Write a raw or preprocessed recording; preprocessed epochs are stored flattened."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    preprocessed = isinstance(recording, PreprocessedRecording)
    samples = recording.epochs.reshape(-1) if preprocessed else recording.samples
    header = {
        "subject_id": recording.subject_id,
        "modality": recording.modality,
        "channel": recording.channel,
        "rate_hz": float(recording.rate_hz),
        "n_samples": int(samples.size),
        "preprocessed": preprocessed,
    }
    if preprocessed:
        header["epoch_len"] = int(recording.epoch_len)
        header["config_hash"] = recording.config_hash
    else:
        header["meta"] = recording.meta
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join([
        SREC_MAGIC,
        struct.pack("<II", SREC_VERSION, len(encoded)),
        encoded,
        np.asarray(samples, dtype="<f4").tobytes(),
    ])
    path.write_bytes(blob)


def _validate_header(header: Dict[str, Any], path: Path):
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: header must be a JSON object")
    for key, kind in HEADER_SCHEMA.items():
        if key not in header:
            raise ContainerError(f"{path}: header is missing '{key}'")
        value = header[key]
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ContainerError(f"{path}: header field '{key}' has the wrong type")
    if header["modality"] not in MODALITIES:
        raise ContainerError(f"{path}: unknown modality '{header['modality']}'")
    if header["n_samples"] < 1 or header["rate_hz"] <= 0:
        raise ContainerError(f"{path}: header declares an empty or invalid recording")
    if header["preprocessed"]:
        epoch_len = header.get("epoch_len")
        if not isinstance(epoch_len, int) or epoch_len < 1 or header["n_samples"] % epoch_len:
            raise ContainerError(f"{path}: preprocessed header needs an epoch_len dividing n_samples")


def read_container(path) -> Union[RawRecording, PreprocessedRecording]:
    path = Path(path)
    if not path.is_file():
        raise ContainerError(f"Recording not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != SREC_MAGIC:
        raise ContainerError(f"{path}: bad magic (not an SREC container)")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != SREC_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: corrupt header ({e})")
    _validate_header(header, path)

    payload = blob[12 + header_len:]
    expected = 4 * header["n_samples"]
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)

    if header["preprocessed"]:
        return PreprocessedRecording(
            epochs=samples.reshape(-1, header["epoch_len"]),
            rate_hz=header["rate_hz"],
            modality=header["modality"],
            subject_id=header["subject_id"],
            channel=header["channel"],
            config_hash=header.get("config_hash", ""),
        )
    return RawRecording(samples, header["rate_hz"], header["modality"], header["subject_id"],
                        header["channel"], header.get("meta", {}))


# ============================================
# HYPNOGRAM CSV
# ============================================

def write_hypnogram(path, hyp: Hypnogram):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({"epoch_index": np.arange(len(hyp)), "stage_label": hyp.stages})
    if hyp.aasm is not None:
        df["aasm"] = hyp.aasm
    df.to_csv(path, index=False)


def read_hypnogram(path, subject_id: Optional[str] = None) -> Hypnogram:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Hypnogram not found: {path}")
    try:
        df = pd.read_csv(path, dtype={"aasm": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{path}: unreadable hypnogram CSV ({e})")
    if list(df.columns[:2]) != ["epoch_index", "stage_label"]:
        raise DataError(f"{path}: expected columns epoch_index,stage_label")
    if not np.array_equal(df["epoch_index"].to_numpy(), np.arange(len(df))):
        raise DataError(f"{path}: epoch_index must count 0..n-1 without gaps")
    subject_id = subject_id or path.stem.replace("_hypnogram", "")
    aasm = df["aasm"].astype(str).tolist() if "aasm" in df.columns else None
    scheme = "AASM5" if aasm is not None else "fused4"
    return Hypnogram(subject_id, df["stage_label"].to_numpy(dtype=np.int64), scheme, aasm)


# ============================================
# EXTERNAL EXPORTS
# ============================================

def normalize_modality(raw: str) -> Optional[str]:
    """Map exporter channel/modality names onto sceeg/ppg."""
    if not raw:
        return None
    name = raw.lower().strip()
    if "ppg" in name or "pleth" in name or "pulse" in name:
        return "ppg"
    if "eeg" in name or name in ("c4-m1", "c3-m2", "c4-a1", "c3-a2"):
        return "sceeg"
    return None


def import_external(samples, rate_hz: float, metadata: Dict[str, Any]) -> RawRecording:
    """
    Converter entry point for signals exported by other tools (EDF readers,
    vendor SDKs). metadata needs 'subject_id' and a modality or channel name.
    """
    subject_id = str(metadata.get("subject_id") or "").strip()
    if not subject_id:
        raise DataError("External recording needs a subject_id")
    modality = normalize_modality(metadata.get("modality") or metadata.get("channel") or "")
    if modality is None:
        raise DataError(f"{subject_id}: cannot tell the modality from {metadata!r}")
    extra = {k: v for k, v in metadata.items() if k not in ("subject_id", "modality", "channel")}
    extra["source"] = metadata.get("source", "external")
    return RawRecording(np.asarray(samples, dtype=np.float64), float(rate_hz), modality,
                        subject_id, str(metadata.get("channel", "")), extra)


# ============================================
# COHORT DIRECTORIES + SPLITS
# ============================================

def recording_path(directory, subject_id: str, modality: str) -> Path:
    return Path(directory) / f"{subject_id}_{modality}.srec"


def hypnogram_path(directory, subject_id: str) -> Path:
    return Path(directory) / f"{subject_id}_hypnogram.csv"


def list_subjects(directory) -> List[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Cohort directory not found: {directory}")
    return sorted(p.name[: -len("_hypnogram.csv")] for p in directory.glob("*_hypnogram.csv"))


def split_subjects(ids: Sequence[str], fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2),
                   seed: int = 0) -> SplitManifest:
    """Deterministic subject-level train/val/test split."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("Subject ids must be unique")
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise DataError(f"Split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ids)
    n_train = int(math.floor(fractions[0] * n + 0.5))
    n_val = int(math.floor((fractions[0] + fractions[1]) * n + 0.5)) - n_train
    n_test = n - n_train - n_val
    sizes = (n_train, n_val, n_test)
    if n_test < 0 or any(size == 0 and frac > 0 for size, frac in zip(sizes, fractions)):
        raise DataError(f"Too few subjects ({n}) for split fractions {fractions}")

    order = SeededRng(seed, 1).permutation(n)
    shuffled = [sorted(ids)[i] for i in order]
    manifest = SplitManifest(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
    )
    logger.info(f"[SPLIT] {n} subjects -> {n_train}/{n_val}/{n_test} (seed {seed})")
    return manifest
