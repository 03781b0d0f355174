"""
Cohort-level orchestration shared by the CLI and the experiment tests:
model registry and checkpoint save/load, parallel preprocessing of a cohort
directory, window/paired datasets from a split manifest, frozen-encoder
feature caching and hypnogram-level evaluation reports.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import neural as nn
from checkpoint import file_sha256, read_checkpoint, read_sidecar, verify_encoder_hashes, write_checkpoint, write_sidecar
from config import SFUS_THREADS, config_hash, from_dict
from datasets import (FeatureDataset, PairedWindowDataset, WindowDataset, build_paired_dataset,
                      build_window_dataset, iterate_batches)
from errors import CheckpointError, ConfigError, DataError
from fusion import CrossAttentionFusion, FusionConfig, MambaFusion, build_fusion_head, fusion_config
from layers import Module
from metrics import measures_mae, per_subject_measures, summarize
from ppg_model import PpgConfig, PpgModel, ppg_config
from preprocess import PreprocessConfig, preprocess_recording
from recording_io import (Hypnogram, PreprocessedRecording, SplitManifest, hypnogram_path, list_subjects,
                          read_container, read_hypnogram, recording_path, write_container, write_hypnogram)
from sceeg_model import SceegConfig, SceegModel, sceeg_config

logger = logging.getLogger(__name__)

MODEL_KINDS = ("sceeg", "ppg", "xattn", "mamba")
ENCODER_KINDS = ("sceeg", "ppg")
PARTITIONS = ("train", "val", "test")


# ============================================
# MODEL REGISTRY
# ============================================

def build_model(kind: str, run_cfg: Dict[str, Any], window: int = 1, seed: int = 0) -> Module:
    """Fresh model of the given kind from the matching run-config section."""
    if kind == "sceeg":
        return SceegModel(sceeg_config(run_cfg.get("sceeg"), window), seed)
    if kind == "ppg":
        return PpgModel(ppg_config(run_cfg.get("ppg"), window), seed)
    if kind in ("xattn", "mamba"):
        return build_fusion_head(kind, fusion_config(run_cfg.get("fusion")), seed)
    raise ConfigError(f"Unknown model kind '{kind}' (expected {', '.join(MODEL_KINDS)})")


def _model_from_meta(meta: Dict[str, Any]) -> Module:
    kind, cfg = meta.get("kind"), meta.get("config", {})
    if kind == "sceeg":
        return SceegModel(from_dict(SceegConfig, cfg, "sceeg"))
    if kind == "ppg":
        return PpgModel(from_dict(PpgConfig, cfg, "ppg"))
    if kind == "xattn":
        return CrossAttentionFusion(from_dict(FusionConfig, cfg, "fusion"))
    if kind == "mamba":
        return MambaFusion(from_dict(FusionConfig, cfg, "fusion"))
    raise CheckpointError(f"Checkpoint metadata names an unknown model kind '{kind}'")


def model_kind(model: Module) -> str:
    if isinstance(model, SceegModel):
        return "sceeg"
    if isinstance(model, PpgModel):
        return "ppg"
    if isinstance(model, MambaFusion):
        return "mamba"
    if isinstance(model, CrossAttentionFusion):
        return "xattn"
    raise CheckpointError(f"No checkpoint kind for {type(model).__name__}")


def save_model(path, model: Module, window: int = 1, encoder_paths: Optional[Dict[str, str]] = None,
               extra: Optional[Dict[str, Any]] = None) -> str:
    """Checkpoint + sidecar; fusion heads record the hashes of the encoders they were trained on."""
    sha = write_checkpoint(path, model.state_dict())
    meta = {
        "kind": model_kind(model),
        "window": int(window),
        "config": asdict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "sha256": sha,
        "parameters": model.num_parameters(),
    }
    if encoder_paths:
        meta["encoder_hashes"] = {role: file_sha256(p) for role, p in encoder_paths.items()}
    meta.update(extra or {})
    write_sidecar(path, meta)
    logger.info(f"[CKPT] saved {meta['kind']} ({meta['parameters']:,} params) to {path}")
    return sha


def load_model(path, encoder_paths: Optional[Dict[str, str]] = None) -> Tuple[Module, Dict[str, Any]]:
    meta = read_sidecar(path)
    if encoder_paths:
        verify_encoder_hashes(meta, encoder_paths)
    model = _model_from_meta(meta)
    model.load_state_dict(read_checkpoint(path))
    return model.eval(), meta


# ============================================
# COHORT PREPROCESSING
# ============================================

def _preprocess_subject(in_dir: Path, out_dir: Path, sid: str, modality: str, cfg: PreprocessConfig) -> str:
    raw = read_container(recording_path(in_dir, sid, modality))
    if isinstance(raw, PreprocessedRecording):
        raise DataError(f"{sid}: {modality} recording in {in_dir} is already preprocessed")
    write_container(recording_path(out_dir, sid, modality), preprocess_recording(raw, cfg))
    write_hypnogram(hypnogram_path(out_dir, sid), read_hypnogram(hypnogram_path(in_dir, sid), sid))
    return sid


def preprocess_directory(in_dir, out_dir, modality: str, cfg: Optional[PreprocessConfig] = None,
                         workers: Optional[int] = None) -> List[str]:
    """Preprocess every subject's recording; hypnograms are copied so the output is self-contained."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    cfg = cfg or PreprocessConfig()
    subjects = list_subjects(in_dir)
    if not subjects:
        raise DataError(f"No hypnograms found in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=min(workers or SFUS_THREADS, SFUS_THREADS)) as pool:
        done = list(pool.map(lambda sid: _preprocess_subject(in_dir, out_dir, sid, modality, cfg), subjects))
    logger.info(f"[PREPROCESS] {modality}: {len(done)} subjects -> {out_dir}")
    return done


def load_cohort(directory, modality: str, subjects: Sequence[str]) -> Dict[str, PreprocessedRecording]:
    recordings = {}
    for sid in subjects:
        rec = read_container(recording_path(directory, sid, modality))
        if not isinstance(rec, PreprocessedRecording):
            raise DataError(f"{sid}: {modality} recording in {directory} has not been preprocessed")
        recordings[sid] = rec
    return recordings


def load_hypnograms(directory, subjects: Sequence[str]) -> Dict[str, Hypnogram]:
    return {sid: read_hypnogram(hypnogram_path(directory, sid), sid) for sid in subjects}


def window_datasets(directory, modality: str, manifest: SplitManifest, window: int) -> Dict[str, WindowDataset]:
    """Train/val/test WindowDatasets for one modality of a preprocessed cohort."""
    out = {}
    for part in PARTITIONS:
        subjects = manifest.subjects(part)
        if not subjects:
            continue
        out[part] = build_window_dataset(load_cohort(directory, modality, subjects),
                                         load_hypnograms(directory, subjects), subjects, window, modality)
    return out


def paired_datasets(directory, manifest: SplitManifest, window: int) -> Dict[str, PairedWindowDataset]:
    out = {}
    for part in PARTITIONS:
        subjects = manifest.subjects(part)
        if not subjects:
            continue
        out[part] = build_paired_dataset(load_cohort(directory, "sceeg", subjects),
                                         load_cohort(directory, "ppg", subjects),
                                         load_hypnograms(directory, subjects), subjects, window)
    return out


# ============================================
# FROZEN-ENCODER FEATURES
# ============================================

def encode_dataset(sceeg_model: Module, ppg_model: Module, data: PairedWindowDataset,
                   batch_size: int = 16) -> FeatureDataset:
    """Run both frozen encoders once; fusion training then only touches fusion parameters."""
    sceeg_model.eval()
    ppg_model.eval()
    f_s, p_s, f_p, p_p = [], [], [], []
    with nn.no_grad():
        for idx in iterate_batches(len(data), batch_size):
            fs, ps = sceeg_model(data.sceeg[idx])
            fp, pp = ppg_model(data.ppg[idx])
            f_s.append(fs.data)
            p_s.append(ps.data)
            f_p.append(fp.data)
            p_p.append(pp.data)
    return FeatureDataset(np.concatenate(f_s), np.concatenate(f_p), np.concatenate(p_s), np.concatenate(p_p),
                          data.labels, data.subject_ids, data.starts)


# ============================================
# HYPNOGRAM-LEVEL EVALUATION
# ============================================

def stitch_hypnograms(stages: np.ndarray, subject_ids: Sequence[str], starts: Sequence[int]) -> List[Hypnogram]:
    """Reassemble per-window stage sequences [N, T] into one hypnogram per subject (window order by start)."""
    stages = np.asarray(stages, dtype=np.int64)
    by_subject: Dict[str, List[Tuple[int, np.ndarray]]] = {}
    for row, sid, start in zip(stages, subject_ids, starts):
        by_subject.setdefault(sid, []).append((int(start), row))
    return [Hypnogram(sid, np.concatenate([row for _, row in sorted(rows, key=lambda r: r[0])]))
            for sid, rows in sorted(by_subject.items())]


def evaluation_report(probs: np.ndarray, labels: np.ndarray, subject_ids: Sequence[str],
                      starts: Sequence[int]) -> Dict[str, Any]:
    """Epoch-level agreement plus per-subject sleep measures and their MAE."""
    pred = np.argmax(probs, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise DataError(f"Predictions {pred.shape} do not match labels {labels.shape}")
    pred_hyps = stitch_hypnograms(pred, subject_ids, starts)
    ref_hyps = stitch_hypnograms(labels, subject_ids, starts)
    report = summarize(pred.reshape(-1), labels.reshape(-1))
    report["sleep_measures_mae"] = measures_mae(pred_hyps, ref_hyps)
    report["per_subject"] = per_subject_measures(pred_hyps, ref_hyps).to_dict(orient="records")
    report["n_subjects"] = len(ref_hyps)
    return report
