"""
Epoch-level agreement metrics and sleep-architecture measures.

Stages are 0 Wake, 1 Light, 2 Deep, 3 REM; one epoch is 30 s (0.5 min).
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from errors import DataError

N_STAGES = 4
EPOCH_MINUTES = 0.5
MEASURE_KEYS = ("tst_min", "se_pct", "fr_light_pct", "fr_deep_pct", "fr_rem_pct")


def _labels(hyp) -> np.ndarray:
    stages = getattr(hyp, "stages", hyp)
    return np.asarray(stages, dtype=np.int64).reshape(-1)


# ============================================
# AGREEMENT
# ============================================

def confusion(pred, truth, n_classes: int = N_STAGES) -> np.ndarray:
    """counts[true, predicted] over aligned epochs."""
    pred, truth = _labels(pred), _labels(truth)
    if pred.size != truth.size:
        raise DataError(f"Prediction has {pred.size} epochs, reference has {truth.size}")
    if pred.size == 0:
        raise DataError("No epochs to compare")
    if min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= n_classes:
        raise DataError(f"Stage labels must be in 0..{n_classes - 1}")
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def kappa(cm) -> float:
    """
    Cohen's kappa, (p_o - p_e) / (1 - p_e).

    Evaluated in exact integer arithmetic; when chance agreement is total
    (p_e = 1) kappa is 1 for perfect agreement and 0 otherwise.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise DataError("Empty confusion matrix")
    trace = int(np.trace(cm))
    chance = sum(int(r) * int(c) for r, c in zip(cm.sum(axis=1), cm.sum(axis=0)))
    if chance == total * total:
        return 1.0 if trace == total else 0.0
    return (trace * total - chance) / (total * total - chance)


def weighted_kappa(cm) -> float:
    """Linear-weighted kappa (partial credit for adjacent stages)."""
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.shape[0]
    total = cm.sum()
    if total <= 0:
        raise DataError("Empty confusion matrix")
    idx = np.arange(n)
    weights = 1 - np.abs(idx[:, None] - idx[None, :]) / (n - 1)
    observed = np.sum(cm * weights) / total
    expected = np.sum(np.outer(cm.sum(axis=1), cm.sum(axis=0)) * weights) / total ** 2
    if expected >= 1.0:
        return 1.0 if observed >= 1.0 else 0.0
    return float((observed - expected) / (1 - expected))


@dataclass
class ClassMetrics:
    recall: List[float]
    precision: List[float]
    f1: List[float]
    accuracy: float
    degenerate: List[bool] = field(default_factory=list)


def class_metrics(cm) -> ClassMetrics:
    """Per-stage recall/precision/F1 with 0 (and a degeneracy flag) where undefined."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise DataError("Empty confusion matrix")
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    recall, precision, f1, degenerate = [], [], [], []
    for c in range(cm.shape[0]):
        hit = int(cm[c, c])
        r = hit / rows[c] if rows[c] else 0.0
        p = hit / cols[c] if cols[c] else 0.0
        f = 2 * r * p / (r + p) if r + p > 0 else 0.0
        recall.append(float(r))
        precision.append(float(p))
        f1.append(float(f))
        degenerate.append(bool(rows[c] == 0 or cols[c] == 0 or r + p == 0))
    return ClassMetrics(recall, precision, f1, int(np.trace(cm)) / total, degenerate)


# ============================================
# SLEEP MEASURES
# ============================================

@dataclass
class SleepMeasures:
    tst_min: float
    se_pct: float
    fr_light_pct: float
    fr_deep_pct: float
    fr_rem_pct: float
    degenerate: bool = False

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def sleep_measures(hyp) -> SleepMeasures:
    """TST = sleep epochs * 0.5 min; SE = TST / (TST + wake) * 100; FR = stage / TST * 100."""
    stages = _labels(hyp)
    if stages.size == 0:
        raise DataError("Empty hypnogram")
    minutes = np.bincount(stages, minlength=N_STAGES)[:N_STAGES] * EPOCH_MINUTES
    wake, light, deep, rem = (float(m) for m in minutes)
    tst = light + deep + rem
    if tst == 0:
        return SleepMeasures(0.0, 0.0, 0.0, 0.0, 0.0, degenerate=True)
    return SleepMeasures(
        tst_min=tst,
        se_pct=tst / (tst + wake) * 100.0,
        fr_light_pct=light / tst * 100.0,
        fr_deep_pct=deep / tst * 100.0,
        fr_rem_pct=rem / tst * 100.0,
    )


def per_subject_measures(pred_hyps: Sequence, ref_hyps: Sequence) -> pd.DataFrame:
    """One row per subject with reference and predicted measures side by side."""
    if len(pred_hyps) != len(ref_hyps) or not pred_hyps:
        raise DataError(f"Got {len(pred_hyps)} predicted and {len(ref_hyps)} reference hypnograms")
    rows = []
    for pred, ref in zip(pred_hyps, ref_hyps):
        pid, rid = getattr(pred, "subject_id", None), getattr(ref, "subject_id", None)
        if pid is not None and rid is not None and pid != rid:
            raise DataError(f"Subject mismatch: predicted '{pid}' vs reference '{rid}'")
        p, r = sleep_measures(pred), sleep_measures(ref)
        row = {"subject_id": rid or pid or str(len(rows))}
        for key in MEASURE_KEYS:
            row[f"ref_{key}"] = getattr(r, key)
            row[f"pred_{key}"] = getattr(p, key)
        rows.append(row)
    return pd.DataFrame(rows)


def measures_mae(pred_hyps: Sequence, ref_hyps: Sequence) -> Dict[str, float]:
    """Mean absolute error over subjects for TST, SE and the three stage fractions."""
    table = per_subject_measures(pred_hyps, ref_hyps)
    return {key: float(np.mean(np.abs(table[f"pred_{key}"] - table[f"ref_{key}"]))) for key in MEASURE_KEYS}


def summarize(pred, truth) -> Dict[str, object]:
    """All epoch-level statistics for one evaluation, as plain JSON types."""
    cm = confusion(pred, truth)
    per_class = class_metrics(cm)
    return {
        "kappa": kappa(cm),
        "accuracy": per_class.accuracy,
        "weighted_kappa": weighted_kappa(cm),
        "recall": per_class.recall,
        "precision": per_class.precision,
        "f1": per_class.f1,
        "degenerate": per_class.degenerate,
        "light_recall": per_class.recall[1],
        "light_f1": per_class.f1[1],
        "confusion": cm.tolist(),
        "n_epochs": int(cm.sum()),
    }
