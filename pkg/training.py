"""
Training harness: focal loss, Adam, freezing, early stopping on validation
kappa, fine-tuning, direct transfer and the window-length sweep.

Models are trained on window datasets (encoders) or on cached frozen-encoder
features (fusion heads); both paths share the same loop.
"""

import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

import neural as nn
from datasets import FeatureDataset, WindowDataset, iterate_batches
from errors import ConfigError, DataError, NumericalError, TrainingDivergedError
from layers import Module
from metrics import summarize
from neural import SeededRng, Tensor

logger = logging.getLogger(__name__)

Dataset = Union[WindowDataset, FeatureDataset]


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 50
    batch_size: int = 8
    focal_gamma: float = 2.0
    patience: int = 10
    seed: int = 0
    freeze: Tuple[str, ...] = ()
    max_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    store_float32: bool = True

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        # lr 0 leaves every weight untouched
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, epochs and batch_size must be >= 1")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")


FINE_TUNE_DEFAULTS = {"learning_rate": 1e-5}


@dataclass
class TrainLog:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    initial_kappa: Optional[float] = None

    def add(self, epoch: int, train_loss: float, val_kappa: float, val_accuracy: float, wall_s: float):
        self.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_kappa": val_kappa,
                            "val_accuracy": val_accuracy, "wall_s": wall_s})

    @property
    def best_kappa(self) -> float:
        if self.best_epoch < 0:
            return float("nan") if self.initial_kappa is None else self.initial_kappa
        return self.epochs[self.best_epoch]["val_kappa"]

    def numeric(self) -> List[Dict[str, float]]:
        """Log rows without wall-clock time (identical across seeded reruns)."""
        return [{k: v for k, v in row.items() if k != "wall_s"} for row in self.epochs]

    def write_jsonl(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for row in self.epochs:
                f.write(json.dumps({**row, "best": row["epoch"] == self.best_epoch}, sort_keys=True) + "\n")


# ============================================
# LOSS + OPTIMIZER
# ============================================

def focal_loss(P: Tensor, targets, gamma: float = 2.0) -> Tensor:
    """Mean over epochs of -(1 - p_t)^gamma * log(p_t); p_t floored at 1e-12."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    P = nn.as_tensor(P)
    flat = nn.reshape(P, (-1, P.shape[-1]))
    if flat.shape[0] != targets.size:
        raise DataError(f"{targets.size} targets for {flat.shape[0]} predicted epochs")
    if targets.size == 0 or targets.min() < 0 or targets.max() >= flat.shape[1]:
        raise DataError("Focal loss targets must be stage indices 0..3")
    p_t = flat[np.arange(targets.size), targets]
    log_p = nn.log(nn.clip(p_t, 1e-12, None))
    weight = nn.power(1.0 - p_t, gamma)
    return nn.mean(-(weight * log_p))


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if cfg.store_float32:
                p.data[...] = nn.to_float32_storage(p.data)


def apply_freeze(model: Module, prefixes: Sequence[str]) -> List[str]:
    frozen = []
    for name, p in model.named_parameters():
        if any(name == prefix or name.startswith(prefix + ".") for prefix in prefixes):
            p.requires_grad = False
            frozen.append(name)
    return frozen


# ============================================
# FORWARD / EVALUATION
# ============================================

def _forward(model: Module, data: Dataset, idx: np.ndarray) -> Tensor:
    if isinstance(data, FeatureDataset):
        return model(data.f_sceeg[idx], data.f_ppg[idx])
    return model(data.inputs[idx])[1]


def predict_proba(model: Module, data: Dataset, batch_size: int = 16) -> np.ndarray:
    """Probabilities [N, T, 4] in eval mode without recording the graph."""
    model.eval()
    chunks = []
    with nn.no_grad():
        for idx in iterate_batches(len(data), batch_size):
            chunks.append(_forward(model, data, idx).data)
    return np.concatenate(chunks, axis=0)


def evaluate_model(model: Module, data: Dataset, batch_size: int = 16) -> Dict[str, object]:
    probs = predict_proba(model, data, batch_size)
    pred = np.argmax(probs, axis=-1).reshape(-1)
    return summarize(pred, data.labels.reshape(-1))


def direct_transfer(model: Module, target_data: Dataset) -> Dict[str, object]:
    """Source model evaluated on the target cohort without any adaptation."""
    report = evaluate_model(model, target_data)
    logger.info(f"[TRANSFER] direct transfer kappa={report['kappa']:.4f}")
    return report


# ============================================
# TRAINING LOOP
# ============================================

def train(model: Module, train_data: Dataset, val_data: Dataset, cfg: TrainConfig,
          log_path=None, desc: str = "train", score_initial: bool = False) -> Tuple[Dict[str, np.ndarray], TrainLog]:
    """
    Minimise focal loss with Adam on the unfrozen parameters; after each pass
    evaluate validation kappa, keep the best state and stop after `patience`
    passes without improvement. The model is left holding the best state.

    With score_initial the incoming weights are evaluated first and stay the
    best state unless a pass beats them on validation kappa.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("Training and validation sets must both be non-empty")
    frozen = apply_freeze(model, cfg.freeze)
    trainable = [p for p in model.parameters() if p.requires_grad]
    if frozen:
        logger.info(f"[TRAIN] {len(frozen)} parameter tensors frozen")
    if not trainable:
        logger.warning("[TRAIN] no trainable parameters; running evaluation passes only")
    optimizer = Adam(trainable, cfg)
    rng = SeededRng(cfg.seed, 700)

    log = TrainLog()
    best_state = model.state_dict()
    best_kappa = -np.inf
    if score_initial:
        best_kappa = evaluate_model(model, val_data, cfg.batch_size)["kappa"]
        log.initial_kappa = best_kappa
        logger.info(f"[TRAIN] {desc} initial val_kappa={best_kappa:.4f}")
    stale = 0
    steps = 0
    show_progress = sys.stderr.isatty()

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        model.train()
        losses = []
        batches = iterate_batches(len(train_data), cfg.batch_size, rng.child(epoch))
        for idx in tqdm(batches, desc=f"{desc} {epoch + 1}/{cfg.epochs}", disable=not show_progress, leave=False):
            model.zero_grad()
            try:
                loss = focal_loss(_forward(model, train_data, idx), train_data.labels[idx], cfg.focal_gamma)
            except NumericalError as e:
                raise TrainingDivergedError(f"Training diverged at epoch {epoch} step {steps}: {e.detail}")
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(f"Non-finite loss at epoch {epoch} step {steps}")
            if trainable:
                nn.backward(loss)
                optimizer.step()
            losses.append(loss.item())
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break

        report = evaluate_model(model, val_data, cfg.batch_size)
        log.add(epoch, float(np.mean(losses)), report["kappa"], report["accuracy"], time.perf_counter() - started)
        logger.info(f"[TRAIN] {desc} epoch {epoch}: loss={log.epochs[-1]['train_loss']:.4f} "
                    f"val_kappa={report['kappa']:.4f} val_acc={report['accuracy']:.4f}")
        if report["kappa"] > best_kappa:
            best_kappa, best_state, stale = report["kappa"], model.state_dict(), 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"[TRAIN] early stop after {epoch + 1} epochs (best epoch {log.best_epoch})")
                break
        if cfg.max_steps and steps >= cfg.max_steps:
            break

    model.load_state_dict(best_state)
    model.eval()
    if log_path:
        log.write_jsonl(log_path)
    return best_state, log


def fine_tune(model: Module, source_state: Dict[str, np.ndarray], train_data: Dataset, val_data: Dataset,
              cfg: Optional[TrainConfig] = None, log_path=None) -> Tuple[Dict[str, np.ndarray], TrainLog]:
    """Continue from a source checkpoint on target data (default lr 1e-5), early-stopping on target val kappa.

    The source state itself is the first candidate, so the returned state never
    scores below direct transfer on the target validation set.
    """
    cfg = cfg or TrainConfig(**FINE_TUNE_DEFAULTS)
    model.load_state_dict(source_state)
    return train(model, train_data, val_data, cfg, log_path, desc="fine-tune", score_initial=True)


# ============================================
# INFERENCE TIMING + WINDOW SWEEP
# ============================================

def inference_ms(model: Module, *inputs, repeats: int = 100, warmup: int = 10) -> float:
    """Median wall time (ms) of single-window forward passes."""
    model.eval()
    timings = []
    with nn.no_grad():
        for i in range(warmup + repeats):
            started = time.perf_counter()
            model(*inputs)
            if i >= warmup:
                timings.append((time.perf_counter() - started) * 1000.0)
    return statistics.median(timings)


def window_sweep(modality: str, build_data: Callable[[int], Tuple[WindowDataset, WindowDataset, WindowDataset]],
                 build_model: Callable[[int], Module], cfg: TrainConfig, windows: Sequence[int],
                 labels: Dict[int, str], timing_repeats: int = 100) -> pd.DataFrame:
    """
    Train and evaluate one model per window length. build_data(window) returns
    (train, val, test) datasets; build_model(window) returns a fresh model.
    """
    rows = []
    for window in windows:
        train_data, val_data, test_data = build_data(window)
        model = build_model(window)
        logger.info(f"[SWEEP] {modality} window={labels[window]} params={model.num_parameters():,}")
        train(model, train_data, val_data, cfg, desc=f"{modality}-{labels[window]}")
        report = evaluate_model(model, test_data)
        rows.append({
            "window": labels[window],
            "epochs": window,
            "kappa": report["kappa"],
            "accuracy": report["accuracy"],
            "params": model.num_parameters(),
            "depth": getattr(model.cfg, "depth", None),
            "infer_ms": inference_ms(model, test_data.inputs[0], repeats=timing_repeats, warmup=min(10, timing_repeats)),
        })
    return pd.DataFrame(rows)
