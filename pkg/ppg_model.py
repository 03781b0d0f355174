"""
PPG encoder: raw and augmented (first-difference) streams through residual
conv encoders, bidirectional cross-stream attention, an adaptive gate that
mixes the two streams, dilated temporal conv blocks and a 4-class head.

Encoder depth follows the window length (4 layers at 30 s up to 8 at 30 min).
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

import neural as nn
from config import from_dict
from errors import ConfigError, ShapeError
from layers import BidirectionalCrossBlock, ChannelNorm, Conv1d, Linear, Module
from neural import SeededRng, Tensor

PPG_DEPTH_BY_WINDOW = {1: 4, 2: 5, 6: 6, 10: 6, 20: 7, 60: 8}


@dataclass
class PpgConfig:
    epoch_len: int = 1024
    channels: int = 224
    kernel: int = 7
    depth: int = 4
    d: int = 256
    heads: int = 8
    cross_blocks: int = 2
    cross_ffn: int = 512
    cross_norm_first: bool = False
    temporal_kernel: int = 3
    dilations: Tuple[int, ...] = (1, 2)
    window_epochs: int = 1
    activation: str = "silu"
    attn_activation: str = "gelu"
    dropout: float = 0.0

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        if self.d % self.heads:
            raise ConfigError(f"ppg.d={self.d} is not divisible by heads={self.heads}")
        if self.depth < 1 or self.epoch_len % (2 ** self.depth):
            raise ConfigError(f"ppg.epoch_len={self.epoch_len} must be divisible by 2**depth ({2 ** self.depth})")


PPG_PRESETS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "desk": {"channels": 16, "d": 32, "heads": 4, "cross_blocks": 1, "cross_ffn": 64},
    "tiny": {"epoch_len": 64, "channels": 4, "d": 32, "heads": 4, "cross_blocks": 1,
             "cross_ffn": 32, "depth": 2},
}


def depth_for_window(window_epochs: int) -> int:
    if window_epochs not in PPG_DEPTH_BY_WINDOW:
        raise ConfigError(f"No PPG encoder depth defined for a {window_epochs}-epoch window")
    return PPG_DEPTH_BY_WINDOW[window_epochs]


def ppg_config(section: Optional[Dict[str, Any]] = None, window_epochs: int = 1) -> PpgConfig:
    """Build a config from a JSON section; depth comes from the window unless the preset or section fixes it."""
    data = dict(section or {})
    preset = data.pop("preset", "full")
    if preset not in PPG_PRESETS:
        raise ConfigError(f"Unknown ppg preset '{preset}' (expected {', '.join(PPG_PRESETS)})")
    merged = {"depth": depth_for_window(window_epochs), **PPG_PRESETS[preset], **data,
              "window_epochs": window_epochs}
    return from_dict(PpgConfig, merged, "ppg")


def augment_ppg(window: np.ndarray) -> np.ndarray:
    """
    First difference of the window (x[i] - x[i-1], first difference repeated at
    i=0), standardized over the whole window; a flat result maps to zeros.
    Accepts [T, L] or [B, T, L].
    """
    window = np.asarray(window, dtype=np.float64)
    flat = window.reshape(window.shape[:-2] + (-1,))
    diff = np.diff(flat, axis=-1)
    diff = np.concatenate([diff[..., :1], diff], axis=-1)
    mu = diff.mean(axis=-1, keepdims=True)
    sd = diff.std(axis=-1, keepdims=True)
    centered = diff - mu
    # relative threshold: a ramp's difference is constant up to rounding
    flat_rows = sd <= 1e-12 * np.maximum(np.abs(mu), 1.0)
    out = np.where(flat_rows, 0.0, centered / np.where(flat_rows, 1.0, sd))
    return out.reshape(window.shape)


# ============================================
# STREAM ENCODER
# ============================================

class ResidualConvLayer(Module):
    """conv(k, stride 2) -> norm -> silu -> conv(k) plus an average-pooled skip; halves the length."""

    def __init__(self, channels: int, kernel: int, rng: SeededRng, activation: str = "silu"):
        self.conv1 = Conv1d(channels, channels, kernel, rng, stride=2, padding=kernel // 2)
        self.norm = ChannelNorm(channels)
        self.conv2 = Conv1d(channels, channels, kernel, rng, padding=kernel // 2)
        self.activation = activation

    def forward(self, x) -> Tensor:
        h = nn.activation(self.norm(self.conv1(x)), self.activation)
        return self.conv2(h) + nn.avg_pool1d(x, 2)


class StreamEncoder(Module):
    def __init__(self, cfg: PpgConfig, rng: SeededRng):
        self.stem = Conv1d(1, cfg.channels, cfg.kernel, rng, padding=cfg.kernel // 2)
        self.layers = [ResidualConvLayer(cfg.channels, cfg.kernel, rng.child(i), cfg.activation)
                       for i in range(cfg.depth)]
        self.proj = Linear(cfg.channels, cfg.d, rng)

    def forward(self, window) -> Tensor:
        """window[B, T, L] -> per-epoch features[B, T, d]."""
        batch, t, length = window.shape
        x = self.stem(nn.reshape(window, (batch, 1, t * length)))
        for layer in self.layers:
            x = layer(x)
        channels = x.shape[1]
        x = nn.mean(nn.reshape(x, (batch, channels, t, x.shape[2] // t)), axis=3)
        return self.proj(nn.transpose(x, (0, 2, 1)))


class TemporalConvBlock(Module):
    def __init__(self, d: int, kernel: int, dilation: int, rng: SeededRng, activation: str = "silu"):
        pad = dilation * (kernel - 1) // 2
        self.conv = Conv1d(d, d, kernel, rng, padding=pad, dilation=dilation)
        self.norm = ChannelNorm(d)
        self.activation = activation

    def forward(self, x) -> Tensor:
        """x[B, d, T] -> x + block(x)."""
        return x + nn.activation(self.norm(self.conv(x)), self.activation)


# ============================================
# MODEL
# ============================================

class PpgModel(Module):
    modality = "ppg"

    def __init__(self, cfg: PpgConfig, seed: int = 0):
        if cfg.temporal_kernel % 2 == 0:
            raise ConfigError("ppg.temporal_kernel must be odd to keep T unchanged")
        self.cfg = cfg
        rng = SeededRng(seed, 202)
        self.raw_stream = StreamEncoder(cfg, rng.child(1))
        self.aug_stream = StreamEncoder(cfg, rng.child(2))
        self.cross = [BidirectionalCrossBlock(cfg.d, cfg.heads, cfg.cross_ffn, rng.child(3, i),
                                              cfg.attn_activation, cfg.cross_norm_first, cfg.dropout)
                      for i in range(cfg.cross_blocks)]
        self.gate = Linear(2 * cfg.d, 1, rng.child(4))
        self.temporal = [TemporalConvBlock(cfg.d, cfg.temporal_kernel, dil, rng.child(5, i), cfg.activation)
                         for i, dil in enumerate(cfg.dilations)]
        self.classifier = Linear(cfg.d, 4, rng.child(6))
        self.force_gate: Optional[float] = None

    def cross_stream_attention(self, f_raw, f_aug) -> Tuple[Tensor, Tensor]:
        for block in self.cross:
            f_raw, f_aug = block(f_raw, f_aug)
        return f_raw, f_aug

    def stream_weights(self, f_raw, f_aug) -> Tensor:
        """w_raw per window in [0, 1], shape [B, 1]; w_aug = 1 - w_raw."""
        if self.force_gate is not None:
            return nn.Tensor(np.full((f_raw.shape[0], 1), float(self.force_gate)))
        pooled = nn.concat([nn.mean(f_raw, axis=1), nn.mean(f_aug, axis=1)], axis=-1)
        return nn.sigmoid(self.gate(pooled))

    def forward(self, window) -> Tuple[Tensor, Tensor]:
        """window[B, T, L] (or [T, L]) -> (features[B, T, d], probabilities[B, T, 4])."""
        raw = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=np.float64)
        single = raw.ndim == 2
        if single:
            raw = raw[None]
        if raw.ndim != 3 or raw.shape[2] != self.cfg.epoch_len:
            raise ShapeError(f"PPG window must be [B, T, {self.cfg.epoch_len}], got {raw.shape}")
        batch, t, _ = raw.shape
        f_raw = self.raw_stream(nn.Tensor(raw))
        f_aug = self.aug_stream(nn.Tensor(augment_ppg(raw)))
        f_raw, f_aug = self.cross_stream_attention(f_raw, f_aug)
        w = nn.reshape(self.stream_weights(f_raw, f_aug), (batch, 1, 1))
        fused = f_raw * w + f_aug * (1.0 - w)
        x = nn.transpose(fused, (0, 2, 1))
        for block in self.temporal:
            x = block(x)
        features = nn.transpose(x, (0, 2, 1))
        probs = nn.softmax(self.classifier(features), axis=-1)
        if single:
            return nn.reshape(features, (t, self.cfg.d)), nn.reshape(probs, (t, 4))
        return features, probs
