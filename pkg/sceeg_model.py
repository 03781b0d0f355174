"""
scEEG encoder: multi-resolution CNN -> temporal context encoder (self-attention
over intra-epoch tokens) -> cross-epoch temporal transformer -> 4-class head.

Presets:
  full   3000-sample epochs, d=256 (about 2.56M parameters for windows >= 1 min)
  desk   3000-sample epochs, narrow channels, d=32 (synthetic cohort runs)
  tiny   300-sample epochs, d=32 (gradient checks)
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

import neural as nn
from config import from_dict
from errors import ConfigError, ShapeError
from layers import ChannelNorm, Conv1d, Linear, Module, TransformerLayer
from neural import Parameter, SeededRng, Tensor


@dataclass
class SceegConfig:
    epoch_len: int = 3000
    small_kernel: int = 50
    small_stride: int = 6
    large_kernel: int = 400
    large_stride: int = 50
    channels: Tuple[int, int] = (64, 128)
    d: int = 256
    heads: int = 8
    tce_layers: int = 2
    tce_ffn: int = 512
    temporal_layers: int = 2
    temporal_ffn: int = 512
    max_epochs: int = 60
    window_epochs: int = 1
    activation: str = "gelu"
    se_reduction: int = 16
    recalibrate: bool = True
    use_bias: bool = True
    use_norm: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.d % self.heads:
            raise ConfigError(f"sceeg.d={self.d} is not divisible by heads={self.heads}")
        if not 1 <= self.window_epochs <= self.max_epochs:
            raise ConfigError(f"sceeg.window_epochs must be in 1..{self.max_epochs}")


SCEEG_PRESETS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "desk": {"channels": (8, 16), "d": 32, "heads": 4, "tce_layers": 1, "tce_ffn": 64,
             "temporal_ffn": 64, "se_reduction": 4},
    "tiny": {"epoch_len": 300, "small_kernel": 8, "small_stride": 2, "large_kernel": 40,
             "large_stride": 5, "channels": (4, 8), "d": 32, "heads": 4, "tce_layers": 1,
             "tce_ffn": 64, "temporal_ffn": 64, "se_reduction": 4},
}


def sceeg_config(section: Optional[Dict[str, Any]] = None, window_epochs: int = 1) -> SceegConfig:
    """Build a config from a JSON section: {"preset": "desk", ...overrides}."""
    data = dict(section or {})
    preset = data.pop("preset", "full")
    if preset not in SCEEG_PRESETS:
        raise ConfigError(f"Unknown sceeg preset '{preset}' (expected {', '.join(SCEEG_PRESETS)})")
    merged = {**SCEEG_PRESETS[preset], **data, "window_epochs": window_epochs}
    return from_dict(SceegConfig, merged, "sceeg")


# ============================================
# MRCNN
# ============================================

class MrcnnBranch(Module):
    """conv -> norm -> act -> maxpool -> 2 x (conv -> norm -> act) -> maxpool."""

    def __init__(self, cfg: SceegConfig, rng: SeededRng, kernel: int, stride: int,
                 inner_kernel: int, pools):
        c1, c2 = cfg.channels
        bias = cfg.use_bias
        self.conv1 = Conv1d(1, c1, kernel, rng, stride=stride, padding=kernel // 2, bias=bias)
        self.conv2 = Conv1d(c1, c2, inner_kernel, rng, padding=inner_kernel // 2, bias=bias)
        self.conv3 = Conv1d(c2, c2, inner_kernel, rng, padding=inner_kernel // 2, bias=bias)
        self.norms = [ChannelNorm(c) for c in (c1, c2, c2)] if cfg.use_norm else []
        self.pools = pools
        self.activation = cfg.activation

    def _block(self, x, conv, i):
        x = conv(x)
        if self.norms:
            x = self.norms[i](x)
        return nn.activation(x, self.activation)

    def forward(self, x) -> Tensor:
        (k1, s1, p1), (k2, s2, p2) = self.pools
        x = nn.max_pool1d(self._block(x, self.conv1, 0), k1, s1, p1)
        x = self._block(x, self.conv2, 1)
        x = self._block(x, self.conv3, 2)
        return nn.max_pool1d(x, k2, s2, p2)


class Recalibration(Module):
    """Squeeze-and-excitation gate over CNN channels."""

    def __init__(self, channels: int, reduction: int, rng: SeededRng, bias: bool = True):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng, bias=bias)
        self.fc2 = Linear(hidden, channels, rng, bias=bias)

    def forward(self, x) -> Tensor:
        squeezed = nn.mean(x, axis=2)
        gate = nn.sigmoid(self.fc2(nn.activation(self.fc1(squeezed), "relu")))
        return x * nn.reshape(gate, gate.shape + (1,))


class Mrcnn(Module):
    def __init__(self, cfg: SceegConfig, rng: SeededRng):
        self.small = MrcnnBranch(cfg, rng, cfg.small_kernel, cfg.small_stride, 8, ((8, 2, 4), (4, 4, 2)))
        self.large = MrcnnBranch(cfg, rng, cfg.large_kernel, cfg.large_stride, 7, ((4, 2, 2), (2, 2, 1)))
        c2 = cfg.channels[1]
        self.recalibration = Recalibration(c2, cfg.se_reduction, rng, cfg.use_bias) if cfg.recalibrate else None
        self.proj = Linear(c2, cfg.d, rng, bias=cfg.use_bias)

    def forward(self, epochs) -> Tensor:
        """epochs[N, L] -> tokens[N, n_tokens, d]."""
        x = nn.reshape(epochs, (epochs.shape[0], 1, epochs.shape[1]))
        x = nn.concat([self.small(x), self.large(x)], axis=2)
        if self.recalibration is not None:
            x = self.recalibration(x)
        return self.proj(nn.transpose(x, (0, 2, 1)))


# ============================================
# MODEL
# ============================================

class SceegModel(Module):
    modality = "sceeg"

    def __init__(self, cfg: SceegConfig, seed: int = 0):
        self.cfg = cfg
        rng = SeededRng(seed, 101)
        self.mrcnn = Mrcnn(cfg, rng.child(1))
        self.tce = [TransformerLayer(cfg.d, cfg.heads, cfg.tce_ffn, rng.child(2, i), cfg.activation,
                                     dropout=cfg.dropout) for i in range(cfg.tce_layers)]
        if cfg.window_epochs > 1:
            self.pos_emb = Parameter(nn.init_uniform(rng.child(3), (cfg.max_epochs, cfg.d), fan_in=cfg.d))
            self.temporal = [TransformerLayer(cfg.d, cfg.heads, cfg.temporal_ffn, rng.child(4, i),
                                              cfg.activation, dropout=cfg.dropout)
                             for i in range(cfg.temporal_layers)]
        else:
            self.pos_emb = None
            self.temporal = []
        self.classifier = Linear(cfg.d, 4, rng.child(5))

    def _check_epochs(self, epochs) -> Tensor:
        epochs = nn.as_tensor(epochs)
        if epochs.ndim != 2 or epochs.shape[1] != self.cfg.epoch_len:
            raise ShapeError(f"scEEG epochs must be [N, {self.cfg.epoch_len}], got {epochs.shape}")
        return epochs

    def mrcnn_forward(self, epochs) -> Tensor:
        """epochs[N, L] -> per-epoch feature[N, d] (token mean before the TCE)."""
        return nn.mean(self.mrcnn(self._check_epochs(epochs)), axis=1)

    def tce_forward(self, tokens) -> Tensor:
        for layer in self.tce:
            tokens = layer(tokens)
        return tokens

    def encode_epochs(self, epochs) -> Tensor:
        return nn.mean(self.tce_forward(self.mrcnn(self._check_epochs(epochs))), axis=1)

    def forward(self, window) -> Tuple[Tensor, Tensor]:
        """window[B, T, L] (or [T, L]) -> (features[B, T, d], probabilities[B, T, 4])."""
        window = nn.as_tensor(window)
        single = window.ndim == 2
        if single:
            window = nn.reshape(window, (1,) + window.shape)
        if window.ndim != 3:
            raise ShapeError(f"scEEG window must be [B, T, L], got {window.shape}")
        batch, t, length = window.shape
        if t > self.cfg.max_epochs:
            raise ShapeError(f"Window of {t} epochs exceeds max_epochs={self.cfg.max_epochs}")
        features = nn.reshape(self.encode_epochs(nn.reshape(window, (batch * t, length))), (batch, t, self.cfg.d))
        if self.temporal and t > 1:
            features = features + self.pos_emb[:t]
            for layer in self.temporal:
                features = layer(features)
        probs = nn.softmax(self.classifier(features), axis=-1)
        if single:
            return nn.reshape(features, (t, self.cfg.d)), nn.reshape(probs, (t, 4))
        return features, probs


def mrcnn_token_count(cfg: SceegConfig) -> int:
    """Number of intra-epoch tokens the MRCNN emits for one epoch."""
    def out_len(n, k, s, p):
        return (n + 2 * p - k) // s + 1

    def branch(kernel, stride, inner, pools):
        n = out_len(cfg.epoch_len, kernel, stride, kernel // 2)
        n = out_len(n, *pools[0])
        n = out_len(out_len(n, inner, 1, inner // 2), inner, 1, inner // 2)
        return out_len(n, *pools[1])

    return (branch(cfg.small_kernel, cfg.small_stride, 8, ((8, 2, 4), (4, 4, 2)))
            + branch(cfg.large_kernel, cfg.large_stride, 7, ((4, 2, 2), (2, 2, 1))))
