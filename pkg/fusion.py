"""
scEEG/PPG fusion strategies over frozen encoders.

  score   P = alpha * P_ppg + (1 - alpha) * P_sceeg, alpha picked on validation data
  xattn   two bidirectional cross-attention blocks, concat -> Linear(2d -> d) -> classifier
  mamba   xattn features refined by a bidirectional selective state-space block
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import neural as nn
from config import from_dict
from errors import ConfigError, DataError, ModelError, NumericalError, ShapeError
from layers import BidirectionalCrossBlock, Conv1d, LayerNorm, Linear, Module
from metrics import confusion, kappa
from neural import Parameter, SeededRng, Tensor

logger = logging.getLogger(__name__)

ALPHA_GRID = tuple(i / 10 for i in range(11))
STRATEGIES = ("score", "xattn", "mamba")


@dataclass
class FusionConfig:
    d: int = 256
    heads: int = 8
    blocks: int = 2
    ffn: int = 1024
    norm_first: bool = False
    expand: int = 4
    state_size: int = 16
    dt_rank: int = 16
    conv_kernel: int = 4
    activation: str = "gelu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"fusion.d={self.d} is not divisible by heads={self.heads}")
        if min(self.expand, self.state_size, self.dt_rank, self.conv_kernel, self.blocks) < 1:
            raise ConfigError("fusion sizes must be positive")


FUSION_PRESETS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "desk": {"d": 32, "heads": 4, "ffn": 64, "expand": 2, "state_size": 8, "dt_rank": 4},
    "tiny": {"d": 32, "heads": 4, "ffn": 32, "expand": 2, "state_size": 4, "dt_rank": 2},
}


def fusion_config(section: Optional[Dict[str, Any]] = None) -> FusionConfig:
    data = dict(section or {})
    preset = data.pop("preset", "full")
    if preset not in FUSION_PRESETS:
        raise ConfigError(f"Unknown fusion preset '{preset}' (expected {', '.join(FUSION_PRESETS)})")
    return from_dict(FusionConfig, {**FUSION_PRESETS[preset], **data}, "fusion")


# ============================================
# SCORE-LEVEL FUSION
# ============================================

def _check_stochastic(P: np.ndarray, name: str, tol: float = 1e-6) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 4:
        raise ShapeError(f"{name} must be [T, 4], got {P.shape}")
    if (P < -tol).any() or not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=tol):
        raise DataError(f"{name} rows are not probability distributions")
    return P


def score_fusion(P_ppg, P_sceeg, alpha: float) -> np.ndarray:
    P_ppg = _check_stochastic(P_ppg, "P_ppg")
    P_sceeg = _check_stochastic(P_sceeg, "P_sceeg")
    if P_ppg.shape != P_sceeg.shape:
        raise ShapeError(f"Probability matrices differ in shape: {P_ppg.shape} vs {P_sceeg.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * P_ppg + (1.0 - alpha) * P_sceeg


def grid_search_alpha(P_ppg, P_sceeg, labels) -> Tuple[float, List[Tuple[float, float]]]:
    """
    Validation kappa for alpha in {0, 0.1, ..., 1.0}; returns (best alpha, curve).
    Ties go to the smaller alpha.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise DataError("Empty validation set for the alpha grid search")
    curve = []
    best_alpha, best_kappa = None, -np.inf
    for alpha in ALPHA_GRID:
        pred = np.argmax(score_fusion(P_ppg, P_sceeg, alpha), axis=1)
        k = kappa(confusion(pred, labels))
        curve.append((alpha, k))
        if k > best_kappa:
            best_alpha, best_kappa = alpha, k
    logger.info(f"[FUSION] alpha grid: best alpha={best_alpha:.1f} kappa={best_kappa:.4f}")
    return best_alpha, curve


# ============================================
# CROSS-ATTENTION FUSION
# ============================================

class CrossAttentionFusion(Module):
    def __init__(self, cfg: FusionConfig, seed: int = 0):
        self.cfg = cfg
        rng = SeededRng(seed, 303)
        self.blocks = [BidirectionalCrossBlock(cfg.d, cfg.heads, cfg.ffn, rng.child(1, i),
                                               cfg.activation, cfg.norm_first, cfg.dropout)
                       for i in range(cfg.blocks)]
        self.proj = Linear(2 * cfg.d, cfg.d, rng.child(2))
        self.classifier = Linear(cfg.d, 4, rng.child(3))

    def fused_features(self, f_sceeg, f_ppg) -> Tensor:
        f_sceeg, f_ppg = nn.as_tensor(f_sceeg), nn.as_tensor(f_ppg)
        if f_sceeg.shape != f_ppg.shape or f_sceeg.shape[-1] != self.cfg.d:
            raise ShapeError(f"Fusion inputs must both be [..., T, {self.cfg.d}], got {f_sceeg.shape} and {f_ppg.shape}")
        for block in self.blocks:
            f_sceeg, f_ppg = block(f_sceeg, f_ppg)
        return self.proj(nn.concat([f_sceeg, f_ppg], axis=-1))

    def forward(self, f_sceeg, f_ppg) -> Tensor:
        return nn.softmax(self.classifier(self.fused_features(f_sceeg, f_ppg)), axis=-1)


# ============================================
# SELECTIVE STATE SPACE
# ============================================

def ssm_scan(x, delta, A, B, C) -> Tensor:
    """
    Diagonal selective scan with h_0 = 0:

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
        y_t = sum_n C_t[n] * h_t[:, n]

    x, delta: [batch, T, E]; A: [E, N]; B, C: [batch, T, N].
    """
    x, delta, A, B, C = (nn.as_tensor(t) for t in (x, delta, A, B, C))
    if x.ndim != 3 or delta.shape != x.shape:
        raise ShapeError(f"ssm_scan: x {x.shape} and delta {delta.shape} must be equal [batch, T, E]")
    batch, steps, inner = x.shape
    if A.ndim != 2 or A.shape[0] != inner:
        raise ShapeError(f"ssm_scan: A {A.shape} does not fit {inner} channels")
    n_state = A.shape[1]
    if B.shape != (batch, steps, n_state) or C.shape != (batch, steps, n_state):
        raise ShapeError(f"ssm_scan: B {B.shape} / C {C.shape} must be [{batch}, {steps}, {n_state}]")
    if not all(np.isfinite(t.data).all() for t in (x, delta, A, B, C)):
        raise NumericalError("ssm_scan received non-finite parameters")

    dA = np.exp(delta.data[..., None] * A.data)                                  # [b, T, E, N]
    dBx = (delta.data * x.data)[..., None] * B.data[:, :, None, :]               # [b, T, E, N]
    h = np.empty((batch, steps, inner, n_state))
    state = np.zeros((batch, inner, n_state))
    for t in range(steps):
        state = dA[:, t] * state + dBx[:, t]
        h[:, t] = state
    y = np.einsum("btEn,btn->btE", h, C.data)

    def _backward(g):
        gh = g[..., None] * C.data[:, :, None, :]
        carry = np.zeros((batch, inner, n_state))
        for t in range(steps - 1, -1, -1):
            carry = gh[:, t] + carry
            gh[:, t] = carry
            carry = carry * dA[:, t]
        h_prev = np.concatenate([np.zeros((batch, 1, inner, n_state)), h[:, :-1]], axis=1)
        g_dA = gh * h_prev * dA
        gC = np.einsum("btE,btEn->btn", g, h)
        g_delta = (g_dA * A.data).sum(axis=-1) + (gh * B.data[:, :, None, :]).sum(axis=-1) * x.data
        gA = np.einsum("btEn,btE->En", g_dA, delta.data)
        gx = (gh * B.data[:, :, None, :]).sum(axis=-1) * delta.data
        gB = np.einsum("btEn,btE->btn", gh, delta.data * x.data)
        return gx, g_delta, gA, gB, gC

    return nn.custom_op(y, (x, delta, A, B, C), _backward, "ssm_scan")


class MambaBlock(Module):
    """
    One scan direction: LN -> in_proj -> (x, z); x -> causal depthwise conv -> silu
    -> (dt, B, C) projections -> selective scan + D skip; gated by silu(z) -> out_proj.
    """

    def __init__(self, cfg: FusionConfig, rng: SeededRng):
        inner = cfg.expand * cfg.d
        self.inner, self.n_state, self.dt_rank = inner, cfg.state_size, cfg.dt_rank
        self.norm = LayerNorm(cfg.d)
        self.in_proj = Linear(cfg.d, 2 * inner, rng, bias=False)
        self.conv = Conv1d(inner, inner, cfg.conv_kernel, rng, padding=cfg.conv_kernel - 1, groups=inner)
        self.x_proj = Linear(inner, cfg.dt_rank + 2 * cfg.state_size, rng, bias=False)
        self.dt_proj = Linear(cfg.dt_rank, inner, rng)
        # step sizes start log-uniform in [1e-3, 1e-1]; bias holds softplus^-1 of them
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=inner))
        self.dt_proj.bias.data[...] = nn.to_float32_storage(dt + np.log(-np.expm1(-dt)))
        self.A_log = Parameter(nn.to_float32_storage(
            np.log(np.tile(np.arange(1, cfg.state_size + 1, dtype=np.float64), (inner, 1)))))
        self.D = Parameter(np.ones(inner))
        self.out_proj = Linear(inner, cfg.d, rng, bias=False)

    def forward(self, x) -> Tensor:
        batch, steps, _ = x.shape
        xz = self.in_proj(self.norm(x))
        xi, z = xz[..., :self.inner], xz[..., self.inner:]
        conv = self.conv(nn.transpose(xi, (0, 2, 1)))[:, :, :steps]
        xi = nn.activation(nn.transpose(conv, (0, 2, 1)), "silu")
        proj = self.x_proj(xi)
        dt = proj[..., :self.dt_rank]
        B = proj[..., self.dt_rank:self.dt_rank + self.n_state]
        C = proj[..., self.dt_rank + self.n_state:]
        delta = nn.softplus(self.dt_proj(dt))
        A = -nn.exp(self.A_log)
        y = ssm_scan(xi, delta, A, B, C) + xi * self.D
        return self.out_proj(y * nn.activation(z, "silu"))


class BidirectionalMamba(Module):
    """out = x + Merge([M_f(x); flip(M_b(flip(x)))])."""

    def __init__(self, cfg: FusionConfig, rng: SeededRng):
        self.forward_block = MambaBlock(cfg, rng.child(1))
        self.backward_block = MambaBlock(cfg, rng.child(2))
        self.merge = Linear(2 * cfg.d, cfg.d, rng.child(3))

    def directions(self, x) -> Tuple[Tensor, Tensor]:
        forward_out = self.forward_block(x)
        backward_out = nn.flip(self.backward_block(nn.flip(x, axis=1)), axis=1)
        return forward_out, backward_out

    def forward(self, x) -> Tensor:
        x = nn.as_tensor(x)
        single = x.ndim == 2
        if single:
            x = nn.reshape(x, (1,) + x.shape)
        out = x + self.merge(nn.concat(list(self.directions(x)), axis=-1))
        return nn.reshape(out, out.shape[1:]) if single else out


class MambaFusion(Module):
    """Cross-attention fusion followed by bidirectional selective-SSM temporal modelling."""

    def __init__(self, cfg: FusionConfig, seed: int = 0):
        self.cfg = cfg
        self.cross = CrossAttentionFusion(cfg, seed)
        self.mamba = BidirectionalMamba(cfg, SeededRng(seed, 404))

    def init_from_cross(self, state: Dict[str, np.ndarray]):
        """Start from a trained cross-attention head (its keys, without the 'cross.' prefix)."""
        self.cross.load_state_dict(state)

    def fused_features(self, f_sceeg, f_ppg) -> Tensor:
        return self.mamba(self.cross.fused_features(f_sceeg, f_ppg))

    def forward(self, f_sceeg, f_ppg) -> Tensor:
        return nn.softmax(self.cross.classifier(self.fused_features(f_sceeg, f_ppg)), axis=-1)


def cross_attention_fuse(f_sceeg, f_ppg, head: CrossAttentionFusion) -> Tensor:
    return head(f_sceeg, f_ppg)


def mamba_fuse(f_sceeg, f_ppg, head: MambaFusion) -> Tensor:
    return head(f_sceeg, f_ppg)


def bidirectional_mamba(features, block: BidirectionalMamba) -> Tensor:
    return block(features)


def build_fusion_head(strategy: str, cfg: FusionConfig, seed: int = 0) -> Module:
    if strategy == "xattn":
        return CrossAttentionFusion(cfg, seed)
    if strategy == "mamba":
        return MambaFusion(cfg, seed)
    raise ConfigError(f"Strategy '{strategy}' has no trainable head (expected xattn or mamba)")


# ============================================
# END-TO-END WRAPPER
# ============================================

class FusionModel:
    """Frozen encoders plus a fusion head (or a score-fusion alpha) evaluated together."""

    def __init__(self, sceeg_model, ppg_model, strategy: str, head: Optional[Module] = None,
                 alpha: Optional[float] = None):
        if strategy not in STRATEGIES:
            raise ConfigError(f"Unknown fusion strategy '{strategy}'")
        if strategy == "score" and alpha is None:
            raise ModelError("Score fusion needs an alpha")
        if strategy != "score" and head is None:
            raise ModelError(f"{strategy} fusion needs a trained head")
        self.sceeg_model, self.ppg_model = sceeg_model.eval(), ppg_model.eval()
        self.strategy, self.head, self.alpha = strategy, head, alpha
        if head is not None:
            head.eval()

    def encode(self, sceeg_window, ppg_window) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        f_sceeg, p_sceeg = self.sceeg_model(sceeg_window)
        f_ppg, p_ppg = self.ppg_model(ppg_window)
        return f_sceeg, p_sceeg, f_ppg, p_ppg

    def predict_proba(self, sceeg_window, ppg_window) -> np.ndarray:
        with nn.no_grad():
            f_sceeg, p_sceeg, f_ppg, p_ppg = self.encode(sceeg_window, ppg_window)
            if self.strategy == "score":
                shape = p_sceeg.shape
                fused = score_fusion(p_ppg.data.reshape(-1, 4), p_sceeg.data.reshape(-1, 4), self.alpha)
                return fused.reshape(shape)
            return self.head(f_sceeg, f_ppg).data
