"""
Composite layers built on the kernels in neural.py.

A Module owns Parameters as plain attributes (directly, in sub-Modules, or in
lists of either); parameter names are the dotted attribute paths, e.g.
"tce.0.attn.wq". Those names are what checkpoints store.
"""

from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

import neural as nn
from errors import CheckpointError, ShapeError
from neural import Parameter, SeededRng, Tensor


class Module:
    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own = OrderedDict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if strict and (missing or unexpected):
            raise CheckpointError(
                f"State does not match model: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, p in own.items():
            if name not in state:
                continue
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise CheckpointError(f"Shape of '{name}' is {values.shape}, model expects {p.shape}")
            p.data[...] = values

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


# ============================================
# BASIC LAYERS
# ============================================

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: SeededRng, bias: bool = True):
        self.weight = Parameter(nn.init_uniform(rng, (d_in, d_out), fan_in=d_in))
        self.bias = Parameter(nn.init_uniform(rng, (d_out,), fan_in=d_in)) if bias else None

    def forward(self, x) -> Tensor:
        return nn.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: SeededRng, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1, bias: bool = True):
        fan_in = (c_in // groups) * kernel
        self.weight = Parameter(nn.init_uniform(rng, (c_out, c_in // groups, kernel), fan_in=fan_in))
        self.bias = Parameter(nn.init_uniform(rng, (c_out,), fan_in=fan_in)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x) -> Tensor:
        return nn.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x) -> Tensor:
        return nn.layer_norm(x, self.gamma, self.beta, self.eps)


class ChannelNorm(LayerNorm):
    """Layer norm across channels of x[N, C, L], applied at every time step."""

    def forward(self, x) -> Tensor:
        moved = nn.transpose(x, (0, 2, 1))
        return nn.transpose(nn.layer_norm(moved, self.gamma, self.beta, self.eps), (0, 2, 1))


# ============================================
# ATTENTION BLOCKS
# ============================================

class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: SeededRng, dropout: float = 0.0):
        if d % heads:
            raise ShapeError(f"attention width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.dropout = dropout
        self._rng = rng.child(7)
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", Parameter(nn.init_uniform(rng, (d, d), fan_in=d)))
            setattr(self, f"b{name}", Parameter(nn.init_uniform(rng, (d,), fan_in=d)))

    def forward(self, query, key, value) -> Tensor:
        params = {name: getattr(self, name) for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        return nn.multi_head_attention(query, key, value, self.heads, params,
                                       self.dropout, self._rng, self.training)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: SeededRng, activation: str = "gelu"):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.activation = activation

    def forward(self, x) -> Tensor:
        return self.fc2(nn.activation(self.fc1(x), self.activation))


class TransformerLayer(Module):
    """Self-attention + FFN, each with a residual; post-norm unless norm_first."""

    def __init__(self, d: int, heads: int, ffn: int, rng: SeededRng,
                 activation: str = "gelu", norm_first: bool = False, dropout: float = 0.0):
        self.attn = MultiHeadAttention(d, heads, rng, dropout)
        self.ffn = FeedForward(d, ffn, rng, activation)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm_first = norm_first

    def forward(self, x) -> Tensor:
        if self.norm_first:
            h = self.norm1(x)
            x = x + self.attn(h, h, h)
            return x + self.ffn(self.norm2(x))
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ffn(x))


class BidirectionalCrossBlock(Module):
    """
    Two streams attend to each other: a' = CrossAttn(a, b, b) + a and
    b' = CrossAttn(b, a, a) + b, both computed from the block inputs, then
    an FFN with residual and layer norm on each stream.

    Used between the raw/augmented PPG streams and between the scEEG/PPG
    feature sequences in cross-attention fusion.
    """

    def __init__(self, d: int, heads: int, ffn: int, rng: SeededRng,
                 activation: str = "gelu", norm_first: bool = False, dropout: float = 0.0):
        self.attn_a = MultiHeadAttention(d, heads, rng, dropout)
        self.attn_b = MultiHeadAttention(d, heads, rng, dropout)
        self.ffn_a = FeedForward(d, ffn, rng, activation)
        self.ffn_b = FeedForward(d, ffn, rng, activation)
        self.norm_a1, self.norm_a2 = LayerNorm(d), LayerNorm(d)
        self.norm_b1, self.norm_b2 = LayerNorm(d), LayerNorm(d)
        self.norm_first = norm_first

    def forward(self, a, b) -> Tuple[Tensor, Tensor]:
        if a.shape != b.shape:
            raise ShapeError(f"cross-attention streams differ in shape: {a.shape} vs {b.shape}")
        if self.norm_first:
            na, nb = self.norm_a1(a), self.norm_b1(b)
            a1 = a + self.attn_a(na, nb, nb)
            b1 = b + self.attn_b(nb, na, na)
            return a1 + self.ffn_a(self.norm_a2(a1)), b1 + self.ffn_b(self.norm_b2(b1))
        a1 = self.norm_a1(a + self.attn_a(a, b, b))
        b1 = self.norm_b1(b + self.attn_b(b, a, a))
        return self.norm_a2(a1 + self.ffn_a(a1)), self.norm_b2(b1 + self.ffn_b(b1))
