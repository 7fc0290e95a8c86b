"""Spatial and channel blocks of the deep feature extractor.

All blocks take a token sequence ``x`` of shape (B, H*W, C) in raster order
together with its spatial extents ``hw = (H, W)`` and return the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import Ablation, ModelConfig, SsmConfig
from .nn import Conv2d, LayerNorm, Linear, Module, to_map, to_seq
from .ssm import DDBM, MambaBlock
from .tensor import ConfigError, Parameter, Tensor, matmul, slice_, split, stack


@dataclass(frozen=True)
class WindowSpec:
    win_h: int
    win_w: int
    heads: int


# --------------------------------------------------------------- windowing


def window_padding(hw: tuple[int, int], spec: WindowSpec) -> tuple[int, int]:
    h, w = hw
    return (-h) % spec.win_h, (-w) % spec.win_w


def window_partition(x: Tensor, hw: tuple[int, int], spec: WindowSpec) -> tuple[Tensor, tuple[int, int]]:
    """(B, H*W, C) -> (B * nWindows, win_h * win_w, C).

    Extents that are not window multiples are reflect-padded at the bottom and
    right first; the padded extents are returned for :func:`window_merge`.
    """
    b, n, c = x.shape
    h, w = hw
    if n != h * w:
        raise ConfigError(f"window_partition: sequence length {n} != {h}*{w}")
    ph, pw = window_padding(hw, spec)
    grid = x.reshape(b, h, w, c)
    if ph or pw:
        grid = F.pad2d(grid, (0, ph, 0, pw), mode="reflect", axes=(1, 2))
    hp, wp = h + ph, w + pw
    nh, nw = hp // spec.win_h, wp // spec.win_w
    win = grid.reshape(b, nh, spec.win_h, nw, spec.win_w, c).transpose(0, 1, 3, 2, 4, 5)
    return win.reshape(b * nh * nw, spec.win_h * spec.win_w, c), (hp, wp)


def window_merge(windows: Tensor, padded_hw: tuple[int, int], hw: tuple[int, int], spec: WindowSpec) -> Tensor:
    """Inverse of :func:`window_partition`, cropping any padding away."""
    hp, wp = padded_hw
    h, w = hw
    nh, nw = hp // spec.win_h, wp // spec.win_w
    c = windows.shape[-1]
    b = windows.shape[0] // (nh * nw)
    grid = windows.reshape(b, nh, nw, spec.win_h, spec.win_w, c).transpose(0, 1, 3, 2, 4, 5)
    grid = grid.reshape(b, hp, wp, c)
    if (hp, wp) != (h, w):
        grid = slice_(grid, (slice(None), slice(0, h), slice(0, w)))
    return grid.reshape(b, h * w, c)


def _heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return t.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) over the key axis; q, k are (..., N, d)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return F.softmax(matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * scale)


def sw_sa(q: Tensor, k: Tensor, v: Tensor, hw: tuple[int, int], spec: WindowSpec) -> Tensor:
    """Multi-head self-attention inside non-overlapping windows; no positional terms."""
    c = q.shape[-1]
    if c % spec.heads:
        raise ConfigError(f"sw_sa: {c} channels not divisible by {spec.heads} heads")
    qw, padded = window_partition(q, hw, spec)
    kw, _ = window_partition(k, hw, spec)
    vw, _ = window_partition(v, hw, spec)
    qh, kh, vh = (_heads(t, spec.heads) for t in (qw, kw, vw))
    out = matmul(attention_weights(qh, kh), vh)  # (Bw, heads, N, d)
    bw, _, n, d = out.shape
    out = out.transpose(0, 2, 1, 3).reshape(bw, n, c)
    return window_merge(out, padded, hw, spec)


# ------------------------------------------------------------------ blocks


class SGFN(Module):
    """Spatial-gate feed-forward: expand, GELU, gate one half by a 3x3 depthwise conv, contract."""

    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        super().__init__()
        hidden = dim * expansion
        if hidden % 2:
            raise ConfigError(f"SGFN: expanded width {hidden} is odd and cannot be split into value/gate halves")
        self.fc1 = Linear(dim, hidden, rng)
        self.gate_conv = Conv2d(hidden // 2, hidden // 2, 3, rng, depthwise=True)
        self.fc2 = Linear(hidden // 2, dim, rng)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        value, gate = split(F.gelu(self.fc1(x)), 2, axis=-1)
        gate = to_seq(self.gate_conv(to_map(gate, hw)))
        return self.fc2(value * gate)


class STB(Module):
    """Windowed self-attention with a depthwise-conv V path, then LN -> SGFN; both residual."""

    def __init__(self, dim: int, window: WindowSpec, sgfn_expansion: int, rng: np.random.Generator):
        super().__init__()
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.v_conv = Conv2d(dim, dim, 3, rng, depthwise=True)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.sgfn = SGFN(dim, sgfn_expansion, rng)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        q, k, v = split(self.qkv(self.norm1(x)), 3, axis=-1)
        mixed = sw_sa(q, k, v, hw, self.window) + to_seq(self.v_conv(to_map(v, hw)))
        x = self.proj(mixed) + x
        return self.sgfn(self.norm2(x), hw) + x


class ChannelAttention(Module):
    """Per-head attention across channels (tokens transposed); stand-in for DDBM in ablations."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"ChannelAttention: {dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.temperature = Parameter(np.ones(heads))
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        q, k, v = (_heads(t, self.heads).transpose(0, 1, 3, 2) for t in split(self.qkv(x), 3, axis=-1))
        q, k = F.l2_normalize(q), F.l2_normalize(k)  # (B, h, d, N)
        logits = matmul(q, k.transpose(0, 1, 3, 2)) * self.temperature.reshape(1, self.heads, 1, 1)
        out = matmul(F.softmax(logits), v)  # (B, h, d, N)
        return self.proj(out.transpose(0, 3, 1, 2).reshape(b, n, c))


class CMB(Module):
    """LN -> (DDBM + depthwise conv of a projection) -> LP, residual; then LN -> SGFN, residual."""

    def __init__(
        self,
        dim: int,
        ssm: SsmConfig,
        sgfn_expansion: int,
        rng: np.random.Generator,
        channel_attention_heads: int | None = None,
    ):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        if channel_attention_heads:
            self.mixer = ChannelAttention(dim, channel_attention_heads, rng)
        else:
            self.mixer = DDBM(dim, ssm.state, ssm.conv_width, ssm.expansion, rng)
        self.conv_in = Linear(dim, dim, rng)
        self.conv = Conv2d(dim, dim, 3, rng, depthwise=True)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.sgfn = SGFN(dim, sgfn_expansion, rng)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        xn = self.norm1(x)
        local = to_seq(self.conv(to_map(self.conv_in(xn), hw)))
        x = self.proj(self.mixer(xn) + local) + x
        return self.sgfn(self.norm2(x), hw) + x


class MCRM(Module):
    """Gate the last feature map per channel from a Mamba scan over pooled layer features.

    ``recursive=False`` drops the scan and gates from the pooled last layer alone.
    """

    def __init__(self, dim: int, ssm: SsmConfig, rng: np.random.Generator, recursive: bool = True):
        super().__init__()
        self.recursive = recursive
        self.norm = LayerNorm(dim)
        if recursive:
            self.mamba = MambaBlock(dim, ssm.state, ssm.conv_width, ssm.expansion, rng)
        self.mlp_fc1 = Linear(dim, dim, rng)
        self.mlp_fc2 = Linear(dim, dim, rng)

    def layer_sequence(self, f_layers: list[Tensor]) -> Tensor:
        """Pooled taps stacked along a depth axis: (B, L+1, C)."""
        b, c = f_layers[0].shape[:2]
        return stack([F.adaptive_avg_pool_to_1(f).reshape(b, c) for f in f_layers], axis=1)

    def gate_weights(self, f_layers: list[Tensor]) -> Tensor:
        if len(f_layers) < 2:
            raise ValueError(f"mcrm: needs the group input and at least one block output, got {len(f_layers)} maps")
        if self.recursive:
            seq = self.mamba(self.norm(self.layer_sequence(f_layers)))
            last = seq.shape[1] - 1
            x_last = slice_(seq, (slice(None), last))
        else:
            x_last = self.norm(self.layer_sequence(f_layers[-1:])).reshape(f_layers[-1].shape[0], -1)
        return F.gate_sigmoid(self.mlp_fc2(F.gelu(self.mlp_fc1(x_last))))

    def forward(self, f_layers: list[Tensor]) -> Tensor:
        w = self.gate_weights(f_layers)
        b, c = w.shape
        return f_layers[-1] * w.reshape(b, c, 1, 1)


class SAMB(Module):
    """An STB followed by a CMB (or a second STB when CMB is ablated away)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        window = WindowSpec(cfg.window[0], cfg.window[1], cfg.heads)
        self.stb = STB(cfg.channels, window, cfg.sgfn_expansion, rng)
        if cfg.ablation.use_cmb:
            heads = cfg.heads if cfg.ablation.ddbm_as_channel_attention else None
            self.cmb = CMB(cfg.channels, cfg.cmb_ssm, cfg.sgfn_expansion, rng, channel_attention_heads=heads)
            second = self.cmb
        else:
            self.stb2 = STB(cfg.channels, window, cfg.sgfn_expansion, rng)
            second = self.stb2
        # alias only; registering it would list the same parameters twice
        object.__setattr__(self, "second", second)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        return self.second(self.stb(x, hw), hw)


class SAMG(Module):
    """M SAMBs, MCRM gating over their outputs, a trailing 3x3 conv and a group residual."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.sambs = [self.add_module(f"samb{i}", SAMB(cfg, rng)) for i in range(cfg.sambs_per_samg)]
        ab: Ablation = cfg.ablation
        self.mcrm = MCRM(cfg.channels, cfg.mcrm_ssm, rng, recursive=ab.mcrm_recursive) if ab.use_mcrm else None
        self.conv = Conv2d(cfg.channels, cfg.channels, 3, rng)

    def taps(self, x: Tensor, hw: tuple[int, int]) -> list[Tensor]:
        out = [x]
        for samb in self.sambs:
            out.append(samb(out[-1], hw))
        return out

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        taps = self.taps(x, hw)
        if self.mcrm is not None:
            feat = self.mcrm([to_map(t, hw) for t in taps])
        else:
            feat = to_map(taps[-1], hw)
        return to_seq(self.conv(feat)) + x
