"""Selective state-space scan, the gated Mamba block and the bidirectional DDBM.

Discretization per channel ``d`` and state ``n`` at token ``t``::

    decay[t, d, n] = exp(delta[t, d] * A[d, n]),    A = -exp(a_log)
    h[t] = decay[t] * h[t-1] + delta[t, d] * B[t, n] * x[t, d]
    y[t, d] = sum_n C[t, n] * h[t, d, n] + d_skip[d] * x[t, d]

with ``h[0] = 0`` (zero-order hold on A, Euler step on B).  Step sizes come
from a softplus, so every decay factor lies strictly inside (0, 1).
"""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .nn import Linear, Module, trunc_normal
from .tensor import DTYPE, Parameter, ShapeError, Tensor, as_tensor, exp, flip, make_result, neg


def _scan_forward(u, delta, a, bm, cm, d_skip):
    """Raw-array recurrence; returns (y, states, decay) with states/decay laid out (L, B, E, N)."""
    bsz, length, e = u.shape
    n = a.shape[1]
    delta_t = delta.transpose(1, 0, 2)
    decay = np.exp(delta_t[..., None] * a)
    drive = (delta_t * u.transpose(1, 0, 2))[..., None] * bm.transpose(1, 0, 2)[:, :, None, :]
    states = drive  # filled in place: states[t] = decay[t] * states[t-1] + drive[t]
    for t in range(1, length):
        buf = states[t - 1] * decay[t]
        states[t] += buf
    y = np.einsum("lben,lbn->ble", states, cm.transpose(1, 0, 2), optimize=True) + u * d_skip
    return y, states, decay


def scan_core(u, delta, a, bm, cm, d_skip) -> Tensor:
    """Fused selective scan over already-projected inputs.

    Shapes: ``u``/``delta`` (B, L, E); ``a`` (E, N) continuous (negative)
    state diagonal; ``bm``/``cm`` (B, L, N); ``d_skip`` (E,).
    """
    u, delta, a, bm, cm, d_skip = (as_tensor(t) for t in (u, delta, a, bm, cm, d_skip))
    if u.ndim != 3 or u.shape[1] == 0:
        raise ShapeError(f"selective_scan: expected a non-empty (B, L, E) sequence, got {u.shape}")
    bsz, length, e = u.shape
    n = a.shape[-1]
    if delta.shape != u.shape or a.shape != (e, n) or bm.shape != (bsz, length, n) or cm.shape != bm.shape:
        raise ShapeError(
            f"selective_scan: inconsistent shapes u={u.shape} delta={delta.shape} "
            f"A={a.shape} B={bm.shape} C={cm.shape}"
        )
    y, states, decay = _scan_forward(u.data, delta.data, a.data, bm.data, cm.data, d_skip.data)

    def backward(g):
        ud, dd, bd, cd = u.data, delta.data, bm.data, cm.data
        g_t = g.transpose(1, 0, 2)
        c_t = cd.transpose(1, 0, 2)
        g_d = (g * ud).sum(axis=(0, 1))
        g_c = np.einsum("lbe,lben->bln", g_t, states, optimize=True)
        # adjoint of the recurrence: lam[t] = dL/dh[t], run in reverse
        from_y = g_t[..., None] * c_t[:, :, None, :]
        lam = from_y  # filled in place, reverse time
        for t in range(length - 2, -1, -1):
            buf = lam[t + 1] * decay[t + 1]
            lam[t] += buf
        g_z = np.empty_like(states)  # z = delta * A; dL/dz[t] = lam[t] * decay[t] * h[t-1]
        g_z[0] = 0.0
        np.multiply(lam[1:], decay[1:], out=g_z[1:])
        g_z[1:] *= states[:-1]
        delta_t = dd.transpose(1, 0, 2)
        u_t = ud.transpose(1, 0, 2)
        lam_b = np.einsum("lben,lbn->lbe", lam, bd.transpose(1, 0, 2), optimize=True)
        g_delta = (g_z * a.data).sum(axis=-1) + lam_b * u_t
        g_a = np.einsum("lben,lbe->en", g_z, delta_t, optimize=True)
        g_b = np.einsum("lben,lbe->lbn", lam, delta_t * u_t, optimize=True)
        g_u = g * d_skip.data + (delta_t * lam_b).transpose(1, 0, 2)
        return (
            np.ascontiguousarray(g_u),
            np.ascontiguousarray(g_delta.transpose(1, 0, 2)),
            g_a,
            np.ascontiguousarray(g_b.transpose(1, 0, 2)),
            g_c,
            g_d,
        )

    return make_result(y, (u, delta, a, bm, cm, d_skip), backward, "selective_scan")


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """Input-dependent (B, C, delta) projections and the state diagonal for ``width`` channels."""

    def __init__(
        self,
        width: int,
        state_dim: int,
        rng: np.random.Generator,
        dt_rank: int | None = None,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        super().__init__()
        self.width = width
        self.state_dim = state_dim
        self.dt_rank = dt_rank or max(1, math.ceil(width / 16))
        # S4D-real initialization: A[d, n] = -(n + 1)
        self.a_log = Parameter(np.log(np.tile(np.arange(1, state_dim + 1, dtype=DTYPE), (width, 1))))
        self.b_proj = Linear(width, state_dim, rng)
        self.c_proj = Linear(width, state_dim, rng)
        self.delta_down = Linear(width, self.dt_rank, rng, bias=False)
        self.delta_up = Linear(self.dt_rank, width, rng)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=width))
        self.delta_up.bias.data = _inv_softplus(dt)
        self.d_skip = Parameter(np.ones(width))

    def step_sizes(self, x: Tensor) -> Tensor:
        return F.softplus(self.delta_up(self.delta_down(x)))

    def state_matrix(self) -> Tensor:
        return neg(exp(self.a_log))

    def decay_factors(self, x: Tensor) -> np.ndarray:
        """Discretized per-token decay exp(delta * A), shape (B, L, E, N)."""
        delta = self.step_sizes(x).data
        return np.exp(delta[..., None] * self.state_matrix().data)


def selective_scan(x: Tensor, p: SsmParams) -> Tensor:
    """Run the selective SSM over a (B, L, E) sequence with h_0 = 0."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ShapeError(f"selective_scan: expected a non-empty (B, L, E) sequence, got {x.shape}")
    if x.shape[-1] != p.width:
        raise ShapeError(f"selective_scan: {x.shape[-1]} channels, parameters expect {p.width}")
    return scan_core(x, p.step_sizes(x), p.state_matrix(), p.b_proj(x), p.c_proj(x), p.d_skip)


# ------------------------------------------------------------ LTI oracle path


def lti_kernel(a_bar, b_bar, c, k: int) -> np.ndarray:
    """Convolution taps ``[C B, C A B, ..., C A^k B]`` (k + 1 values) of a time-invariant SSM.

    ``a_bar`` is either a vector (diagonal state matrix) or a square matrix.
    """
    a_bar = np.asarray(a_bar, dtype=DTYPE)
    b_bar = np.asarray(b_bar, dtype=DTYPE).reshape(-1)
    c = np.asarray(c, dtype=DTYPE).reshape(-1)
    taps = np.empty(k + 1, dtype=DTYPE)
    v = b_bar.copy()
    for j in range(k + 1):
        taps[j] = c @ v
        v = a_bar * v if a_bar.ndim <= 1 else a_bar @ v
    return taps


def lti_kernel_apply(x, taps) -> np.ndarray:
    """Causal convolution ``y[t] = sum_j taps[j] * x[t - j]`` along axis 0 of ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    length = x.shape[0]
    taps = np.asarray(taps, dtype=DTYPE)
    y = np.zeros_like(x)
    for j in range(min(length, taps.shape[0])):
        y[j:] += taps[j] * x[: length - j]
    return y


# -------------------------------------------------------------- Mamba + DDBM


class MambaBlock(Module):
    """``out_proj( SiLU(gate_proj(x)) * SSM(SiLU(CausalConv(in_proj(x)))) )``."""

    def __init__(self, dim: int, state_dim: int, conv_width: int, expansion: int, rng: np.random.Generator):
        super().__init__()
        inner = expansion * dim
        self.dim = dim
        self.inner = inner
        self.in_proj = Linear(dim, inner, rng)
        self.gate_proj = Linear(dim, inner, rng)
        self.conv_weight = Parameter(trunc_normal(rng, (inner, conv_width)))
        self.conv_bias = Parameter(np.zeros(inner))
        self.ssm = SsmParams(inner, state_dim, rng, dt_rank=max(1, math.ceil(dim / 16)))
        self.out_proj = Linear(inner, dim, rng)

    def scan_path(self, x: Tensor) -> Tensor:
        h = F.silu(F.causal_conv1d(self.in_proj(x), self.conv_weight, self.conv_bias))
        return selective_scan(h, self.ssm)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"mamba_block: {x.shape[-1]} channels, block width is {self.dim}")
        gate = F.silu(self.gate_proj(x))
        return self.out_proj(self.scan_path(x) * gate)


class DDBM(Module):
    """Forward and reversed-sequence Mamba blocks, summed and fused by a projection."""

    def __init__(self, dim: int, state_dim: int, conv_width: int, expansion: int, rng: np.random.Generator):
        super().__init__()
        self.forward_block = MambaBlock(dim, state_dim, conv_width, expansion, rng)
        self.backward_block = MambaBlock(dim, state_dim, conv_width, expansion, rng)
        self.fuse = Linear(dim, dim, rng)

    def tie(self) -> None:
        """Copy forward-block values into the backward block (used by symmetry checks)."""
        self.backward_block.load_state_dict(self.forward_block.state_dict())

    def forward(self, x: Tensor) -> Tensor:
        y_f = self.forward_block(x)
        y_b = flip(self.backward_block(flip(x, axis=1)), axis=1)
        return self.fuse(y_f + y_b)
