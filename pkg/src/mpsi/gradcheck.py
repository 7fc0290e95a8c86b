"""Central finite-difference validation of analytic gradients.

Each unit is a callable mapping tensors to a tensor.  It is reduced to a
scalar with a fixed random weighting ``sum(out * w)`` so every output element
contributes.  Small units are checked element by element; blocks and the
model are checked along random directions in parameter space, one direction
per parameter tensor plus one for the input.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .nn import Module
from .tensor import Tensor, matmul, no_grad

OPS_TOL = 1e-4
BLOCKS_TOL = 1e-3
STEP = 1e-5


@dataclass
class CheckResult:
    unit: str
    rel_error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tol)


def _rel(a: np.ndarray, n: np.ndarray) -> float:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def _scalarize(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator):
    with no_grad():
        probe = fn(*inputs)
    weights = rng.uniform(-1.0, 1.0, size=probe.shape)

    def loss(*args) -> Tensor:
        return (fn(*args) * weights).sum()

    return loss


def elementwise_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = STEP,
) -> float:
    """Worst (over inputs) norm-relative error of the full gradient vs central differences."""
    loss = _scalarize(fn, inputs, rng)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss(*inputs).backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss(*inputs).item()
                flat[i] = orig - step
                down = loss(*inputs).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
        worst = max(worst, _rel(analytic, numeric))
    return worst


def directional_error(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = STEP,
) -> float:
    """Worst relative error of <grad, v> vs the central difference along random unit directions v.

    ``fn`` takes no arguments and reads the (mutated in place) ``params``.
    """
    with no_grad():
        probe = fn()
    weights = rng.uniform(-1.0, 1.0, size=probe.shape)

    def loss() -> float:
        return float((fn().data * weights).sum())

    for p in params:
        p.grad = None
    (fn() * weights).sum().backward()
    worst = 0.0
    for p in params:
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        analytic = float((p.grad * v).sum()) if p.grad is not None else 0.0
        orig = p.data.copy()
        with no_grad():
            p.data = orig + step * v
            up = loss()
            p.data = orig - step * v
            down = loss()
        p.data = orig
        numeric = (up - down) / (2.0 * step)
        worst = max(worst, _rel(analytic, numeric))
    return worst


def randomize_parameters(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Move every parameter to a generic point in [-scale, scale].

    At the default init many nested paths carry derivatives below 1e-15,
    which central differences cannot resolve; correctness of the backward
    rules does not depend on where they are evaluated.
    """
    for p in module.parameters():
        p.data = rng.uniform(-scale, scale, size=p.shape)


def module_error(module: Module, call: Callable[[Tensor], Tensor], x: Tensor, rng: np.random.Generator) -> float:
    randomize_parameters(module, rng)
    x = Tensor(x.data, requires_grad=True)
    params = [x, *module.parameters()]
    err = directional_error(lambda: call(x), params, rng)
    module.zero_grad()
    return err


# ------------------------------------------------------------------- suites


def _u(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def op_units(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Primitive ops, each with its own small random inputs in [-1, 1]."""
    from .ssm import scan_core
    from . import tensor as T

    def unit(fn, *shapes, **kw):
        return lambda: elementwise_error(fn, [_u(rng, *s) for s in shapes], rng, **kw)

    def positive(fn, *shapes):
        return lambda: elementwise_error(fn, [_u(rng, *s, lo=0.5, hi=1.5) for s in shapes], rng)

    def scan():
        u, dl = _u(rng, 2, 5, 3), _u(rng, 2, 5, 3, lo=0.05, hi=0.6)
        a = _u(rng, 3, 4, lo=-1.5, hi=-0.2)
        b, c, d = _u(rng, 2, 5, 4), _u(rng, 2, 5, 4), _u(rng, 3)
        return elementwise_error(scan_core, [u, dl, a, b, c, d], rng)

    def abs_unit():
        x = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        return elementwise_error(T.tabs, [Tensor(x)], rng)

    def l1_unit():
        p = Tensor(rng.uniform(-1, 1, (2, 6)))
        t = Tensor(p.data + rng.uniform(0.1, 0.5, (2, 6)) * rng.choice([-1.0, 1.0], (2, 6)))
        return elementwise_error(F.l1_loss, [p, t], rng)

    idx = np.array([0, 2, 2, 1, 0])
    return {
        "add": unit(T.add, (3, 4), (4,)),
        "sub": unit(T.sub, (3, 1), (3, 4)),
        "mul": unit(T.mul, (2, 3), (2, 3)),
        "div": lambda: elementwise_error(T.div, [_u(rng, 2, 3), _u(rng, 2, 3, lo=0.5, hi=1.5)], rng),
        "pow": positive(lambda x: T.power(x, 1.7), (2, 3)),
        "exp": unit(T.exp, (2, 3)),
        "log": positive(T.log, (2, 3)),
        "sqrt": positive(T.sqrt, (2, 3)),
        "abs": abs_unit,
        "sum": unit(lambda x: x.sum(axis=1), (2, 3, 4)),
        "mean": unit(lambda x: x.mean(axis=(0, 2), keepdims=True), (2, 3, 4)),
        "matmul": unit(matmul, (2, 3, 4), (4, 5)),
        "reshape": unit(lambda x: x.reshape(6, 2), (3, 4)),
        "transpose": unit(lambda x: x.transpose(2, 0, 1), (2, 3, 4)),
        "slice": unit(lambda x: T.slice_(x, (slice(None), slice(1, 3))), (3, 4)),
        "gather": unit(lambda x: T.gather_axis(x, idx, axis=1), (2, 3)),
        "flip": unit(lambda x: T.flip(x, axis=1), (2, 4, 3)),
        "concat": unit(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2)),
        "stack": unit(lambda a, b: T.stack([a, b], axis=0), (2, 3), (2, 3)),
        "pad_zeros": unit(lambda x: T.pad_zeros(x, ((1, 0), (2, 1))), (2, 3)),
        "linear_projection": unit(F.linear_projection, (2, 3, 4), (5, 4), (5,)),
        "layer_norm": unit(F.layer_norm, (2, 3, 6), (6,), (6,)),
        "sigmoid": unit(F.sigmoid, (3, 4)),
        "gate_sigmoid": unit(F.gate_sigmoid, (3, 4)),
        "silu": unit(F.silu, (3, 4)),
        "gelu": unit(F.gelu, (3, 4)),
        "softplus": unit(F.softplus, (3, 4)),
        "softmax": unit(F.softmax, (3, 5)),
        "l2_normalize": unit(F.l2_normalize, (3, 5)),
        "conv2d": unit(lambda x, k, b: F.conv2d(x, k, b, padding=1), (2, 3, 5, 4), (2, 3, 3, 3), (2,)),
        "conv2d_depthwise": unit(
            lambda x, k, b: F.conv2d(x, k, b, padding=1, depthwise=True), (2, 3, 4, 5), (3, 1, 3, 3), (3,)
        ),
        "causal_conv1d": unit(F.causal_conv1d, (2, 6, 3), (3, 4), (3,)),
        "pixel_shuffle": unit(lambda x: F.pixel_shuffle(x, 2), (1, 8, 2, 3)),
        "pixel_unshuffle": unit(lambda x: F.pixel_unshuffle(x, 2), (1, 2, 4, 6)),
        "adaptive_avg_pool": unit(F.adaptive_avg_pool_to_1, (2, 3, 4, 5)),
        "pad2d_reflect": unit(lambda x: F.pad2d(x, (1, 2, 0, 3)), (1, 2, 4, 4)),
        "l1_loss": l1_unit,
        "mse_loss": unit(F.mse_loss, (2, 5), (2, 5)),
        "selective_scan_core": scan,
    }


def block_units(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Composite blocks on small shapes, checked along random parameter directions."""
    from .blocks import CMB, MCRM, SGFN, STB, ChannelAttention, WindowSpec
    from .model import MPSI, ModelConfig, SsmConfig
    from .ssm import DDBM, MambaBlock

    hw = (4, 4)
    c = 8

    def seq(b=2, n=16, ch=c):
        return Tensor(rng.uniform(-1, 1, (b, n, ch)))

    def stb():
        m = STB(c, WindowSpec(2, 4, 2), 2, rng)
        return module_error(m, lambda x: m(x, hw), seq(), rng)

    def sgfn():
        m = SGFN(c, 2, rng)
        return module_error(m, lambda x: m(x, hw), seq(), rng)

    def cmb():
        m = CMB(c, SsmConfig(4, 3, 2), 2, rng)
        return module_error(m, lambda x: m(x, hw), seq(), rng)

    def cmb_ca():
        m = CMB(c, SsmConfig(4, 3, 2), 2, rng, channel_attention_heads=2)
        return module_error(m, lambda x: m(x, hw), seq(), rng)

    def channel_attention():
        m = ChannelAttention(c, 2, rng)
        return module_error(m, m, seq(), rng)

    def mamba():
        m = MambaBlock(c, 4, 3, 2, rng)
        return module_error(m, m, seq(n=7), rng)

    def ddbm():
        m = DDBM(c, 4, 3, 2, rng)
        return module_error(m, m, seq(n=7), rng)

    def mcrm():
        m = MCRM(c, SsmConfig(6, 4, 2), rng)
        taps = [Tensor(rng.uniform(-1, 1, (2, c, 3, 3))) for _ in range(3)]
        x = Tensor(taps[-1].data, requires_grad=True)
        randomize_parameters(m, rng)
        params = [x, *m.parameters()]
        err = directional_error(lambda: m([*taps[:-1], x]), params, rng)
        m.zero_grad()
        return err

    def model():
        cfg = ModelConfig(
            channels=8, num_samgs=1, sambs_per_samg=1, heads=2, window=(4, 4), scale=2,
            cmb_ssm=SsmConfig(4, 3, 2), mcrm_ssm=SsmConfig(4, 4, 2),
        )
        m = MPSI(cfg, seed=int(rng.integers(1 << 30)))
        x = Tensor(rng.uniform(0, 1, (1, 3, 4, 6)))
        return module_error(m, m, x, rng)

    return {
        "STB": stb,
        "SGFN": sgfn,
        "CMB": cmb,
        "CMB[DDBM->CA]": cmb_ca,
        "ChannelAttention": channel_attention,
        "MambaBlock": mamba,
        "DDBM": ddbm,
        "MCRM": mcrm,
        "MPSI(tiny)": model,
    }


def run_suite(scope: str, seed: int = 0, log: Callable[[str], None] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    if scope == "ops":
        units, tol = op_units(rng), OPS_TOL
    elif scope == "blocks":
        units, tol = block_units(rng), BLOCKS_TOL
        units.pop("MPSI(tiny)")
    elif scope == "model":
        units, tol = {"MPSI(tiny)": block_units(rng)["MPSI(tiny)"]}, BLOCKS_TOL
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    for name, fn in units.items():
        t0 = time.perf_counter()
        err = fn()
        res = CheckResult(name, err, tol, time.perf_counter() - t0)
        results.append(res)
        if log:
            log(f"{name}\t{err:.3e}\t{'ok' if res.ok else 'FAIL'}")
    return results
