"""L1/MSE objective, Adam, the step-halving schedule, resumable training and the ablation driver."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import functional as F
from .config import Ablation, ModelConfig, parse_kv_lines
from .data import PatchSampler, read_manifest
from .model import MPSI, save_model
from .tensor import ConfigError, Parameter, Tensor

REFERENCE_LR = 2e-4
REFERENCE_MILESTONES = (250_000, 400_000, 450_000, 475_000)
ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-8

LOSSES = {"l1": F.l1_loss, "mse": F.mse_loss}


class GradientError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


def lr_at(iteration: int, base_lr: float, milestones=()) -> float:
    """``base_lr * 2**-(milestones passed)``; a milestone counts as passed from its own iteration on."""
    passed = sum(1 for m in milestones if iteration >= m)
    return base_lr * 2.0**-passed


@dataclass
class TrainState:
    params: dict[str, Parameter]
    base_lr: float = REFERENCE_LR
    milestones: tuple[int, ...] = ()
    iteration: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros(p.shape))
            self.v.setdefault(name, np.zeros(p.shape))

    @property
    def lr(self) -> float:
        return lr_at(self.iteration, self.base_lr, self.milestones)

    def moments(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_moments(self, blob: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            for key, store in (("m", self.m), ("v", self.v)):
                value = blob.get(f"{key}.{name}")
                if value is None or value.shape != p.shape:
                    raise checkpoint.CheckpointError(f"optimizer state for {name!r} missing or misshapen")
                store[name] = value.copy()


def adam_step(state: TrainState, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> TrainState:
    """Bias-corrected Adam over every parameter's ``.grad``; advances ``state.iteration``."""
    for name, p in state.params.items():
        if p.grad is None:
            raise GradientError(f"adam_step: parameter {name!r} has no gradient")
    b1, b2 = betas
    lr = state.lr
    t = state.iteration + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in state.params.items():
        g = p.grad
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.iteration = t
    return state


# --------------------------------------------------------------- run spec

_TRAIN_DEFAULTS = {
    "manifest": "",
    "patch_size": "64",
    "batch_size": "8",
    "iterations": "1000",
    "milestones": "",
    "loss": "l1",
    "lr": repr(REFERENCE_LR),
    "checkpoint_every": "0",
    "log_every": "10",
    "augment": "true",
    "seed": "0",
}


@dataclass
class TrainRunSpec:
    manifest: str
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 8
    iterations: int = 1000
    milestones: tuple[int, ...] = ()
    loss: str = "l1"
    checkpoint_every: int = 0  # 0: only at the end
    seed: int = 0
    patch_size: int = 64
    lr: float = REFERENCE_LR
    augment: bool = True
    log_every: int = 10

    def validate(self) -> None:
        if not self.manifest:
            raise ConfigError("manifest: no training manifest given")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: expected one of {sorted(LOSSES)}, got {self.loss!r}")
        for key in ("batch_size", "iterations", "patch_size", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.iterations:
            raise ConfigError(f"milestones must be < iterations ({self.iterations}), got {ms}")
        self.model.validate()

    def to_flat(self) -> dict[str, str]:
        out = {
            "manifest": self.manifest,
            "patch_size": str(self.patch_size),
            "batch_size": str(self.batch_size),
            "iterations": str(self.iterations),
            "milestones": ",".join(str(m) for m in self.milestones),
            "loss": self.loss,
            "lr": repr(self.lr),
            "checkpoint_every": str(self.checkpoint_every),
            "log_every": str(self.log_every),
            "augment": "true" if self.augment else "false",
            "seed": str(self.seed),
        }
        out.update(self.model.to_flat())
        return out

    @classmethod
    def from_flat(cls, items: dict[str, str]) -> TrainRunSpec:
        train = dict(_TRAIN_DEFAULTS)
        model_items = {}
        model_keys = set(ModelConfig.flat_keys())
        for key, value in items.items():
            if key in train:
                train[key] = str(value).strip()
            elif key in model_keys:
                model_items[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        model = ModelConfig.from_flat(model_items)
        try:
            spec = cls(
                manifest=train["manifest"],
                model=model,
                batch_size=int(train["batch_size"]),
                iterations=int(train["iterations"]),
                milestones=tuple(int(m) for m in train["milestones"].split(",") if m.strip()),
                loss=train["loss"],
                checkpoint_every=int(train["checkpoint_every"]),
                seed=int(train["seed"]),
                patch_size=int(train["patch_size"]),
                lr=float(train["lr"]),
                augment=train["augment"].lower() in ("true", "1", "yes", "on"),
                log_every=int(train["log_every"]),
            )
        except ValueError as exc:
            raise ConfigError(f"bad training config value: {exc}") from exc
        return spec

    def replace(self, **changes) -> TrainRunSpec:
        return dataclasses.replace(self, **changes)


def spec_keys() -> list[str]:
    return list(_TRAIN_DEFAULTS) + ModelConfig.flat_keys()


def load_spec(path=None, overrides: dict[str, str] | None = None) -> TrainRunSpec:
    items = parse_kv_lines(Path(path).read_text(), str(path)) if path else {}
    items.update(overrides or {})
    return TrainRunSpec.from_flat(items)


# ------------------------------------------------------------------- loop

MODEL_FILE = "model.ckpt"
OPTIM_FILE = "optim.ckpt"
STATE_FILE = "train_state.txt"
LOG_FILE = "train.log"


@dataclass
class TrainResult:
    model: MPSI
    state: TrainState
    losses: list[float]
    log_lines: list[str]


def _write_state(out: Path, spec: TrainRunSpec, model: MPSI, state: TrainState, rng: np.random.Generator) -> None:
    save_model(out / MODEL_FILE, model)
    checkpoint.save(out / OPTIM_FILE, state.moments())
    lines = [f"{k}={v}" for k, v in spec.to_flat().items()]
    lines.append(f"iteration={state.iteration}")
    lines.append(f"rng_state={json.dumps(rng.bit_generator.state)}")
    tmp = out / (STATE_FILE + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(out / STATE_FILE)


def _restore(out: Path, model: MPSI, state: TrainState, rng: np.random.Generator) -> None:
    text = (out / STATE_FILE).read_text()
    iteration, rng_json = None, None
    for line in text.splitlines():
        if line.startswith("iteration="):
            iteration = int(line.split("=", 1)[1])
        elif line.startswith("rng_state="):
            rng_json = line.split("=", 1)[1]
    if iteration is None or rng_json is None:
        raise checkpoint.CheckpointError(f"{out / STATE_FILE}: missing iteration or rng_state")
    params = checkpoint.load(out / MODEL_FILE)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{out / MODEL_FILE}: {exc.args[0]}") from exc
    state.load_moments(checkpoint.load(out / OPTIM_FILE))
    state.iteration = iteration
    rng.bit_generator.state = json.loads(rng_json)


def train_loop(
    spec: TrainRunSpec,
    out_dir=None,
    resume: bool = False,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train per ``spec``; with ``out_dir`` writes checkpoints, a state sidecar and a log.

    ``resume`` continues from the state in ``out_dir`` up to ``spec.iterations``.
    """
    spec.validate()
    manifest = read_manifest(spec.manifest, spec.model.scale, spec.patch_size, spec.seed)
    sampler = PatchSampler(manifest, augment=spec.augment)
    model = MPSI(spec.model, seed=spec.seed)
    state = TrainState(dict(model.named_parameters()), spec.lr, tuple(spec.milestones))
    rng = np.random.default_rng([spec.seed, 1])
    loss_fn = LOSSES[spec.loss]
    out = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []

    def emit(line: str) -> None:
        log_lines.append(line)
        if log is not None:
            log(line)
        if out is not None:
            with open(out / LOG_FILE, "a") as fh:
                fh.write(line + "\n")

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / STATE_FILE).exists():
            _restore(out, model, state, rng)
        elif (out / LOG_FILE).exists():
            (out / LOG_FILE).unlink()
    flat = spec.to_flat()
    emit("# " + " ".join(f"{k}={flat[k]}" for k in _TRAIN_DEFAULTS))
    emit(f"# parameters={model.num_parameters()} start_iteration={state.iteration}")
    emit("iter\tlr\tloss\tseconds")

    losses: list[float] = []
    start = time.perf_counter()
    while state.iteration < spec.iterations:
        lr_batch, hr_batch, pairs = sampler.batch(rng, spec.batch_size)
        lr_now = state.lr
        model.zero_grad()
        loss = loss_fn(model(Tensor(lr_batch)), Tensor(hr_batch))
        value = loss.item()
        if not math.isfinite(value):
            where = "; ".join(p.provenance() for p in pairs)
            msg = f"non-finite loss {value} at iteration {state.iteration + 1}; batch: {where}"
            if out is not None:
                (out / "nonfinite_batch.txt").write_text(msg + "\n")
            raise NonFiniteLossError(msg)
        loss.backward()
        adam_step(state)
        losses.append(value)
        it = state.iteration
        if it % spec.log_every == 0 or it == spec.iterations:
            emit(f"{it}\t{lr_now:.6g}\t{value:.6f}\t{time.perf_counter() - start:.2f}")
        if out is not None and spec.checkpoint_every and it % spec.checkpoint_every == 0:
            _write_state(out, spec, model, state, rng)
    if out is not None:
        _write_state(out, spec, model, state, rng)
    state.rng_state = rng.bit_generator.state
    return TrainResult(model, state, losses, log_lines)


# --------------------------------------------------------------- ablation

TABLE2_ROWS = {
    "Base": Ablation(use_cmb=False, use_mcrm=False),
    "+CMB": Ablation(use_cmb=True, use_mcrm=False),
    "+MCRM": Ablation(use_cmb=False, use_mcrm=True),
    "+CMB+MCRM": Ablation(use_cmb=True, use_mcrm=True),
}
TABLE3_ROWS = {
    "DDBM→CA": Ablation(ddbm_as_channel_attention=True),
    "CA→DDBM": Ablation(),
    "MRP→None": Ablation(mcrm_recursive=False),
    "None→MRP": Ablation(),
}


@dataclass
class AblationRow:
    table: str
    name: str
    ablation: Ablation
    scores: dict[str, tuple[float, float]]  # eval set -> (psnr, ssim)


def run_ablation(
    spec: TrainRunSpec,
    eval_sets: dict[str, list],
    out_dir,
    log: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """Train each distinct wiring once and score it on every eval set.

    Rows sharing a wiring (the full model appears in both tables) reuse one run.
    """
    from .evaluation import evaluate_images, model_predictor
    from .metrics import EvalProtocol, summarize

    if len(eval_sets) != 2:
        raise ConfigError(f"ablation reports two eval sets, got {len(eval_sets)}")
    out = Path(out_dir)
    proto = EvalProtocol.for_scale(spec.model.scale)
    cache: dict[Ablation, dict[str, tuple[float, float]]] = {}
    rows = []
    for table, group in (("Table 2", TABLE2_ROWS), ("Table 3", TABLE3_ROWS)):
        for name, ab in group.items():
            if ab not in cache:
                tag = f"run{len(cache)}"
                if log:
                    log(f"# training {name} ({tag}): {ab}")
                result = train_loop(spec.replace(model=spec.model.replace(ablation=ab)), out / tag, log=log)
                pred = model_predictor(result.model)
                cache[ab] = {
                    set_name: summarize(evaluate_images(paths, spec.model.scale, pred, proto))
                    for set_name, paths in eval_sets.items()
                }
            rows.append(AblationRow(table, name, ab, cache[ab]))
    write_ablation_table(out / "ablation.tsv", rows, list(eval_sets))
    return rows


def format_ablation_table(rows: list[AblationRow], set_names: list[str]) -> list[str]:
    header = "table\trow\t" + "\t".join(f"{s}_psnr\t{s}_ssim" for s in set_names)
    lines = [header]
    for r in rows:
        cells = "\t".join(f"{r.scores[s][0]:.4f}\t{r.scores[s][1]:.6f}" for s in set_names)
        lines.append(f"{r.table}\t{r.name}\t{cells}")
    return lines


def write_ablation_table(path, rows: list[AblationRow], set_names: list[str]) -> None:
    Path(path).write_text("\n".join(format_ablation_table(rows, set_names)) + "\n")
