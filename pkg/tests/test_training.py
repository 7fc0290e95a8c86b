import math

import numpy as np
import pytest

from mpsi import checkpoint
from mpsi.config import ModelConfig, SsmConfig
from mpsi.data import save_image, synthetic_image, write_manifest
from mpsi.tensor import ConfigError, Parameter
from mpsi.training import (
    REFERENCE_LR,
    REFERENCE_MILESTONES,
    TABLE2_ROWS,
    TABLE3_ROWS,
    GradientError,
    NonFiniteLossError,
    TrainRunSpec,
    TrainState,
    adam_step,
    load_spec,
    lr_at,
    run_ablation,
    train_loop,
)

SSM = SsmConfig(state=2, conv_width=2, expansion=1)
TINY = ModelConfig(channels=4, sambs_per_samg=1, heads=2, window=(2, 2), cmb_ssm=SSM, mcrm_ssm=SSM, scale=2)


@pytest.fixture
def manifest(tmp_path):
    rng = np.random.default_rng(0)
    names = []
    for i in range(2):
        save_image(synthetic_image(rng, 16, 16), tmp_path / f"h{i}.png")
        names.append(f"h{i}.png")
    write_manifest(tmp_path / "m.txt", names)
    return str(tmp_path / "m.txt")


def tiny_spec(manifest, **kw):
    base = dict(model=TINY, batch_size=2, iterations=6, patch_size=4, lr=1e-3, log_every=1)
    base.update(kw)
    return TrainRunSpec(manifest, **base)


# ------------------------------------------------------------------- adam


def scalar_state(value, grad, lr=0.1):
    p = Parameter(np.array([value]))
    p.grad = np.array([grad])
    return TrainState({"p": p}, base_lr=lr), p


def test_adam_zero_gradient_no_change():
    state, p = scalar_state(1.5, 0.0)
    adam_step(state)
    assert p.data[0] == 1.5 and state.iteration == 1


def test_adam_first_step_magnitude_is_lr():
    for g in (3.0, -0.02, 1e3):
        state, p = scalar_state(0.0, g, lr=0.01)
        adam_step(state)
        # bias-corrected m/sqrt(v) = g/|g| exactly up to eps
        assert p.data[0] == pytest.approx(-0.01 * math.copysign(1, g) * abs(g) / (abs(g) + 1e-8), abs=1e-15)


def test_adam_first_step_direction_scale_invariant():
    rng = np.random.default_rng(1)
    g = rng.normal(size=5)
    signs = []
    for scale in (1e-3, 1.0, 50.0):
        p = Parameter(np.zeros(5))
        p.grad = g * scale
        adam_step(TrainState({"p": p}, base_lr=0.1))
        signs.append(np.sign(p.data))
    assert all(np.array_equal(signs[0], s) for s in signs)


def test_adam_missing_gradient_names_parameter():
    state = TrainState({"enc.w": Parameter(np.zeros(2))})
    with pytest.raises(GradientError, match="enc.w"):
        adam_step(state)


def test_adam_matches_hand_formula_over_steps():
    b1, b2, eps, lr = 0.9, 0.99, 1e-8, 0.05
    grads = [0.3, -1.0, 0.7]
    p = Parameter(np.array([2.0]))
    state = TrainState({"p": p}, base_lr=lr)
    x, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p.grad = np.array([g])
        adam_step(state)
        m, v = b1 * m + (1 - b1) * g, b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.data[0] == pytest.approx(x, abs=1e-15)


# --------------------------------------------------------------- schedule


def test_reference_schedule_values():
    assert lr_at(0, REFERENCE_LR, REFERENCE_MILESTONES) == 2e-4
    assert lr_at(249_999, REFERENCE_LR, REFERENCE_MILESTONES) == 2e-4
    assert lr_at(250_000, REFERENCE_LR, REFERENCE_MILESTONES) == 1e-4
    assert lr_at(475_000, REFERENCE_LR, REFERENCE_MILESTONES) == 2e-4 / 16


def test_schedule_is_step_function_with_exact_halvings():
    ms = (3, 7, 8)
    values = [lr_at(i, 1.0, ms) for i in range(12)]
    changes = [(i, values[i - 1] / values[i]) for i in range(1, 12) if values[i] != values[i - 1]]
    assert changes == [(3, 2.0), (7, 2.0), (8, 2.0)]


# ------------------------------------------------------------------- spec


def test_spec_validation(manifest):
    with pytest.raises(ConfigError, match="manifest"):
        TrainRunSpec("").validate()
    with pytest.raises(ConfigError, match="increasing"):
        tiny_spec(manifest, milestones=(4, 2)).validate()
    with pytest.raises(ConfigError, match="< iterations"):
        tiny_spec(manifest, milestones=(6,)).validate()
    with pytest.raises(ConfigError, match="loss"):
        tiny_spec(manifest, loss="huber").validate()


def test_spec_file_roundtrip(tmp_path, manifest):
    spec = tiny_spec(manifest, milestones=(2, 4), loss="mse", augment=False)
    (tmp_path / "run.cfg").write_text("".join(f"{k}={v}\n" for k, v in spec.to_flat().items()))
    assert load_spec(tmp_path / "run.cfg") == spec
    with pytest.raises(ConfigError, match="warmup"):
        load_spec(tmp_path / "run.cfg", {"warmup": "3"})


# ------------------------------------------------------------------- loop


def test_train_loop_logs_and_checkpoints(tmp_path, manifest):
    out = tmp_path / "run"
    result = train_loop(tiny_spec(manifest, loss="mse", checkpoint_every=3), out)
    assert result.state.iteration == 6 and len(result.losses) == 6
    log = (out / "train.log").read_text().splitlines()
    assert "loss=mse" in log[0]
    assert log[2] == "iter\tlr\tloss\tseconds"
    rows = [ln.split("\t") for ln in log[3:]]
    assert [int(r[0]) for r in rows] == list(range(1, 7)) and all(len(r) == 4 for r in rows)
    assert {"model.ckpt", "model.ckpt.cfg", "optim.ckpt", "train_state.txt"} <= {p.name for p in out.iterdir()}
    assert "iteration=6" in (out / "train_state.txt").read_text()


def _params_bytes(model):
    return {n: p.data.tobytes() for n, p in model.named_parameters()}


def test_resume_is_bit_identical(tmp_path, manifest):
    full = train_loop(tiny_spec(manifest, iterations=8), tmp_path / "full")
    train_loop(tiny_spec(manifest, iterations=4), tmp_path / "half")
    resumed = train_loop(tiny_spec(manifest, iterations=8), tmp_path / "half", resume=True)
    assert resumed.state.iteration == 8
    assert _params_bytes(full.model) == _params_bytes(resumed.model)
    assert full.losses[4:] == resumed.losses
    a, b = checkpoint.load(tmp_path / "full" / "optim.ckpt"), checkpoint.load(tmp_path / "half" / "optim.ckpt")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_repeat_runs_identical(manifest):
    a = train_loop(tiny_spec(manifest))
    b = train_loop(tiny_spec(manifest))
    assert a.losses == b.losses and _params_bytes(a.model) == _params_bytes(b.model)


def test_non_finite_loss_aborts_with_provenance(tmp_path, manifest):
    out = tmp_path / "bad"
    with pytest.raises(NonFiniteLossError, match=r"h[01]\.png@lr"):
        train_loop(tiny_spec(manifest, lr=1e300), out)
    assert "non-finite" in (out / "nonfinite_batch.txt").read_text()


def test_loss_decreases_on_tiny_problem(manifest):
    result = train_loop(tiny_spec(manifest, iterations=40, augment=False, batch_size=1, lr=3e-3))
    assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])


# --------------------------------------------------------------- ablation


def test_ablation_rows_and_table(tmp_path, manifest):
    from pathlib import Path

    evals = {"setA": [Path(manifest).parent / "h0.png"], "setB": [Path(manifest).parent / "h1.png"]}
    rows = run_ablation(tiny_spec(manifest, iterations=2, log_every=10), evals, tmp_path / "abl")
    assert [r.name for r in rows if r.table == "Table 2"] == ["Base", "+CMB", "+MCRM", "+CMB+MCRM"]
    assert [r.name for r in rows if r.table == "Table 3"] == ["DDBM→CA", "CA→DDBM", "MRP→None", "None→MRP"]
    assert all(set(r.scores) == {"setA", "setB"} for r in rows)
    # six distinct wirings are trained; the full model is shared between tables
    assert len({r.ablation for r in rows}) == 6
    assert len([p for p in (tmp_path / "abl").iterdir() if p.name.startswith("run")]) == 6
    table = (tmp_path / "abl" / "ablation.tsv").read_text().splitlines()
    assert table[0].split("\t") == ["table", "row", "setA_psnr", "setA_ssim", "setB_psnr", "setB_ssim"]
    assert len(table) == 9
    assert TABLE2_ROWS["Base"].use_cmb is False and TABLE3_ROWS["MRP→None"].mcrm_recursive is False
