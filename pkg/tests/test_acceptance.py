"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v``; the verdict
lines are printed in the terminal summary.
"""

import contextlib
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from mpsi import checkpoint
from mpsi import functional as F
from mpsi.blocks import CMB, MCRM, SAMG, SGFN, STB, WindowSpec, window_merge, window_partition
from mpsi.cli import main
from mpsi.config import ModelConfig, SsmConfig
from mpsi.data import bicubic_resize, degrade, load_image, write_manifest, write_synthetic_set
from mpsi.gradcheck import BLOCKS_TOL, OPS_TOL, run_suite
from mpsi.metrics import EvalProtocol, psnr, read_report, ssim
from mpsi.model import super_resolve
from mpsi.ssm import DDBM, SsmParams, selective_scan
from mpsi.tensor import Tensor, flip
from mpsi.training import TrainRunSpec, train_loop

import oracles

DATA = Path(__file__).parent / "data"
VERDICTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException:
        VERDICTS[n] = f"FAIL  criterion {n}: {title}"
        raise
    extra = f" ({'; '.join(notes)})" if notes else ""
    VERDICTS[n] = f"PASS  criterion {n}: {title}{extra} [{time.perf_counter() - t0:.1f}s]"


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data = rng.uniform(-scale, scale, size=p.shape)
    return module


def zero(*linears):
    for lin in linears:
        lin.weight.data[:] = 0.0
        if lin.bias is not None:
            lin.bias.data[:] = 0.0


# ------------------------------------------------------------------------ 1


def test_criterion_1_gradient_suite():
    with criterion(1, "finite-difference gradient suite") as notes:
        t0 = time.perf_counter()
        ops = run_suite("ops", seed=0)
        blocks = run_suite("blocks", seed=0) + run_suite("model", seed=0)
        elapsed = time.perf_counter() - t0
        assert {"STB", "CMB", "DDBM", "MCRM", "SGFN", "MPSI(tiny)"} <= {r.unit for r in blocks}
        worst_ops = max(r.rel_error for r in ops)
        worst_blocks = max(r.rel_error for r in blocks)
        assert worst_ops < OPS_TOL, [(r.unit, r.rel_error) for r in ops if not r.ok]
        assert worst_blocks < BLOCKS_TOL, [(r.unit, r.rel_error) for r in blocks if not r.ok]
        assert elapsed < 300
        notes.append(f"ops worst {worst_ops:.1e}, blocks worst {worst_blocks:.1e}, {elapsed:.1f}s")


# ------------------------------------------------------------------------ 2


def _kernel_form(delta, a_cont, b, c, d_skip, x):
    # K_j = sum_s c_s abar_s^j (delta b_s), applied as a causal convolution
    length = x.shape[0]
    abar = np.exp(delta * a_cont)
    taps = np.array([np.sum(c * abar**j * delta * b) for j in range(length)])
    return np.convolve(x, taps)[:length] + d_skip * x


def test_criterion_2_ssm_oracles():
    with criterion(2, "selective scan vs kernel form and per-step loop") as notes:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(120):
            width, n, length = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 65))
            p = SsmParams(width, n, rng)
            p.b_proj.weight.data[:] = 0.0
            p.c_proj.weight.data[:] = 0.0
            p.delta_down.weight.data[:] = 0.0
            p.b_proj.bias.data = rng.uniform(-1, 1, n)
            p.c_proj.bias.data = rng.uniform(-1, 1, n)
            p.a_log.data = rng.uniform(-1, 1, p.a_log.shape)
            p.delta_up.bias.data = rng.uniform(-2, 1, width)
            p.d_skip.data = rng.uniform(-1, 1, width)
            x = rng.normal(size=(1, length, width))
            y = selective_scan(Tensor(x), p).data
            delta = np.logaddexp(0.0, p.delta_up.bias.data)
            for d in range(width):
                ref = _kernel_form(delta[d], -np.exp(p.a_log.data[d]), p.b_proj.bias.data, p.c_proj.bias.data,
                                   p.d_skip.data[d], x[0, :, d])
                worst = max(worst, np.abs(y[0, :, d] - ref).max())
        assert worst < 1e-10
        worst_loop = 0.0
        for _ in range(20):
            width, n, length = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 40))
            p = randomize(SsmParams(width, n, rng), rng, 0.8)
            x = rng.normal(size=(2, length, width))
            delta = np.logaddexp(0.0, (x @ p.delta_down.weight.data.T) @ p.delta_up.weight.data.T
                                 + p.delta_up.bias.data)
            bm = x @ p.b_proj.weight.data.T + p.b_proj.bias.data
            cm = x @ p.c_proj.weight.data.T + p.c_proj.bias.data
            ref = oracles.scan_loop(x, delta, -np.exp(p.a_log.data), bm, cm, p.d_skip.data)
            worst_loop = max(worst_loop, np.abs(selective_scan(Tensor(x), p).data - ref).max())
        assert worst_loop < 1e-12
        notes.append(f"kernel form {worst:.1e} over 120 trials, loop {worst_loop:.1e}")


# ------------------------------------------------------------------------ 3


def test_criterion_3_structural_exactness():
    with criterion(3, "bit-exact roundtrips and identity-at-zero residuals"):
        rng = np.random.default_rng(3)
        for hw, win in [((8, 32), (8, 32)), ((5, 7), (2, 3)), ((9, 4), (4, 4)), ((3, 3), (4, 4))]:
            spec = WindowSpec(*win, 1)
            x = Tensor(rng.normal(size=(2, hw[0] * hw[1], 4)))
            w, padded = window_partition(x, hw, spec)
            assert np.array_equal(window_merge(w, padded, hw, spec).data, x.data)
        for r in (2, 3, 4):
            x = Tensor(rng.normal(size=(2, 3 * r * r, 5, 3)))
            assert np.array_equal(F.pixel_unshuffle(F.pixel_shuffle(x, r), r).data, x.data)
            assert np.array_equal(F.pixel_shuffle(x, r).data, oracles.pixel_shuffle_loops(x.data, r))
            y = Tensor(rng.normal(size=(1, 3, 5 * r, 3 * r)))
            assert np.array_equal(F.pixel_shuffle(F.pixel_unshuffle(y, r), r).data, y.data)
        ssm = SsmConfig(4, 3, 2)
        x, hw = Tensor(rng.normal(size=(2, 12, 4))), (3, 4)
        stb = randomize(STB(4, WindowSpec(2, 2, 2), 2, rng), rng)
        zero(stb.proj, stb.sgfn.fc2)
        assert np.array_equal(stb(x, hw).data, x.data)
        cmb = randomize(CMB(4, ssm, 2, rng), rng)
        zero(cmb.proj, cmb.sgfn.fc2)
        assert np.array_equal(cmb(x, hw).data, x.data)
        sgfn = randomize(SGFN(4, 2, rng), rng)
        zero(sgfn.fc2)
        assert np.array_equal((sgfn(x, hw) + x).data, x.data)
        cfg = ModelConfig(channels=4, sambs_per_samg=2, heads=2, window=(2, 2), cmb_ssm=ssm, mcrm_ssm=ssm, scale=2)
        g = randomize(SAMG(cfg, rng), rng)
        for samb in g.sambs:
            zero(samb.stb.proj, samb.stb.sgfn.fc2, samb.cmb.proj, samb.cmb.sgfn.fc2)
        g.mcrm.mlp_fc2.weight.data[:] = 0.0
        g.mcrm.mlp_fc2.bias.data[:] = 40.0
        zero(g.conv)
        assert np.array_equal(g(x, hw).data, x.data)


# ------------------------------------------------------------------------ 4


def test_criterion_4_ddbm_symmetry():
    with criterion(4, "tied DDBM commutes with sequence reversal") as notes:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(25):
            dim = int(rng.integers(1, 5)) * 2
            m = randomize(DDBM(dim, int(rng.integers(1, 6)), int(rng.integers(1, 5)), 2, rng), rng, 0.6)
            m.tie()
            x = Tensor(rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 30)), dim)))
            worst = max(worst, np.abs(m(flip(x, axis=1)).data - flip(m(x), axis=1).data).max())
        assert worst < 1e-10
        notes.append(f"worst {worst:.1e} over 25 trials")


# ------------------------------------------------------------------------ 5


def test_criterion_5_mcrm_gating():
    with criterion(5, "MCRM gates in (0,1), bounded output, causal depth scan"):
        rng = np.random.default_rng(5)
        ssm = SsmConfig(4, 3, 2)
        for recursive in (True, False):
            m = randomize(MCRM(6, ssm, rng, recursive=recursive), rng, 1.0)
            for _ in range(10):
                taps = [Tensor(rng.normal(size=(2, 6, 4, 3))) for _ in range(int(rng.integers(2, 6)))]
                w = m.gate_weights(taps).data
                assert np.all((w > 0) & (w < 1))
                assert np.all(np.abs(m(taps).data) <= np.abs(taps[-1].data))
        m = randomize(MCRM(6, ssm, rng), rng)
        taps = [Tensor(rng.normal(size=(2, 6, 4, 3))) for _ in range(5)]

        def scan_out(ts):
            return m.mamba(m.norm(m.layer_sequence(ts))).data

        base = scan_out(taps)
        for t in range(5):
            moved = list(taps)
            moved[t] = Tensor(taps[t].data + rng.normal(size=(1, 6, 1, 1)))
            out = scan_out(moved)
            assert np.array_equal(out[:, :t], base[:, :t])
            assert np.abs(out[:, t:] - base[:, t:]).max() > 0


# ------------------------------------------------------------------------ 6


def test_criterion_6_metrics():
    with criterion(6, "PSNR and SSIM closed forms"):
        raw = EvalProtocol(convert_to_luma=False, border_crop=0)
        a = np.zeros((3, 16, 16))
        assert abs(psnr(a, a + 0.5, raw) - 10 * math.log10(4)) < 1e-12
        assert round(psnr(a, a + 0.5, raw), 4) == 6.0206
        assert abs(psnr(a, a + 0.1, raw) - 20.0) < 1e-10
        img = np.random.default_rng(6).uniform(size=(3, 24, 24))
        assert abs(ssim(img, img) - 1.0) < 1e-12 and abs(ssim(img, img, raw) - 1.0) < 1e-12
        lo, hi = np.full((3, 16, 16), 0.3), np.full((3, 16, 16), 0.7)
        c1 = 0.01**2
        closed = (2 * 0.3 * 0.7 + c1) / (0.3**2 + 0.7**2 + c1)
        assert abs(ssim(lo, hi, raw) - closed) < 1e-9


# ------------------------------------------------------------------------ 7


def test_criterion_7_overfit_beats_bicubic(tmp_path):
    with criterion(7, "tiny model overfits one 64x64 patch at x2") as notes:
        shutil.copy(DATA / "astronaut_64.png", tmp_path / "patch.png")
        write_manifest(tmp_path / "m.txt", ["patch.png"])
        cfg = ModelConfig(channels=16, num_samgs=1, sambs_per_samg=2, heads=2, window=(4, 4), scale=2)
        spec = TrainRunSpec(str(tmp_path / "m.txt"), cfg, batch_size=1, iterations=500, patch_size=32, lr=2e-3,
                            milestones=(250, 400, 450, 475), augment=False, log_every=100)
        t0 = time.perf_counter()
        result = train_loop(spec)
        elapsed = time.perf_counter() - t0
        hr = load_image(tmp_path / "patch.png")
        lr = degrade(hr, 2)
        proto = EvalProtocol.for_scale(2)
        model_db = psnr(super_resolve(result.model, lr), hr, proto)
        bicubic_db = psnr(np.clip(bicubic_resize(lr, 2), 0, 1), hr, proto)
        ratio = result.losses[-1] / result.losses[0]
        notes.append(f"loss ratio {ratio:.3f}, {model_db:.2f} dB vs bicubic {bicubic_db:.2f} dB, {elapsed:.0f}s")
        assert ratio <= 0.5
        assert model_db > bicubic_db
        assert elapsed <= 600


# ------------------------------------------------------------------------ 8

ABLATION_MODEL = ["channels=8", "sambs_per_samg=1", "heads=2", "window=4x4", "cmb_ssm.state=4", "mcrm_ssm.state=4"]


def test_criterion_8_ablation_table(tmp_path):
    with criterion(8, "ablation driver emits the two-table row structure") as notes:
        out = tmp_path / "abl"
        args = ["ablate", "--synthetic", "10", "--out", str(out), "--scale", "2", "--seed", "0"]
        for kv in ABLATION_MODEL + ["iterations=2000", "milestones=1000,1600", "lr=1e-3", "patch_size=8",
                                    "batch_size=4", "log_every=500"]:
            args += ["--override", kv]
        t0 = time.perf_counter()
        assert main(args) == 0
        lines = (out / "ablation.tsv").read_text().splitlines()
        header = lines[0].split("\t")
        assert header == ["table", "row", "setA_psnr", "setA_ssim", "setB_psnr", "setB_ssim"]
        rows = [ln.split("\t") for ln in lines[1:]]
        assert [(t, r) for t, r, *_ in rows] == [
            ("Table 2", "Base"), ("Table 2", "+CMB"), ("Table 2", "+MCRM"), ("Table 2", "+CMB+MCRM"),
            ("Table 3", "DDBM→CA"), ("Table 3", "CA→DDBM"), ("Table 3", "MRP→None"), ("Table 3", "None→MRP"),
        ]
        values = np.array([[float(v) for v in r[2:]] for r in rows])
        assert np.all(np.isfinite(values)) and np.all(values[:, 1::2] <= 1)
        full = rows[3][2:]
        assert rows[5][2:] == full and rows[7][2:] == full
        assert len({tuple(r[2:]) for r in rows}) == 6
        assert len(list(out.glob("run*/model.ckpt"))) == 6
        notes.append(f"10 images, 2000 iterations x 6 runs, {time.perf_counter() - t0:.0f}s")


# ------------------------------------------------------------------------ 9


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "train.log"}


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "resume bit-identity and repeatable end-to-end runs"):
        write_synthetic_set(tmp_path / "hr", 2, 24, 24, seed=9)
        write_manifest(tmp_path / "m.txt", sorted(str(p) for p in (tmp_path / "hr").glob("*.png")))
        common = ["--scale", "2", "--seed", "5"]
        for kv in ABLATION_MODEL + [f"manifest={tmp_path / 'm.txt'}", "patch_size=6", "batch_size=2",
                                    "lr=1e-3", "checkpoint_every=25", "log_every=10"]:
            common += ["--override", kv]

        def train(out, iters, resume=False):
            extra = ["--resume"] if resume else []
            assert main(["train", "--out", str(out), *common, "--override", f"iterations={iters}", *extra]) == 0

        train(tmp_path / "full", 100)
        train(tmp_path / "half", 50)
        train(tmp_path / "half", 100, resume=True)
        for name in ("model.ckpt", "optim.ckpt"):
            a, b = checkpoint.load(tmp_path / "full" / name), checkpoint.load(tmp_path / "half" / name)
            assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)
        # two independent end-to-end runs: train, infer, eval
        for run in ("r1", "r2"):
            root = tmp_path / run
            train(root / "train", 30)
            ckpt = str(root / "train" / "model.ckpt")
            inputs = sorted(str(p) for p in (tmp_path / "hr").glob("*.png"))
            assert main(["infer", "--checkpoint", ckpt, "--out", str(root / "sr"), *inputs]) == 0
            assert main(["eval", "--checkpoint", ckpt, "--hr-dir", str(tmp_path / "hr"), "--out",
                         str(root / "eval"), "--diff-maps"]) == 0
        assert _tree_bytes(tmp_path / "r1") == _tree_bytes(tmp_path / "r2")
        a = (tmp_path / "r1" / "train" / "train.log").read_text().splitlines()
        b = (tmp_path / "r2" / "train" / "train.log").read_text().splitlines()
        # identical losses; only the wall-clock column may differ
        assert [ln.split("\t")[:3] for ln in a[3:]] == [ln.split("\t")[:3] for ln in b[3:]]
        assert len(read_report(tmp_path / "r1" / "eval" / "report.tsv")) == 3


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
