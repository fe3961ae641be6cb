"""Acceptance criteria 1-9, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed in the "acceptance criteria"
section of the terminal summary. Criteria 7 and 8 use the training cache in
``tests/.acceptance_cache`` (see acceptance_runs.py) and train from scratch
when it is missing.
"""

import math
import time

import numpy as np
import pytest
import torch
from scipy import stats

import acceptance_runs
from _support import grad_check, randomize, record_criterion
from jointflow import ablate
from jointflow.blocks import LoraAdapter, adaptive_weights, lora_forward
from jointflow.cli import main
from jointflow.config import parse_config
from jointflow.experiment import evaluate_model
from jointflow.flow import TimestepPair, VelocityPair, euler_sample, target_velocity, uniform_trajectory
from jointflow.io import read_pgm16, read_ppm, write_pgm16, write_ppm
from jointflow.model import JointModel, ModelConfig, build_base
from jointflow.tasks import START, Task, TaskMode, run_task, tiled_sample
from jointflow.timesteps import PairSampleKind, sample_f, sample_pair, shift_cdf, shift_map
from jointflow.train import build_joint, load_checkpoint, save_checkpoint
from jointflow.world import decode_disparity_oracle, render_scene, sample_scene
from test_world import tree_equal


def logistic(z):
    return 1.0 / (1.0 + math.exp(-z))


def flat(out) -> torch.Tensor:
    # modulation heads return their chunks as a tuple
    return torch.cat(out, dim=-1) if isinstance(out, tuple) else out


def default_joint(seed: int) -> JointModel:
    """Default-size joint model with every weight randomized, zero-init ones included."""
    base = build_base(ModelConfig(), torch.Generator().manual_seed(seed))
    model = JointModel(base, torch.Generator().manual_seed(seed + 1))
    randomize(model, seed + 2, scale=0.1)
    return model.eval()


def test_criterion_1_formulas():
    t0 = time.perf_counter()
    grid = torch.linspace(0.0, 1.0, 101, dtype=torch.float64)
    tx, ty = torch.meshgrid(grid, grid, indexing="ij")
    w = adaptive_weights(tx, ty, 3.0)
    sum_err = (w.w_x + w.w_y - 1.0).abs().max().item()
    eq = adaptive_weights(grid, grid, 3.0)
    eq_err = max((eq.w_x - 0.5).abs().max().item(), (eq.w_y - 0.5).abs().max().item())
    w01 = adaptive_weights(0.0, 1.0, 3.0)
    hi_err = abs(w01.w_x.item() - logistic(1.5))
    lit_err = abs(logistic(1.5) - 0.81757)
    f_err = abs(float(shift_map(0.0, 3.1582)) - (1 - 3.1582 / 4.1582))
    g_err = abs(float(shift_map(0.0, 0.25)) - 0.8)
    dt = time.perf_counter() - t0
    ok = (sum_err <= 1e-12 and eq_err <= 1e-12 and hi_err <= 1e-6 and lit_err <= 1e-5
          and f_err <= 1e-6 and g_err <= 1e-6 and dt < 1.0)
    record_criterion(1, ok, dt, f"sum err {sum_err:.1e}, w(0,1)={w01.w_x.item():.6f}, "
                                f"f(0)={float(shift_map(0.0, 3.1582)):.6f}, g(0)={float(shift_map(0.0, 0.25)):.6f}")
    assert ok


def test_criterion_2_sampler_statistics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    n = 1_000_000
    counts = {k: 0 for k in PairSampleKind}
    for _ in range(n):
        counts[sample_pair(rng)[1]] += 1
    freq = np.array([counts[PairSampleKind.Shared], counts[PairSampleKind.FxGy], counts[PairSampleKind.GxFy]]) / n
    freq_err = np.abs(freq - [0.5, 0.25, 0.25]).max()
    draws = sample_f(np.random.default_rng(21), 100_000)
    ks = stats.kstest(draws, lambda t: shift_cdf(t, 3.1582)).statistic
    dt = time.perf_counter() - t0
    ok = freq_err <= 0.005 and ks < 0.01 and dt < 30.0
    record_criterion(2, ok, dt, f"tag frequencies {np.round(freq, 4).tolist()}, KS {ks:.4f}")
    assert ok


def test_criterion_3_identity_at_init():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    base = build_base(cfg, torch.Generator().manual_seed(30))
    randomize(base, 31, scale=0.1)
    model = JointModel(base, torch.Generator().manual_seed(32)).eval()
    g = torch.Generator().manual_seed(33)
    mismatches = 0
    with torch.no_grad():
        for _ in range(100):
            x = torch.randn(1, 3, 32, 32, generator=g)
            y = torch.randn(1, 3, 32, 32, generator=g)
            tx, ty = torch.rand(2, generator=g).tolist()
            cls = torch.randint(0, cfg.num_classes + 1, (1,), generator=g)
            v = model.forward_joint(x, y, TimestepPair(tx, ty), cls)
            mismatches += not torch.equal(v.v_x, model.forward_base(x, tx, cls))
    # zero `up` leaves every adapted layer and the functional form equal to the base
    lora_mismatch = 0
    with torch.no_grad():
        for layer in model.base.adapted_layers():
            x = torch.randn(5, layer.linear.in_features, generator=g)
            lora_mismatch += not torch.equal(flat(layer(x, adapted=True)), flat(layer(x)))
        w = torch.randn(6, 4, generator=g)
        a = LoraAdapter.create(4, 6, 2, generator=g)
        xs = torch.randn(4, 3, generator=g)
        lora_mismatch += not torch.equal(lora_forward(w, a, xs), w @ xs)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and lora_mismatch == 0 and dt < 10.0
    record_criterion(3, ok, dt, f"{mismatches}/100 rgb mismatches, {lora_mismatch} LoRA mismatches")
    assert ok


def test_criterion_4_gradient_check():
    t0 = time.perf_counter()
    small = dict(image_size=4, patch=2, d_model=8, heads=2, lora_rank=2, num_classes=2)
    worst = {}
    for name, blocks in (("mm", dict(mm_blocks=1, p_blocks=0)), ("p", dict(mm_blocks=0, p_blocks=1))):
        errors = grad_check(ModelConfig(**small, **blocks))
        key = max(errors, key=errors.get)
        worst[name] = (key, errors[key])
    dt = time.perf_counter() - t0
    err = max(e for _, e in worst.values())
    ok = err <= 1e-4 and dt < 60.0
    record_criterion(4, ok, dt, "max rel error " + ", ".join(f"{k}-block {e:.1e} ({p})" for k, (p, e) in worst.items()))
    assert ok


def test_criterion_5_sampler_exactness():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(50)
    x0, x1, y0, y1 = (torch.randn(2, 3, 8, 8, generator=g) for _ in range(4))
    field = VelocityPair(target_velocity(x0, x1), target_velocity(y0, y1))
    oracle = lambda x, y, pair: field
    rel = 0.0
    for steps in (1, 5, 20):
        x, y = euler_sample(oracle, x0, y0, uniform_trajectory(TimestepPair(0.0, 0.0), steps))
        for got, want in ((x, x1), (y, y1)):
            rel = max(rel, (torch.linalg.vector_norm(got - want) / torch.linalg.vector_norm(want)).item())
    clamped_ok = True
    for tag in (Task.DepthEstimation, Task.DepthConditioned):
        start = START[tag]
        xi = x1 if start.t_x == 1.0 else x0
        yi = y1 if start.t_y == 1.0 else y0
        x, y = euler_sample(oracle, xi, yi, uniform_trajectory(start, 20))
        clamped_ok &= torch.equal(x, x1) if start.t_x == 1.0 else torch.equal(y, y1)
    model = default_joint(51)
    rgb = torch.rand(2, 3, 32, 32, generator=g)
    tiled_ok = True
    for mode, kw in ((TaskMode(Task.Joint), {"class_id": torch.tensor([1, 5])}),
                     (TaskMode(Task.DepthEstimation), {"rgb": rgb})):
        a = run_task(model, mode, generator=torch.Generator().manual_seed(52), **kw)
        b = tiled_sample(model, mode, (32, 32), 32, 0, 0.0, generator=torch.Generator().manual_seed(52), **kw)
        tiled_ok &= torch.equal(a.rgb, b.rgb) and torch.equal(a.disparity, b.disparity)
    dt = time.perf_counter() - t0
    ok = rel <= 1e-5 and clamped_ok and tiled_ok and dt < 5.0
    record_criterion(5, ok, dt, f"euler rel error {rel:.1e}, clamped identical {clamped_ok}, "
                                f"tiling identical {tiled_ok}")
    assert ok


def oracle_map(spec) -> np.ndarray:
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    out = np.zeros((n, n))
    for d in spec.disks:
        inside = (xs - d.cx) ** 2 + (ys - d.cy) ** 2 <= d.radius ** 2
        out = np.where(inside, np.maximum(out, d.disparity), out)
    return out


def test_criterion_6_oracle_codec():
    t0 = time.perf_counter()
    rng = np.random.default_rng(60)
    worst = 0.0
    for _ in range(1000):
        spec = sample_scene(rng)
        pair = render_scene(spec)
        worst = max(worst, float(np.abs(decode_disparity_oracle(pair.rgb) - oracle_map(spec)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 0.005 and dt < 10.0
    record_criterion(6, ok, dt, f"max |decode - scene disparity| {worst:.5f} over 1000 scenes")
    assert ok


def ratio(untrained: float, trained: float) -> float:
    return math.inf if trained <= 0 else untrained / trained


@pytest.mark.slow
def test_criterion_7_end_to_end_training():
    t0 = time.perf_counter()
    base, joint, meta = acceptance_runs.trained_models()
    _, held = acceptance_runs.datasets()
    res = evaluate_model(joint, held, seed=0, n_generate=64)
    # baseline: the same pipeline right before joint training (adapters and joint projections at init)
    _, jcfg = parse_config("phase = joint")
    init = evaluate_model(build_joint(base, jcfg), held, seed=0, n_generate=64)
    dt = time.perf_counter() - t0
    train_min = (meta["pretrain_seconds"] + meta["joint_seconds"]) / 60
    checks = {
        "absrel<0.15": res.depth_absrel < 0.15,
        "delta1>0.80": res.depth_delta1 > 0.80,
        "consistency<0.20": res.joint_consistency < 0.20,
        "mmd<3x halves": res.mmd_generated < 3 * res.mmd_halves,
        "conditioned<0.25": res.conditioned_absrel < 0.25,
        "5x absrel": ratio(init.depth_absrel, res.depth_absrel) >= 5,
        "5x (1-delta1)": ratio(1 - init.depth_delta1, 1 - res.depth_delta1) >= 5,
        "5x consistency": ratio(init.joint_consistency, res.joint_consistency) >= 5,
        "5x mmd": ratio(init.mmd_generated, res.mmd_generated) >= 5,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"absrel {res.depth_absrel:.4f} (init {init.depth_absrel:.4f}), "
              f"delta1 {res.depth_delta1:.4f} (init {init.depth_delta1:.4f}), "
              f"consistency {res.joint_consistency:.4f} (init {init.joint_consistency:.4f}), "
              f"mmd2 {res.mmd_generated:.5f} vs halves {res.mmd_halves:.5f} (init {init.mmd_generated:.5f}), "
              f"conditioned absrel {res.conditioned_absrel:.4f}; "
              f"training {train_min:.0f} min on {meta['threads']} thread(s)")
    if failed:
        detail += "; failed: " + ", ".join(failed)
    record_criterion(7, not failed, dt, detail)
    assert not failed, detail


@pytest.mark.slow
def test_criterion_8_ablation_direction():
    t0 = time.perf_counter()
    rows = acceptance_runs.ablation_rows()
    seeds = sorted({r.seed for r in rows})
    assert len(seeds) >= 3
    assert all(sum(r.seed == s for r in rows) == 4 for s in seeds)
    s = ablate.summarize(rows)
    on, off = s[(True, True)]["absrel"], s[(False, False)]["absrel"]
    holds = ablate.direction_holds(rows)
    dt = time.perf_counter() - t0
    per_seed = "; ".join(
        f"seed {sd}: on {next(r.absrel for r in rows if r.seed == sd and r.adaptive and r.unbalanced):.4f} "
        f"off {next(r.absrel for r in rows if r.seed == sd and not r.adaptive and not r.unbalanced):.4f}"
        for sd in seeds)
    record_criterion(8, "PASS" if holds else "FLAGGED (soft gate)", dt,
                     f"mean absrel both-on {on:.4f} vs both-off {off:.4f} over seeds {seeds} "
                     f"({acceptance_runs.ABLATION_STEPS} joint steps per cell); {per_seed}")


def test_criterion_9_persistence(tmp_path):
    t0 = time.perf_counter()
    model = default_joint(90)
    save_checkpoint(model, tmp_path / "a.bin")
    back = load_checkpoint(tmp_path / "a.bin")
    ckpt_ok = all(torch.equal(p, q) for p, q in zip(model.state_dict().values(), back.state_dict().values()))
    save_checkpoint(back, tmp_path / "b.bin")
    ckpt_ok &= (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    rng = np.random.default_rng(91)
    rgb = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    grey = rng.integers(0, 65536, (32, 32), dtype=np.uint16)
    write_ppm(tmp_path / "a.ppm", rgb)
    write_pgm16(tmp_path / "a.pgm", grey)
    image_ok = np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb) and np.array_equal(read_pgm16(tmp_path / "a.pgm"), grey)

    (tmp_path / "small.cfg").write_text("d_model = 16\nheads = 2\nmm_blocks = 1\np_blocks = 1\n"
                                        "batch_size = 4\neval_every = 2\nn_train = 8\nn_val = 4\n")
    for run in ("r1", "r2"):
        d = tmp_path / run
        assert main(["gen-data", "--n", "8", "--seed", "3", "--out", str(d / "data")]) == 0
        assert main(["pretrain", "--config", str(tmp_path / "small.cfg"), "--steps", "3",
                     "--out", str(d / "base")]) == 0
        assert main(["train-joint", "--config", str(tmp_path / "small.cfg"), "--steps", "3",
                     "--base-ckpt", str(d / "base" / "base.bin"), "--gt", str(d / "data"),
                     "--out", str(d / "joint")]) == 0
        assert main(["sample", "--ckpt", str(d / "joint" / "joint.bin"), "--mode", "joint", "--n", "2",
                     "--steps", "3", "--out", str(d / "samples")]) == 0
    # run.json records the output paths, which differ between the two runs by construction
    runs_ok = all(tree_equal(tmp_path / "r1" / sub, tmp_path / "r2" / sub) for sub in ("data",))
    for sub, name in (("base", "base.bin"), ("joint", "joint.bin"), ("base", "history.csv"),
                      ("joint", "history.csv"), ("samples", "000000.ppm"), ("samples", "000001.pgm")):
        runs_ok &= (tmp_path / "r1" / sub / name).read_bytes() == (tmp_path / "r2" / sub / name).read_bytes()
    dt = time.perf_counter() - t0
    ok = ckpt_ok and image_ok and runs_ok and dt < 5.0
    record_criterion(9, ok, dt, f"checkpoint {ckpt_ok}, images {image_ok}, same-seed artifacts {runs_ok}")
    assert ok
