import numpy as np
import pytest
import torch

from conftest import tiny_cfg
from jointflow.config import TrainConfig
from jointflow.flow import jcfm_loss
from jointflow.model import JointModel, base_checksum
from jointflow.rng import substream
from jointflow.train import (
    AdamState,
    PairData,
    TrainingError,
    build_joint,
    drop_condition,
    joint_batch,
    load_checkpoint,
    optimizer_step,
    pretrain_base,
    save_checkpoint,
    train_joint,
)
from jointflow.world import generate_scenes


@pytest.fixture(scope="module")
def data():
    return PairData.from_arrays(*generate_scenes(24, 0, "t", image_size=8))


@pytest.fixture(scope="module")
def val():
    return PairData.from_arrays(*generate_scenes(8, 0, "v", image_size=8))


def tcfg(phase, **kw):
    return TrainConfig(**{"phase": phase, "steps": 40, "batch_size": 8, "eval_every": 20,
                          "learning_rate": 3e-3, **kw})


@pytest.fixture(scope="module")
def trained_base(data, val):
    base, hist = pretrain_base(tcfg("base", steps=60), tiny_cfg(), data, val)
    return base, hist


# Adam


def test_adam_zero_gradient_keeps_params():
    p = torch.randn(5)
    before = p.clone()
    optimizer_step([p], [torch.zeros(5)], AdamState(), lr=0.1)
    assert torch.equal(p, before)


def test_adam_first_step_magnitude_is_lr():
    for g in (1.0, 3.7, -0.02):
        p = torch.tensor([0.5], dtype=torch.float64)
        optimizer_step([p], [torch.tensor([g], dtype=torch.float64)], AdamState(), lr=0.01)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        assert p.item() == pytest.approx(0.5 - 0.01 * g / (abs(g) + 1e-8), abs=1e-15)
        assert abs(p.item() - 0.5) == pytest.approx(0.01, rel=1e-6)


def test_adam_matches_reference_recursion(rng):
    p = torch.tensor(rng.normal(size=4))
    state = AdamState()
    ref, m, v = p.numpy().copy(), np.zeros(4), np.zeros(4)
    for step in range(1, 6):
        g = rng.normal(size=4)
        optimizer_step([p], [torch.tensor(g)], state, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
    assert np.allclose(p.numpy(), ref, atol=1e-12)


def test_adam_rejects_non_finite():
    p = torch.zeros(2)
    with pytest.raises(TrainingError):
        optimizer_step([p], [torch.tensor([1.0, float("nan")])], AdamState(), lr=0.1)
    assert not p.any()


# data helpers


def test_condition_drop_frequency():
    cls = torch.arange(10_000) % 6 + 1
    dropped, mask = drop_condition(cls, 0.1, 8, substream(0, "drop"))
    assert abs(mask.float().mean().item() - 0.10) <= 0.01
    assert torch.all(dropped[mask] == 8) and torch.equal(dropped[~mask], cls[~mask])


def test_joint_batch_independent_noise(data):
    idx = torch.arange(4)
    t = torch.full((4,), 0.0)
    xt, yt, target = joint_batch(data, idx, t, t, torch.Generator().manual_seed(0))
    assert not torch.allclose(xt, yt)


# base phase


def test_pretrain_lowers_validation_loss(trained_base):
    _, hist = trained_base
    val = [r["val_loss"] for r in hist.records]
    assert val[-1] < val[0]
    assert all(np.isfinite(r["loss"]) for r in hist.records[1:])


def test_zero_learning_rate_is_null_update(data):
    cfg = tcfg("base", steps=5, learning_rate=0.0)
    a, _ = pretrain_base(cfg, tiny_cfg(), data)
    b, _ = pretrain_base(tcfg("base", steps=0), tiny_cfg(), data)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


def test_pretrain_reproducible(data):
    a, _ = pretrain_base(tcfg("base", steps=5), tiny_cfg(), data)
    b, _ = pretrain_base(tcfg("base", steps=5), tiny_cfg(), data)
    assert base_checksum(a) == base_checksum(b)


def test_non_finite_loss_aborts(data):
    bad = PairData(data.rgb.clone(), data.disparity, data.class_id)
    bad.rgb[:] = float("nan")
    with pytest.raises(TrainingError, match="non-finite"):
        pretrain_base(tcfg("base", steps=3), tiny_cfg(), bad)


def test_phase_checked(data):
    with pytest.raises(ValueError):
        pretrain_base(tcfg("joint"), tiny_cfg(), data)


# joint phase


def test_step_zero_loss_decomposes(trained_base, data):
    base, _ = trained_base
    model = build_joint(base, tcfg("joint"))
    g = torch.Generator().manual_seed(1)
    idx = torch.arange(8)
    tx, ty = torch.rand(8, generator=g), torch.rand(8, generator=g)
    xt, yt, target = joint_batch(data, idx, tx, ty, g)
    cls = data.class_id[idx]
    with torch.no_grad():
        pred = model.forward_joint(xt, yt, (tx, ty), cls)
        rgb_term = (base(xt, tx, cls) - target.v_x).square().mean()
        depth_term = (pred.v_y - target.v_y).square().mean()
        assert jcfm_loss(pred, target).item() == pytest.approx(0.5 * rgb_term.item() + 0.5 * depth_term.item(),
                                                               rel=1e-6)


def test_joint_training_only_moves_adapters(trained_base, data, val):
    base, _ = trained_base
    before = {n: p.detach().clone() for n, p in build_joint(base, tcfg("joint")).named_parameters()}
    model, hist = train_joint(tcfg("joint", steps=30), base, data, val)
    moved = {n for n, p in model.named_parameters() if not torch.equal(p, before[n])}
    assert moved
    assert all("lora_" in n or n.startswith(("joint.", "depth_in.", "depth_out.")) for n in moved)
    assert any(n.startswith("joint.") for n in moved) and any("lora_up" in n for n in moved)
    assert base_checksum(model) == base_checksum(base)
    val_losses = [r["val_loss"] for r in hist.records]
    assert val_losses[-1] < val_losses[0]


def test_build_joint_leaves_caller_base_alone(trained_base):
    base, _ = trained_base
    c = base_checksum(base)
    model = build_joint(base, tcfg("joint", adaptive_weights_enabled=False))
    assert not model.cfg.adaptive_weights and base.cfg.adaptive_weights
    assert base_checksum(base) == c
    assert not any(getattr(layer, "rank", 0) for layer in base.adapted_layers())


def test_checkpoint_round_trip(tmp_path, trained_base, data):
    base, _ = trained_base
    model, _ = train_joint(tcfg("joint", steps=3), base, data)
    save_checkpoint(model, tmp_path / "j.bin")
    back = load_checkpoint(tmp_path / "j.bin")
    assert isinstance(back, JointModel) and back.cfg == model.cfg
    for (n, p), (_, q) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(p, q), n
    save_checkpoint(back, tmp_path / "k.bin")
    assert (tmp_path / "j.bin").read_bytes() == (tmp_path / "k.bin").read_bytes()


def test_joint_training_reproducible(tmp_path, trained_base, data):
    base, _ = trained_base
    for name in ("a", "b"):
        model, _ = train_joint(tcfg("joint", steps=4), base, data)
        save_checkpoint(model, tmp_path / f"{name}.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
