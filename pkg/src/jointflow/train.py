"""Two-phase training: pretrain the RGB base, then freeze it and train the joint extras."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import torch

from . import io
from .config import TrainConfig
from .flow import VelocityPair, interpolate, jcfm_loss, target_velocity
from .model import (
    BaseDiT,
    JointModel,
    ModelConfig,
    base_checksum,
    build_base,
    config_from_dict,
    encode_depth,
    to_latent,
    trainable_groups,
)
from .rng import substream, torch_generator
from .timesteps import sample_f, sample_pairs

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction.

    ``params`` and ``grads`` are parallel sequences of tensors. Raises
    :class:`TrainingError` on a non-finite gradient before touching anything.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
    if grads and not bool(torch.isfinite(torch.stack([g.abs().sum() for g in grads])).all()):
        raise TrainingError(f"non-finite gradient at optimizer step {state.step + 1}")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if lr == 0.0:
                continue
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


# ---------------------------------------------------------------------------
# data


@dataclass
class PairData:
    """Training tensors: rgb (N, 3, H, W), disparity (N, H, W) in [0, 1]; class ids (N,)."""

    rgb: torch.Tensor
    disparity: torch.Tensor
    class_id: torch.Tensor

    @classmethod
    def from_arrays(cls, rgb: np.ndarray, disparity: np.ndarray, class_id: np.ndarray):
        return cls(
            torch.from_numpy(np.ascontiguousarray(rgb.transpose(0, 3, 1, 2))).float(),
            torch.from_numpy(np.ascontiguousarray(disparity)).float(),
            torch.from_numpy(np.asarray(class_id, dtype=np.int64)),
        )

    def __len__(self):
        return self.rgb.shape[0]

    def subset(self, idx):
        return PairData(self.rgb[idx], self.disparity[idx], self.class_id[idx])


def drop_condition(class_id: torch.Tensor, prob: float, null: int, rng: np.random.Generator):
    mask = torch.from_numpy(rng.random(class_id.shape[0]) < prob)
    return torch.where(mask, torch.full_like(class_id, null), class_id), mask


@dataclass
class History:
    records: list = field(default_factory=list)

    def log(self, **kw):
        self.records.append(kw)
        log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in kw.items()))


def _check_finite(loss: torch.Tensor, step: int, phase: str):
    if not math.isfinite(loss.item()):
        raise TrainingError(f"{phase} training: non-finite loss {loss.item()} at step {step}")


# ---------------------------------------------------------------------------
# base phase


@torch.no_grad()
def base_val_loss(base: BaseDiT, val: PairData, seed: int = 0, chunk: int = 100) -> float:
    rng = substream(seed, "eval", 0)
    gen = torch_generator(seed, "eval", 1)
    n = len(val)
    t = torch.from_numpy(sample_f(rng, n)).float()
    x1 = to_latent(val.rgb)
    x0 = torch.randn(x1.shape, generator=gen)
    total = 0.0
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        xt = interpolate(x0[sl], x1[sl], t[sl])
        pred = base(xt, t[sl], val.class_id[sl])
        total += (pred - target_velocity(x0[sl], x1[sl])).square().sum().item()
    return total / x1.numel()


def pretrain_base(cfg: TrainConfig, mcfg: ModelConfig, data: PairData,
                  val: Optional[PairData] = None, base: Optional[BaseDiT] = None):
    """Single-branch flow matching on RGB only. Returns ``(base, history)``."""
    if cfg.phase != "base":
        raise ValueError("pretrain_base needs phase = base")
    if base is None:
        base = build_base(mcfg, torch_generator(cfg.seed, "init"))
    params = [p for p in base.parameters()]
    state = AdamState()
    batch_rng = substream(cfg.seed, "batch")
    t_rng = substream(cfg.seed, "timesteps")
    drop_rng = substream(cfg.seed, "drop")
    noise = torch_generator(cfg.seed, "noise")
    hist = History()
    running = []
    for step in range(cfg.steps + 1):
        if val is not None and step % cfg.eval_every == 0:
            vl = base_val_loss(base, val, cfg.seed)
            hist.log(phase="base", step=step, loss=float(np.mean(running)) if running else float("nan"),
                     val_loss=vl)
            running = []
        if step == cfg.steps:
            break
        idx = torch.from_numpy(batch_rng.integers(0, len(data), cfg.batch_size))
        x1 = to_latent(data.rgb[idx])
        cls, _ = drop_condition(data.class_id[idx], cfg.condition_drop_prob, mcfg.null_class, drop_rng)
        t = torch.from_numpy(sample_f(t_rng, cfg.batch_size)).float()
        x0 = torch.randn(x1.shape, generator=noise)
        pred = base(interpolate(x0, x1, t), t, cls)
        loss = (pred - target_velocity(x0, x1)).square().mean()
        _check_finite(loss, step, "base")
        base.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(params, [p.grad for p in params], state, cfg.learning_rate)
        running.append(loss.item())
    return base, hist


# ---------------------------------------------------------------------------
# joint phase


def joint_batch(data: PairData, idx, t_x, t_y, gen: torch.Generator):
    """Noisy inputs and velocity targets for one joint step (independent noise per branch)."""
    x1 = to_latent(data.rgb[idx])
    y1 = to_latent(encode_depth(data.disparity[idx]))
    x0 = torch.randn(x1.shape, generator=gen)
    y0 = torch.randn(y1.shape, generator=gen)
    xt = interpolate(x0, x1, t_x)
    yt = interpolate(y0, y1, t_y)
    return xt, yt, VelocityPair(target_velocity(x0, x1), target_velocity(y0, y1))


@torch.no_grad()
def joint_val_loss(model: JointModel, val: PairData, seed: int = 0, chunk: int = 100) -> float:
    rng = substream(seed, "eval", 2)
    gen = torch_generator(seed, "eval", 3)
    n = len(val)
    t_x, t_y, _ = sample_pairs(rng, n)
    t_x, t_y = torch.from_numpy(t_x).float(), torch.from_numpy(t_y).float()
    xt, yt, target = joint_batch(val, torch.arange(n), t_x, t_y, gen)
    total = 0.0
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        pred = model.forward_joint(xt[sl], yt[sl], (t_x[sl], t_y[sl]), val.class_id[sl])
        total += jcfm_loss(pred, VelocityPair(target.v_x[sl], target.v_y[sl])).item() * len(t_x[sl])
    return total / n


def build_joint(base: BaseDiT, cfg: TrainConfig) -> JointModel:
    """Wrap a private copy of ``base``; the caller's base is left untouched."""
    base = copy.deepcopy(base)
    base.cfg = replace(base.cfg, adaptive_weights=cfg.adaptive_weights_enabled)
    return JointModel(base, torch_generator(cfg.seed, "init", 1))


def train_joint(cfg: TrainConfig, base: Union[BaseDiT, JointModel], data: PairData,
                val: Optional[PairData] = None):
    """Freeze ``base`` and train LoRA, joint connections and depth heads with the JCFM loss.

    Returns ``(model, history)``.
    """
    if cfg.phase != "joint":
        raise ValueError("train_joint needs phase = joint")
    model = base if isinstance(base, JointModel) else build_joint(base, cfg)
    model.freeze_base()
    params = [p for p in model.parameters() if p.requires_grad]
    counts = trainable_groups(model)
    log.info("trainable parameters: %s (total %d)", counts, sum(counts.values()))
    checksum = base_checksum(model)
    state = AdamState()
    batch_rng = substream(cfg.seed, "batch", 1)
    t_rng = substream(cfg.seed, "timesteps", 1)
    drop_rng = substream(cfg.seed, "drop", 1)
    noise = torch_generator(cfg.seed, "noise", 1)
    hist = History()
    running = []
    for step in range(cfg.steps + 1):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            now = base_checksum(model)
            if now != checksum:
                raise TrainingError(f"frozen base parameters changed by step {step}")
            if val is not None:
                vl = joint_val_loss(model, val, cfg.seed)
                hist.log(phase="joint", step=step,
                         loss=float(np.mean(running)) if running else float("nan"), val_loss=vl)
            running = []
        if step == cfg.steps:
            break
        idx = torch.from_numpy(batch_rng.integers(0, len(data), cfg.batch_size))
        t_x, t_y, _ = sample_pairs(t_rng, cfg.batch_size, cfg.unbalanced_sampling_enabled)
        t_x, t_y = torch.from_numpy(t_x).float(), torch.from_numpy(t_y).float()
        cls, _ = drop_condition(data.class_id[idx], cfg.condition_drop_prob, model.null_class, drop_rng)
        xt, yt, target = joint_batch(data, idx, t_x, t_y, noise)
        loss = jcfm_loss(model.forward_joint(xt, yt, (t_x, t_y), cls), target)
        _check_finite(loss, step, "joint")
        model.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(params, [p.grad for p in params], state, cfg.learning_rate)
        running.append(loss.item())
    return model, hist


# ---------------------------------------------------------------------------
# checkpoints


def model_records(model: Union[BaseDiT, JointModel]) -> dict[str, np.ndarray]:
    rec = {}
    for k, v in model.cfg.as_dict().items():
        rec[f"config.{k}"] = np.asarray(float(v), dtype=np.float32)
    for name, t in model.state_dict().items():
        rec[name] = t.detach().cpu().numpy()
    return rec


def save_checkpoint(model: Union[BaseDiT, JointModel], path) -> None:
    io.write_checkpoint(path, model_records(model))


def load_checkpoint(path) -> Union[BaseDiT, JointModel]:
    """Rebuild a base or joint model from a checkpoint file."""
    rec = io.read_checkpoint(path)
    cfg_vals = {k.removeprefix("config."): float(v.item()) for k, v in rec.items() if k.startswith("config.")}
    if not cfg_vals:
        raise io.FormatError(f"{path}: checkpoint carries no config records")
    ints = ("image_size", "patch", "d_model", "heads", "mm_blocks", "p_blocks", "lora_rank", "num_classes")
    for k in ints:
        if k in cfg_vals:
            cfg_vals[k] = int(cfg_vals[k])
    if "adaptive_weights" in cfg_vals:
        cfg_vals["adaptive_weights"] = bool(cfg_vals["adaptive_weights"])
    cfg = config_from_dict(cfg_vals)
    base = BaseDiT(cfg)
    is_joint = any(k.startswith("joint.") for k in rec)
    model: Union[BaseDiT, JointModel] = JointModel(base) if is_joint else base
    tensors = {k: torch.from_numpy(v) for k, v in rec.items() if not k.startswith("config.")}
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise io.FormatError(f"{path}: checkpoint does not match the model "
                             f"(missing {missing[:3]}, unexpected {unexpected[:3]})")
    return model
