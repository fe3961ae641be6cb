"""Dual-branch diffusion transformer.

:class:`BaseDiT` is the single-modality RGB network that gets pretrained and
then frozen. :class:`JointModel` wraps it with a depth branch that reuses every
frozen weight, adds LoRA deltas on the modulation / qkv / attention-output /
conditioning-input layers, owns its own patch input and output heads, and
exchanges information with the RGB branch through one
:class:`~jointflow.blocks.JointConnection` per block.

All grids handed to the networks are latents: data in [0, 1] mapped to
[-1, 1] by :func:`to_latent`.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .blocks import (
    AdaptedLinear,
    JointConnection,
    MMBlock,
    Modulation,
    PBlock,
    SchedulingWeights,
    TimestepMlp,
    adaptive_weights,
    modulate,
    patchify,
    sincos_2d,
    unpatchify,
)
from .flow import TimestepPair, VelocityPair


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    d_model: int = 64
    heads: int = 4
    mm_blocks: int = 4
    p_blocks: int = 2
    lora_rank: int = 8
    lora_alpha: Optional[float] = None  # defaults to lora_rank / 2
    alpha_schedule: float = 3.0
    num_classes: int = 8
    adaptive_weights: bool = True

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for the 2-D position table")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.lora_alpha is None:
            self.lora_alpha = self.lora_rank / 2

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def layout(self) -> tuple[int, int]:
        n = self.image_size // self.patch
        return (n, n)

    def as_dict(self) -> dict:
        return asdict(self)


def to_latent(v: torch.Tensor) -> torch.Tensor:
    return 2.0 * v - 1.0


def from_latent(z: torch.Tensor) -> torch.Tensor:
    return (z + 1.0) / 2.0


def encode_depth(d: torch.Tensor) -> torch.Tensor:
    """(..., H, W) disparity -> (..., 3, H, W) by channel replication."""
    return d.unsqueeze(-3).expand(*d.shape[:-2], 3, *d.shape[-2:]).clone()


def decode_depth(g: torch.Tensor) -> torch.Tensor:
    """(..., 3, H, W) -> (..., H, W) channel mean.

    Where all three channels agree the shared value is returned as is, so
    ``decode_depth(encode_depth(d))`` is exact (a float mean of three equal
    values need not be).
    """
    c0, c1, c2 = g.unbind(dim=-3)
    return torch.where((c0 == c1) & (c1 == c2), c0, g.mean(dim=-3))


def _as_time(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32)
    return t.expand(batch) if t.ndim == 0 else t


class BaseDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d_model, cfg.patch
        self.img_in = nn.Linear(3 * p * p, d)
        self.time_in = TimestepMlp(d, d)
        self.class_vec = nn.Embedding(cfg.num_classes + 1, d)
        self.class_tok = nn.Embedding(cfg.num_classes + 1, d)
        self.ctx_in = AdaptedLinear(d, d)
        self.blocks = nn.ModuleList(
            [MMBlock(d, cfg.heads) for _ in range(cfg.mm_blocks)]
            + [PBlock(d, cfg.heads) for _ in range(cfg.p_blocks)]
        )
        self.final_mod = Modulation(d, 2)
        self.proj_out = nn.Linear(d, 3 * p * p)
        self._pos_cache: dict[tuple[int, int], torch.Tensor] = {}

    def init_weights(self, generator: torch.Generator):
        for name, prm in self.named_parameters():
            if prm.ndim == 2 and "class_" in name:
                nn.init.normal_(prm, std=0.02, generator=generator)
            elif prm.ndim == 2:
                nn.init.xavier_uniform_(prm, generator=generator)
            else:
                nn.init.zeros_(prm)
        # adaLN-zero: every block starts as the identity, output starts at zero
        for blk in self.blocks:
            for m in blk.modules():
                if isinstance(m, Modulation):
                    nn.init.zeros_(m.linear.weight)
        nn.init.zeros_(self.final_mod.linear.weight)
        nn.init.zeros_(self.proj_out.weight)

    def pos(self, layout: tuple[int, int], dtype) -> torch.Tensor:
        if layout not in self._pos_cache:
            self._pos_cache[layout] = sincos_2d(*layout, self.cfg.d_model)
        return self._pos_cache[layout].to(dtype)

    def check_class(self, class_id: torch.Tensor):
        if class_id.dtype not in (torch.int64, torch.int32):
            raise TypeError("class ids must be integer tensors")
        if class_id.numel() and (class_id.min() < 0 or class_id.max() > self.cfg.num_classes):
            raise ValueError(f"class id out of range [0, {self.cfg.num_classes}]")

    def check_grid(self, grid: torch.Tensor, what: str):
        p = self.cfg.patch
        if grid.ndim != 4 or grid.shape[1] != 3 or grid.shape[2] % p or grid.shape[3] % p:
            raise ValueError(f"{what}: expected (B, 3, H, W) with H, W divisible by {p}, "
                             f"got {tuple(grid.shape)}")

    # pieces shared with the joint model

    def embed(self, grid, head: nn.Linear):
        tokens, layout = patchify(grid, self.cfg.patch)
        return head(tokens) + self.pos(layout, tokens.dtype), layout

    def condition(self, t, class_id, adapted=False):
        t = _as_time(t, class_id.shape[0])
        vec = self.time_in(t, adapted) + self.class_vec(class_id)
        ctx = self.ctx_in(self.class_tok(class_id), adapted)[:, None]
        return vec, ctx

    def head(self, img, vec, layout, out: nn.Linear, adapted=False):
        shift, scale = self.final_mod(vec, adapted)
        return unpatchify(out(modulate(img, shift, scale)), layout, self.cfg.patch, 3)

    def forward(self, x_t: torch.Tensor, t, class_id: torch.Tensor) -> torch.Tensor:
        self.check_grid(x_t, "forward_base")
        self.check_class(class_id)
        img, layout = self.embed(x_t, self.img_in)
        vec, ctx = self.condition(t, class_id)
        for blk in self.blocks:
            img, ctx = blk(img, ctx, vec)
        return self.head(img, vec, layout, self.proj_out)

    def adapted_layers(self) -> Iterator[AdaptedLinear]:
        yield self.time_in.fc1
        yield self.time_in.fc2
        yield self.ctx_in
        for blk in self.blocks:
            yield from blk.adapted_layers()
        yield self.final_mod


class JointModel(nn.Module):
    """Frozen RGB base + LoRA depth branch + joint connections."""

    def __init__(self, base: BaseDiT, generator: Optional[torch.Generator] = None):
        super().__init__()
        cfg = base.cfg
        self.cfg = cfg
        self.base = base
        for layer in base.adapted_layers():
            if not layer.rank:
                layer.add_lora(cfg.lora_rank, cfg.lora_alpha, generator)
        self.joint = nn.ModuleList([JointConnection(cfg.d_model, cfg.heads) for _ in base.blocks])
        # depth I/O heads start as copies of the RGB heads
        self.depth_in = copy.deepcopy(base.img_in)
        self.depth_out = copy.deepcopy(base.proj_out)
        self.freeze_base()

    @property
    def null_class(self) -> int:
        return self.cfg.null_class

    def freeze_base(self):
        for name, prm in self.named_parameters():
            prm.requires_grad_(not is_base_param(name))

    def forward_base(self, x_t, t, class_id):
        return self.base(x_t, t, class_id)

    def scheduling_weights(self, t_x: torch.Tensor, t_y: torch.Tensor) -> SchedulingWeights:
        if not self.cfg.adaptive_weights:
            one = torch.ones_like(t_x, dtype=torch.float64)
            return SchedulingWeights(one, one.clone())
        return adaptive_weights(t_x, t_y, self.cfg.alpha_schedule)

    def _run(self, x_t, y_t, pair, class_id, stop_at: Optional[int] = None):
        base = self.base
        base.check_grid(x_t, "forward_joint x")
        base.check_grid(y_t, "forward_joint y")
        if x_t.shape != y_t.shape:
            raise ValueError(f"branch shapes differ: {tuple(x_t.shape)} vs {tuple(y_t.shape)}")
        base.check_class(class_id)
        b = x_t.shape[0]
        t_x, t_y = (pair.t_x, pair.t_y) if isinstance(pair, TimestepPair) else pair
        t_x, t_y = _as_time(t_x, b), _as_time(t_y, b)

        img_x, layout = base.embed(x_t, base.img_in)
        img_y, _ = base.embed(y_t, self.depth_in)
        vec_x, ctx_x = base.condition(t_x, class_id)
        vec_y, ctx_y = base.condition(t_y, class_id, adapted=True)
        w = self.scheduling_weights(t_x, t_y)

        for i, (blk, conn) in enumerate(zip(base.blocks, self.joint)):
            qkv_x, img_qkv_x, st_x = blk.pre(img_x, ctx_x, vec_x)
            qkv_y, img_qkv_y, st_y = blk.pre(img_y, ctx_y, vec_y, adapted=True)
            a_x, a_y = blk.attend(qkv_x), blk.attend(qkv_y)
            j_x, j_y = conn(img_qkv_x, img_qkv_y, w)
            img_x, ctx_x = blk.post(a_x, st_x, j_x)
            img_y, ctx_y = blk.post(a_y, st_y, j_y, adapted=True)
            if i == stop_at:
                return img_x, img_y, layout

        v_x = base.head(img_x, vec_x, layout, base.proj_out)
        v_y = base.head(img_y, vec_y, layout, self.depth_out, adapted=True)
        return VelocityPair(v_x, v_y)

    def forward_joint(self, x_t, y_t, pair: Union[TimestepPair, tuple], class_id) -> VelocityPair:
        """Per-branch velocities; ``pair`` is a TimestepPair or per-sample ``(t_x, t_y)`` tensors."""
        return self._run(x_t, y_t, pair, class_id)

    def forward(self, x_t, y_t, pair, class_id):
        return self._run(x_t, y_t, pair, class_id)

    def block_tokens(self, x_t, y_t, pair, class_id, block_index: int):
        """Image-token activations of both branches after block ``block_index``."""
        n = len(self.base.blocks)
        if not 0 <= block_index < n:
            raise IndexError(f"block index {block_index} outside [0, {n})")
        return self._run(x_t, y_t, pair, class_id, stop_at=block_index)


def is_base_param(name: str) -> bool:
    return name.startswith("base.") and "lora_" not in name


def trainable_groups(model: JointModel) -> dict[str, int]:
    """Trainable parameter counts grouped as lora / joint / depth_heads."""
    out = {"lora": 0, "joint": 0, "depth_heads": 0}
    for name, prm in model.named_parameters():
        if not prm.requires_grad:
            continue
        if "lora_" in name:
            out["lora"] += prm.numel()
        elif name.startswith("joint."):
            out["joint"] += prm.numel()
        elif name.startswith(("depth_in.", "depth_out.")):
            out["depth_heads"] += prm.numel()
        else:
            raise AssertionError(f"unexpected trainable parameter {name}")
    return out


def base_checksum(model: Union[JointModel, BaseDiT]) -> str:
    """SHA-256 over the frozen base parameters (names and raw bytes)."""
    h = hashlib.sha256()
    items = model.named_parameters()
    for name, prm in sorted(items, key=lambda kv: kv[0]):
        if isinstance(model, JointModel) and not is_base_param(name):
            continue
        if "lora_" in name:
            continue
        h.update(name.removeprefix("base.").encode())
        h.update(np.ascontiguousarray(prm.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def build_base(cfg: ModelConfig, generator: torch.Generator) -> BaseDiT:
    base = BaseDiT(cfg)
    base.init_weights(generator)
    return base


def config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in d.items() if k in known})
