"""Transformer pieces shared by the base network and the joint model.

Token tensors are (B, N, D). Every linear layer that the depth branch adapts
is an :class:`AdaptedLinear`: the frozen base weight plus an optional
low-rank delta that is applied only when the caller asks for the adapted
path. The RGB branch never takes that path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS_WEIGHTS = 1e-8


# ---------------------------------------------------------------------------
# adaptive scheduling weights


@dataclass
class SchedulingWeights:
    w_x: torch.Tensor
    w_y: torch.Tensor


def adaptive_weights(t_x, t_y, alpha: float = 3.0) -> SchedulingWeights:
    """Weights for the cross-branch terms; the noisier branch gets the larger one.

    ``u = t_y / (t_x + t_y)`` (``1/2`` when the sum is below 1e-8),
    ``w_x = sigmoid(alpha (u - 1/2))`` and ``w_y = sigmoid(alpha ((1 - u) - 1/2))``.
    Accepts floats or tensors of matching shape.
    """
    t_x = torch.as_tensor(t_x, dtype=torch.float64)
    t_y = torch.as_tensor(t_y, dtype=torch.float64)
    total = t_x + t_y
    safe = torch.where(total >= EPS_WEIGHTS, total, torch.ones_like(total))
    u = torch.where(total >= EPS_WEIGHTS, t_y / safe, torch.full_like(total, 0.5))
    return SchedulingWeights(
        torch.sigmoid(alpha * (u - 0.5)),
        torch.sigmoid(alpha * ((1.0 - u) - 0.5)),
    )


# ---------------------------------------------------------------------------
# attention


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic attention matrix for head-split (B, H, N, Dh) inputs."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Scaled dot-product attention over (B, N, D) tokens, heads concatenated."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(
            f"attention: incompatible q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}"
        )
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    return merge_heads(attention_weights(qh, kh) @ vh)


# ---------------------------------------------------------------------------
# low-rank adaptation


@dataclass
class LoraAdapter:
    down: torch.Tensor  # (rank, d_in)
    up: torch.Tensor  # (d_out, rank), zero at construction
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int, alpha: Optional[float] = None,
               generator: Optional[torch.Generator] = None, dtype=torch.float32):
        if rank < 1:
            raise ValueError(f"LoRA rank must be positive, got {rank}")
        down = torch.randn(rank, d_in, generator=generator, dtype=dtype) / math.sqrt(d_in)
        up = torch.zeros(d_out, rank, dtype=dtype)
        return cls(down, up, rank, rank / 2 if alpha is None else float(alpha))


def lora_forward(w_base: torch.Tensor, adapter: LoraAdapter, x: torch.Tensor) -> torch.Tensor:
    """``(W + (alpha/rank) up @ down) @ x`` for a column vector or a (d_in, n) matrix."""
    if adapter.down.shape[1] != w_base.shape[1] or adapter.up.shape[0] != w_base.shape[0]:
        raise ValueError("LoRA adapter does not conform to the base weight")
    if x.shape[0] != w_base.shape[1]:
        raise ValueError(f"input rows {x.shape[0]} != base input dim {w_base.shape[1]}")
    return (w_base + adapter.scale * (adapter.up @ adapter.down)) @ x


class AdaptedLinear(nn.Module):
    """A base ``nn.Linear`` with an optional LoRA delta for the depth branch."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out, bias=bias)
        self.rank = 0
        self.lora_scale = 0.0

    def add_lora(self, rank: int, alpha: float, generator: Optional[torch.Generator] = None):
        d_out, d_in = self.linear.weight.shape
        a = LoraAdapter.create(d_in, d_out, rank, alpha, generator, self.linear.weight.dtype)
        self.lora_down = nn.Parameter(a.down)
        self.lora_up = nn.Parameter(a.up)
        self.rank = rank
        self.lora_scale = a.scale

    def forward(self, x: torch.Tensor, adapted: bool = False) -> torch.Tensor:
        out = self.linear(x)
        if adapted and self.rank:
            out = out + self.lora_scale * ((x @ self.lora_down.t()) @ self.lora_up.t())
        return out


# ---------------------------------------------------------------------------
# embeddings


def timestep_embedding(t, dim: int, max_period: float = 10000.0, time_scale: float = 1000.0):
    """Interleaved ``[sin, cos]`` features of ``time_scale * t`` at geometric frequencies."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float32)
    scalar = t.ndim == 0
    t = t.reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = (time_scale * t.to(torch.float64))[:, None] * freqs[None]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(len(t), dim)
    emb = emb.to(t.dtype)
    return emb[0] if scalar else emb


def sincos_2d(rows: int, cols: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal position table, (rows*cols, dim)."""
    if dim % 4:
        raise ValueError("2-D position encoding needs dim divisible by 4")
    r = torch.arange(rows, dtype=torch.float64).repeat_interleave(cols)
    c = torch.arange(cols, dtype=torch.float64).repeat(rows)
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    out = torch.cat(
        [torch.sin(r[:, None] * freqs), torch.cos(r[:, None] * freqs),
         torch.sin(c[:, None] * freqs), torch.cos(c[:, None] * freqs)],
        dim=1,
    )
    return out.to(torch.float32)


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (B, rows*cols, D)
    layout: tuple[int, int]

    def __post_init__(self):
        if self.tokens.shape[-2] != self.layout[0] * self.layout[1]:
            raise ValueError(f"{self.tokens.shape[-2]} tokens do not fill layout {self.layout}")


def patchify(grid: torch.Tensor, patch: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """(B, C, H, W) -> (B, N, C*patch*patch) raw patches in row-major token order."""
    b, c, h, w = grid.shape
    if h % patch or w % patch:
        raise ValueError(f"grid {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    x = grid.reshape(b, c, rows, patch, cols, patch).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, rows * cols, c * patch * patch), (rows, cols)


def unpatchify(tokens: torch.Tensor, layout: tuple[int, int], patch: int, channels: int):
    b, n, _ = tokens.shape
    rows, cols = layout
    if n != rows * cols:
        raise ValueError(f"{n} tokens do not fill layout {layout}")
    x = tokens.reshape(b, rows, cols, channels, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, rows * patch, cols * patch)


def patch_embed(grid: torch.Tensor, patch: int, proj: Optional[nn.Module] = None) -> TokenGrid:
    raw, layout = patchify(grid, patch)
    return TokenGrid(raw if proj is None else proj(raw), layout)


def unpatch(tokens: TokenGrid, patch: int, channels: int, proj: Optional[nn.Module] = None):
    raw = tokens.tokens if proj is None else proj(tokens.tokens)
    return unpatchify(raw, tokens.layout, patch, channels)


# ---------------------------------------------------------------------------
# modulation


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """LayerNorm without affine, then ``(1 + scale) * x + shift`` per sample."""
    x = F.layer_norm(x, x.shape[-1:], eps=1e-6)
    return x * (1 + scale[:, None]) + shift[:, None]


class Modulation(AdaptedLinear):
    """``silu(vec) -> n_chunks`` vectors of width ``dim`` (shift/scale/gate triples)."""

    def __init__(self, dim: int, n_chunks: int):
        super().__init__(dim, n_chunks * dim)
        self.n_chunks = n_chunks

    def forward(self, vec: torch.Tensor, adapted: bool = False):
        return super().forward(F.silu(vec), adapted).chunk(self.n_chunks, dim=-1)


def adaln_modulate(tokens: TokenGrid, cond: torch.Tensor, head: Modulation) -> TokenGrid:
    """Normalize and shift/scale tokens by the first two chunks of ``head(cond)``."""
    shift, scale = head(cond)[:2]
    return TokenGrid(modulate(tokens.tokens, shift, scale), tokens.layout)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class TimestepMlp(nn.Module):
    """Sinusoidal features -> conditioning vector; both layers adaptable."""

    def __init__(self, freq_dim: int, dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = AdaptedLinear(freq_dim, dim)
        self.fc2 = AdaptedLinear(dim, dim)

    def forward(self, t: torch.Tensor, adapted: bool = False):
        e = timestep_embedding(t, self.freq_dim).to(self.fc1.linear.weight.dtype)
        return self.fc2(F.silu(self.fc1(e, adapted)), adapted)


# ---------------------------------------------------------------------------
# joint connection


def cross_attention(q_from: torch.Tensor, kv_from: tuple[torch.Tensor, torch.Tensor], heads: int):
    """Queries of one branch attend into the keys/values of the other branch.

    This is the one place the exchange direction is fixed; swapping which
    branch supplies the queries is a change to this function only.
    """
    k, v = kv_from
    return attention(q_from, k, v, heads)


class JointConnection(nn.Module):
    """Per-block cross-branch exchange with zero-initialized output projections."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.proj_x = nn.Linear(dim, dim, bias=False)
        self.proj_y = nn.Linear(dim, dim, bias=False)
        nn.init.zeros_(self.proj_x.weight)
        nn.init.zeros_(self.proj_y.weight)

    def forward(self, qkv_x, qkv_y, w: SchedulingWeights):
        """Return the weighted joint terms ``(w_x P_x(...), w_y P_y(...))`` for image tokens."""
        q_x, k_x, v_x = qkv_x
        q_y, k_y, v_y = qkv_y
        dtype = q_x.dtype
        w_x = w.w_x.to(dtype).reshape(-1, 1, 1)
        w_y = w.w_y.to(dtype).reshape(-1, 1, 1)
        jx = self.proj_x(cross_attention(q_x, (k_y, v_y), self.heads))
        jy = self.proj_y(cross_attention(q_y, (k_x, v_x), self.heads))
        return w_x * jx, w_y * jy


def joint_cross_attention(s_x: TokenGrid, s_y: TokenGrid, w: SchedulingWeights,
                          qkv: nn.Module, conn: JointConnection):
    """Standalone form of the exchange: ``G = Attn(S) + w * P(CrossAttn)`` per branch.

    ``qkv`` maps tokens to concatenated (q, k, v); the same projection serves
    both branches here.
    """
    if s_x.tokens.shape != s_y.tokens.shape:
        raise ValueError("joint_cross_attention: token grids differ in shape")
    heads = conn.heads
    qkv_x = qkv(s_x.tokens).chunk(3, dim=-1)
    qkv_y = qkv(s_y.tokens).chunk(3, dim=-1)
    self_x = attention(*qkv_x, heads)
    self_y = attention(*qkv_y, heads)
    jx, jy = conn(qkv_x, qkv_y, w)
    return TokenGrid(self_x + jx, s_x.layout), TokenGrid(self_y + jy, s_y.layout)


# ---------------------------------------------------------------------------
# transformer blocks
#
# Each block runs in three phases so the joint model can splice the
# cross-branch term between them: ``pre`` (modulate + qkv), the attention
# itself, and ``post`` (output projection, gated residual, MLP).


class MMBlock(nn.Module):
    """Two-stream block: condition tokens and image tokens with their own weights,
    attending jointly over the concatenation."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.img_mod = Modulation(dim, 6)
        self.ctx_mod = Modulation(dim, 6)
        self.img_qkv = AdaptedLinear(dim, 3 * dim)
        self.ctx_qkv = AdaptedLinear(dim, 3 * dim)
        self.img_proj = AdaptedLinear(dim, dim)
        self.ctx_proj = AdaptedLinear(dim, dim)
        self.img_mlp = Mlp(dim, mlp_ratio)
        self.ctx_mlp = Mlp(dim, mlp_ratio)

    def adapted_layers(self):
        return [self.img_mod, self.ctx_mod, self.img_qkv, self.ctx_qkv, self.img_proj, self.ctx_proj]

    def pre(self, img, ctx, vec, adapted=False):
        im = self.img_mod(vec, adapted)
        cm = self.ctx_mod(vec, adapted)
        qkv_i = self.img_qkv(modulate(img, im[0], im[1]), adapted).chunk(3, dim=-1)
        qkv_c = self.ctx_qkv(modulate(ctx, cm[0], cm[1]), adapted).chunk(3, dim=-1)
        q, k, v = (torch.cat([c, i], dim=1) for c, i in zip(qkv_c, qkv_i))
        state = (img, ctx, im, cm, ctx.shape[1])
        return (q, k, v), qkv_i, state

    def attend(self, qkv):
        return attention(*qkv, self.heads)

    def post(self, attn, state, joint=None, adapted=False):
        img, ctx, im, cm, n_ctx = state
        a_ctx, a_img = attn[:, :n_ctx], attn[:, n_ctx:]
        if joint is not None:
            a_img = a_img + joint
        img = img + im[2][:, None] * self.img_proj(a_img, adapted)
        img = img + im[5][:, None] * self.img_mlp(modulate(img, im[3], im[4]))
        ctx = ctx + cm[2][:, None] * self.ctx_proj(a_ctx, adapted)
        ctx = ctx + cm[5][:, None] * self.ctx_mlp(modulate(ctx, cm[3], cm[4]))
        return img, ctx

    def forward(self, img, ctx, vec, adapted=False):
        qkv, _, state = self.pre(img, ctx, vec, adapted)
        return self.post(self.attend(qkv), state, None, adapted)


class PBlock(nn.Module):
    """Single-stream block with attention and MLP run in parallel from one fused
    input projection and merged by one fused output projection."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.dim = dim
        self.hidden = mlp_ratio * dim
        self.mod = Modulation(dim, 3)
        self.linear1 = AdaptedLinear(dim, 3 * dim + self.hidden)
        self.linear2 = AdaptedLinear(dim + self.hidden, dim)

    def adapted_layers(self):
        return [self.mod, self.linear1, self.linear2]

    def pre(self, img, ctx, vec, adapted=False):
        shift, scale, gate = self.mod(vec, adapted)
        x = torch.cat([ctx, img], dim=1)
        h = self.linear1(modulate(x, shift, scale), adapted)
        qkv, mlp_in = h.split([3 * self.dim, self.hidden], dim=-1)
        q, k, v = qkv.chunk(3, dim=-1)
        n_ctx = ctx.shape[1]
        qkv_i = (q[:, n_ctx:], k[:, n_ctx:], v[:, n_ctx:])
        return (q, k, v), qkv_i, (x, gate, mlp_in, n_ctx)

    def attend(self, qkv):
        return attention(*qkv, self.heads)

    def post(self, attn, state, joint=None, adapted=False):
        x, gate, mlp_in, n_ctx = state
        if joint is not None:
            attn = torch.cat([attn[:, :n_ctx], attn[:, n_ctx:] + joint], dim=1)
        h = torch.cat([attn, F.gelu(mlp_in, approximate="tanh")], dim=-1)
        x = x + gate[:, None] * self.linear2(h, adapted)
        return x[:, n_ctx:], x[:, :n_ctx]

    def forward(self, img, ctx, vec, adapted=False):
        qkv, _, state = self.pre(img, ctx, vec, adapted)
        return self.post(self.attend(qkv), state, None, adapted)
