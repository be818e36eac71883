"""Decoder-only transformer over mixed patch/token sequences.

Llama-style blocks (RMSNorm pre-norm, SwiGLU feed-forward, rotary positions,
grouped-query attention) with two input embeddings and two output heads: a
regression head that predicts the next normalized patch and a classification
head that predicts the next token.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CorruptCheckpoint, OddHeadDim, ShapeError, UnknownId


@dataclass
class ModelConfig:
    hidden_size: int = 128
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 4
    intermediate_size: int = 352
    vocab_size: int = 512
    max_positions: int = 256
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5
    patch_px: int = 16
    channels: int = 3
    initializer_range: float = 0.02

    def __post_init__(self):
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise OddHeadDim(f"head dim {self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * self.channels

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """The 24-layer configuration used for the full-size models."""
        return cls(hidden_size=1024, n_layers=24, n_heads=16, n_kv_heads=8, intermediate_size=2816,
                   vocab_size=32000, max_positions=1024, rope_theta=10000.0, rms_eps=1e-5)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --- functional building blocks ----------------------------------------------

def rmsnorm(x: torch.Tensor, weight: torch.Tensor, eps: float) -> torch.Tensor:
    return weight * x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)


def swiglu_ffn(x, w_gate, w_up, w_down):
    """``W_down(silu(W_gate x) * W_up x)``; weights use the (out, in) layout."""
    return torch.nn.functional.silu(x @ w_gate.T) * (x @ w_up.T) @ w_down.T


def rope_angles(positions: torch.Tensor, head_dim: int, theta: float, dtype=torch.float32):
    """cos/sin of shape ``positions.shape + (head_dim // 2,)``."""
    if head_dim % 2:
        raise OddHeadDim(f"head dim {head_dim} is odd")
    inv = theta ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = positions.to(torch.float64)[..., None] * inv
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def rope_apply(x: torch.Tensor, positions, theta: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by ``position * theta**(-2i/d)``.

    ``positions`` must broadcast against ``x.shape[:-1]``.
    """
    d = x.shape[-1]
    positions = torch.as_tensor(positions)
    cos, sin = rope_angles(positions, d, theta, x.dtype)
    pairs = x.unflatten(-1, (d // 2, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    return torch.stack((a * cos - b * sin, a * sin + b * cos), dim=-1).flatten(-2)


def gqa_attention(hidden, wq, wk, wv, wo, n_heads: int, n_kv_heads: int,
                  attention_mask=None, positions=None, causal: bool = True,
                  rope_theta: float = 10000.0):
    """Grouped-query self-attention over ``hidden`` of shape (B, N, D).

    Query head ``h`` reads key/value head ``h // (n_heads // n_kv_heads)``.
    Positions whose ``attention_mask`` is False are never used as keys; a query
    row with no usable key gets a zero context vector.
    """
    if hidden.dim() != 3:
        raise ShapeError("hidden must be (batch, seq, dim)")
    if n_heads % n_kv_heads:
        raise ShapeError("n_heads must be divisible by n_kv_heads")
    B, N, _ = hidden.shape
    hd = wq.shape[0] // n_heads
    if wk.shape[0] != n_kv_heads * hd or wv.shape[0] != n_kv_heads * hd:
        raise ShapeError("key/value projections do not match n_kv_heads * head_dim")
    if positions is None:
        positions = torch.arange(N).expand(B, N)
    q = (hidden @ wq.T).view(B, N, n_heads, hd).transpose(1, 2)
    k = (hidden @ wk.T).view(B, N, n_kv_heads, hd).transpose(1, 2)
    v = (hidden @ wv.T).view(B, N, n_kv_heads, hd).transpose(1, 2)
    pos = positions[:, None, :]
    q = rope_apply(q, pos, rope_theta)
    k = rope_apply(k, pos, rope_theta)
    group = n_heads // n_kv_heads
    if group > 1:
        k = k.repeat_interleave(group, dim=1)
        v = v.repeat_interleave(group, dim=1)

    allowed = torch.ones(B, N, N, dtype=torch.bool, device=hidden.device)
    if causal:
        allowed = allowed & torch.ones(N, N, dtype=torch.bool, device=hidden.device).tril()
    if attention_mask is not None:
        allowed = allowed & attention_mask[:, None, :].bool()
    allowed = allowed[:, None]
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
    probs = torch.softmax(scores, dim=-1) * allowed
    ctx = (probs @ v).transpose(1, 2).reshape(B, N, n_heads * hd)
    return ctx @ wo.T


# --- modules -----------------------------------------------------------------

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.weight, self.eps)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        hd = cfg.head_dim
        self.wq = nn.Linear(cfg.hidden_size, cfg.n_heads * hd, bias=False)
        self.wk = nn.Linear(cfg.hidden_size, cfg.n_kv_heads * hd, bias=False)
        self.wv = nn.Linear(cfg.hidden_size, cfg.n_kv_heads * hd, bias=False)
        self.wo = nn.Linear(cfg.n_heads * hd, cfg.hidden_size, bias=False)

    def forward(self, x, attention_mask=None, positions=None):
        c = self.cfg
        return gqa_attention(x, self.wq.weight, self.wk.weight, self.wv.weight, self.wo.weight,
                             c.n_heads, c.n_kv_heads, attention_mask, positions, True, c.rope_theta)


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w_gate = nn.Linear(cfg.hidden_size, cfg.intermediate_size, bias=False)
        self.w_up = nn.Linear(cfg.hidden_size, cfg.intermediate_size, bias=False)
        self.w_down = nn.Linear(cfg.intermediate_size, cfg.hidden_size, bias=False)

    def forward(self, x):
        return swiglu_ffn(x, self.w_gate.weight, self.w_up.weight, self.w_down.weight)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.hidden_size, cfg.rms_eps)
        self.attn = Attention(cfg)
        self.ffn_norm = RMSNorm(cfg.hidden_size, cfg.rms_eps)
        self.ffn = FeedForward(cfg)

    def forward(self, x, attention_mask=None, positions=None):
        x = x + self.attn(self.attn_norm(x), attention_mask, positions)
        return x + self.ffn(self.ffn_norm(x))


@dataclass
class SequenceInput:
    """A batch of mixed sequences. Unused slots (tokens at patch positions and
    vice versa) may hold anything; ``is_patch`` selects the embedding."""

    is_patch: torch.Tensor  # (B, N) bool
    attention_mask: torch.Tensor  # (B, N) bool
    positions: torch.Tensor  # (B, N) long
    token_ids: torch.Tensor | None = None  # (B, N) long
    patches: torch.Tensor | None = None  # (B, N, patch_dim)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.is_patch.shape)

    @classmethod
    def from_tokens(cls, ids, attention_mask=None) -> "SequenceInput":
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        B, N = ids.shape
        mask = torch.ones(B, N, dtype=torch.bool) if attention_mask is None else \
            torch.as_tensor(attention_mask, dtype=torch.bool).reshape(B, N)
        return cls(torch.zeros(B, N, dtype=torch.bool), mask, torch.arange(N).expand(B, N), token_ids=ids)

    @classmethod
    def from_patches(cls, patches, attention_mask=None) -> "SequenceInput":
        patches = torch.as_tensor(patches)
        if patches.dim() == 2:
            patches = patches[None]
        B, N, _ = patches.shape
        mask = torch.ones(B, N, dtype=torch.bool) if attention_mask is None else \
            torch.as_tensor(attention_mask, dtype=torch.bool).reshape(B, N)
        return cls(torch.ones(B, N, dtype=torch.bool), mask, torch.arange(N).expand(B, N), patches=patches)


class PixelTextGPT(nn.Module):
    """The shared backbone with patch projection, token table and both heads.

    ``tie_word_embeddings`` is false: the classification head owns its weights.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.hidden_size)
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.hidden_size)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.hidden_size, cfg.rms_eps)
        self.regression_head = nn.Linear(cfg.hidden_size, cfg.patch_dim)
        self.classification_head = nn.Linear(cfg.hidden_size, cfg.vocab_size)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        std = self.cfg.initializer_range
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("norm.weight") or name.endswith("_norm.weight"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.normal_(0.0, std, generator=generator)

    def embed(self, inp: SequenceInput) -> torch.Tensor:
        cfg = self.cfg
        B, N = inp.shape
        dtype = self.patch_proj.weight.dtype
        out = torch.zeros(B, N, cfg.hidden_size, dtype=dtype)
        is_patch = inp.is_patch.bool()
        if is_patch.any():
            if inp.patches is None or inp.patches.shape[-1] != cfg.patch_dim:
                got = None if inp.patches is None else inp.patches.shape[-1]
                raise ShapeError(f"patch vectors must have dimension {cfg.patch_dim}, got {got}")
            out = torch.where(is_patch[..., None], self.patch_proj(inp.patches.to(dtype)), out)
        if (~is_patch).any():
            if inp.token_ids is None:
                raise ShapeError("token positions present but no token ids given")
            ids = inp.token_ids.long()
            used = ids[~is_patch]
            if used.numel() and (used.min() < 0 or used.max() >= cfg.vocab_size):
                raise UnknownId(f"token id outside [0, {cfg.vocab_size})")
            out = torch.where(is_patch[..., None], out, self.tok_embed(ids.masked_fill(is_patch, 0)))
        return out

    def forward(self, inp: SequenceInput) -> torch.Tensor:
        """Final-norm hidden states of shape (B, N, D)."""
        N = inp.shape[1]
        if N > self.cfg.max_positions:
            raise ShapeError(f"sequence of length {N} exceeds max_positions {self.cfg.max_positions}")
        x = self.embed(inp)
        for block in self.blocks:
            x = block(x, inp.attention_mask, inp.positions)
        return self.norm(x)


def regression_head(hidden: torch.Tensor, model: PixelTextGPT) -> torch.Tensor:
    if hidden.shape[-1] != model.cfg.hidden_size:
        raise ShapeError("hidden size mismatch")
    return model.regression_head(hidden)


def classification_head(hidden: torch.Tensor, model: PixelTextGPT) -> torch.Tensor:
    if hidden.shape[-1] != model.cfg.hidden_size:
        raise ShapeError("hidden size mismatch")
    return model.classification_head(hidden)


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"PXCKPT01"


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Magic, u32-length JSON metadata, then (u16 name length, name, u32 rank, u32 dims, f32 values)."""
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad checkpoint magic")
    try:
        (n,) = struct.unpack_from("<I", data, 8)
        meta = json.loads(data[12:12 + n].decode("utf-8"))
        off = 12 + n
        tensors = {}
        while off < len(data):
            (ln,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + ln].decode("utf-8")
            off += 2 + ln
            (rank,) = struct.unpack_from("<I", data, off)
            dims = struct.unpack_from(f"<{rank}I", data, off + 4)
            off += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if off + 4 * count > len(data):
                raise CorruptCheckpoint(f"{path}: tensor {name!r} is truncated")
            arr = np.frombuffer(data, "<f4", count, off).reshape(dims)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
            off += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    return meta, tensors


def save_model(path: str | Path, model: PixelTextGPT, **extra) -> None:
    save_checkpoint(path, dict(model.state_dict()), {"model": model.cfg.to_dict(), **extra})


def load_model(path: str | Path) -> tuple[PixelTextGPT, dict]:
    meta, tensors = load_checkpoint(path)
    if "model" not in meta:
        raise CorruptCheckpoint(f"{path}: no model config in checkpoint")
    model = PixelTextGPT(ModelConfig.from_dict(meta["model"]))
    own = {k: v for k, v in tensors.items() if k in model.state_dict()}
    try:
        model.load_state_dict(own)
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None
    return model, {"meta": meta, "tensors": tensors}
