"""Objectives, batch construction, optimizer, schedule and the pre-training loop."""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import AllZeroRatio, LengthError, MissingModality, NonFiniteGradient, ShapeError, UnknownId
from .model import PixelTextGPT, SequenceInput, save_model
from .patchio import NORM_EPS, PatchSequence, normalize_targets
from .render import Role
from .tokenizer import TokenSequence

log = logging.getLogger(__name__)

KINDS = ("text", "pixel", "pair")

VARIANTS = {
    "textgpt": (1, 0, 0),
    "pixelgpt": (0, 1, 0),
    "monogpt": (1, 1, 0),
    "dualgpt": (4, 4, 2),
}


class EmptyLossMask(UserWarning):
    """A loss was requested over a batch with no unmasked positions."""


def sub_seed(root: int, name: str) -> int:
    """Derive an independent 63-bit seed: first 8 bytes of sha256("<root>:<name>")."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


# --- losses ------------------------------------------------------------------

def next_patch_loss(pred: torch.Tensor, target: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean over unmasked positions of the per-position mean squared error."""
    if pred.shape != target.shape or pred.shape[:-1] != loss_mask.shape:
        raise ShapeError(f"pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                         f"mask {tuple(loss_mask.shape)} do not line up")
    mask = loss_mask.bool()
    count = int(mask.sum())
    if count == 0:
        warnings.warn("next_patch_loss: no unmasked positions", EmptyLossMask, stacklevel=2)
        return pred.sum() * 0.0
    err = (pred[mask] - target[mask].to(pred.dtype)).pow(2).mean(-1)
    return err.sum() / count


def next_token_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy (natural log) over unmasked positions."""
    if logits.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise ShapeError("logits, targets and mask do not line up")
    mask = loss_mask.bool()
    count = int(mask.sum())
    if count == 0:
        warnings.warn("next_token_loss: no unmasked positions", EmptyLossMask, stacklevel=2)
        return logits.sum() * 0.0
    t = targets[mask].long()
    V = logits.shape[-1]
    if t.min() < 0 or t.max() >= V:
        raise UnknownId(f"target id outside [0, {V})")
    logp = torch.log_softmax(logits[mask], dim=-1)
    return -logp.gather(-1, t[:, None]).sum() / count


# --- sequences and batches ---------------------------------------------------

@dataclass
class Example:
    """One unbatched training sequence; position ``i`` is trained on element ``i + 1``."""

    kind: str
    is_patch: np.ndarray
    patches: np.ndarray  # (N, patch_dim); zeros at token positions
    token_ids: np.ndarray  # (N,); zeros at patch positions
    roles: np.ndarray
    attention_mask: np.ndarray
    patch_target: np.ndarray  # (N, patch_dim) normalized next patch
    token_target: np.ndarray  # (N,) next token id
    patch_loss_mask: np.ndarray
    token_loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.roles)

    def to_input(self, patch_dim: int | None = None, dtype=torch.float32) -> SequenceInput:
        """This example as a batch of one."""
        return collate([self], patch_dim or self.patches.shape[1], dtype).inputs


def build_pair_sequence(patches: PatchSequence | None, tokens: TokenSequence | None,
                        max_positions: int | None = None, kind: str | None = None,
                        patch_dim: int | None = None) -> Example:
    """Patch positions first, then token positions.

    The target's modality picks the head: position ``i`` gets a patch loss when
    element ``i + 1`` is a content patch and a token loss when it is a token,
    so the last patch before the text predicts the first token.
    """
    n_p = 0 if patches is None else len(patches)
    n_t = 0 if tokens is None else len(tokens)
    N = n_p + n_t
    if max_positions is not None and N > max_positions:
        raise LengthError(f"sequence of {N} elements exceeds max_positions {max_positions}")
    if patches is not None:
        dim = patches.patches.shape[1]
    elif patch_dim is not None:
        dim = patch_dim
    else:
        dim = 0
    is_patch = np.zeros(N, dtype=bool)
    is_patch[:n_p] = True
    pix = np.zeros((N, dim), dtype=np.float32)
    ids = np.zeros(N, dtype=np.int64)
    roles = np.empty(N, dtype=np.uint8)
    if n_p:
        pix[:n_p] = patches.patches
        roles[:n_p] = patches.roles
    if n_t:
        ids[n_p:] = tokens.ids
        roles[n_p:] = tokens.roles
    content = roles == Role.CONTENT
    nxt = np.zeros(N, dtype=bool)
    nxt[:-1] = content[1:]
    nxt_patch = np.zeros(N, dtype=bool)
    nxt_patch[:-1] = is_patch[1:]
    patch_target = np.zeros((N, dim), dtype=np.float32)
    if n_p > 1:
        patch_target[:n_p - 1] = normalize_targets(pix[1:n_p], NORM_EPS)
    token_target = np.zeros(N, dtype=np.int64)
    token_target[:-1] = ids[1:]
    if kind is None:
        kind = "pair" if n_p and n_t else ("pixel" if n_p else "text")
    return Example(kind, is_patch, pix, ids, roles, content.copy(), patch_target, token_target,
                   nxt & nxt_patch, nxt & ~nxt_patch)


def pixel_example(patches: PatchSequence, max_positions: int | None = None) -> Example:
    return build_pair_sequence(patches.trimmed(), None, max_positions, "pixel")


def text_example(tokens: TokenSequence, max_positions: int | None = None, patch_dim: int = 0) -> Example:
    return build_pair_sequence(None, tokens, max_positions, "text", patch_dim)


@dataclass
class MixedBatch:
    kind: str
    inputs: SequenceInput
    roles: torch.Tensor
    patch_targets: torch.Tensor
    token_targets: torch.Tensor
    patch_loss_mask: torch.Tensor
    token_loss_mask: torch.Tensor

    @property
    def has_patch_loss(self) -> bool:
        return bool(self.patch_loss_mask.any())

    @property
    def has_token_loss(self) -> bool:
        return bool(self.token_loss_mask.any())


def init_model(cfg, seed: int = 0, dtype=torch.float32) -> PixelTextGPT:
    """Fresh model whose weights depend only on ``cfg`` and the ``init`` sub-seed of ``seed``."""
    model = PixelTextGPT(cfg)
    gen = torch.Generator().manual_seed(sub_seed(seed, "init"))
    model.reset_parameters(gen)
    return model.to(dtype)


def collate(examples: Sequence[Example], patch_dim: int, dtype=torch.float32) -> MixedBatch:
    """Right-pad to the longest example; padding slots are masked everywhere."""
    B = len(examples)
    N = max(len(e) for e in examples)
    is_patch = np.zeros((B, N), bool)
    pix = np.zeros((B, N, patch_dim), np.float32)
    ids = np.zeros((B, N), np.int64)
    roles = np.full((B, N), Role.PAD, np.uint8)
    attn = np.zeros((B, N), bool)
    ptgt = np.zeros((B, N, patch_dim), np.float32)
    ttgt = np.zeros((B, N), np.int64)
    pmask = np.zeros((B, N), bool)
    tmask = np.zeros((B, N), bool)
    for b, e in enumerate(examples):
        n = len(e)
        is_patch[b, :n] = e.is_patch
        if e.patches.shape[1]:
            pix[b, :n] = e.patches
            ptgt[b, :n] = e.patch_target
        ids[b, :n] = e.token_ids
        roles[b, :n] = e.roles
        attn[b, :n] = e.attention_mask
        ttgt[b, :n] = e.token_target
        pmask[b, :n] = e.patch_loss_mask
        tmask[b, :n] = e.token_loss_mask
    kinds = {e.kind for e in examples}
    inputs = SequenceInput(
        is_patch=torch.from_numpy(is_patch),
        attention_mask=torch.from_numpy(attn),
        positions=torch.arange(N).expand(B, N),
        token_ids=torch.from_numpy(ids),
        patches=torch.from_numpy(pix).to(dtype),
    )
    return MixedBatch(kinds.pop() if len(kinds) == 1 else "mixed", inputs, torch.from_numpy(roles),
                      torch.from_numpy(ptgt).to(dtype), torch.from_numpy(ttgt),
                      torch.from_numpy(pmask), torch.from_numpy(tmask))


def batch_losses(model: PixelTextGPT, batch: MixedBatch) -> dict[str, torch.Tensor]:
    """Whichever of ``patch`` / ``token`` losses the batch has targets for."""
    hidden = model(batch.inputs)
    out = {}
    if batch.has_patch_loss:
        out["patch"] = next_patch_loss(model.regression_head(hidden), batch.patch_targets, batch.patch_loss_mask)
    if batch.has_token_loss:
        out["token"] = next_token_loss(model.classification_head(hidden), batch.token_targets,
                                       batch.token_loss_mask)
    return out


# --- schedules ---------------------------------------------------------------

def mix_schedule(ratio: Sequence[int], total_steps: int, seed: int = 0) -> list[str]:
    """Periodic interleaving of text/pixel/pair batches.

    One period of length ``sum(ratio)`` is built round-robin (one of each kind
    with quota left, in order), and the sequence repeats it, starting at offset
    ``seed % period``. Because it is periodic, every window of ``period`` steps
    holds exactly ``ratio`` batches of each kind.
    """
    ratio = [int(r) for r in ratio]
    if len(ratio) != 3 or any(r < 0 for r in ratio):
        raise ValueError("ratio must be three non-negative integers")
    if sum(ratio) == 0:
        raise AllZeroRatio("at least one kind needs a positive share")
    left = list(ratio)
    period = []
    while any(left):
        for k, kind in enumerate(KINDS):
            if left[k]:
                period.append(kind)
                left[k] -= 1
    off = seed % len(period)
    return [period[(off + s) % len(period)] for s in range(total_steps)]


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup_steps: int = 200
    schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_mix: tuple[int, int, int] = (4, 4, 2)
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    grad_clip: float | None = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.batch_mix = tuple(int(r) for r in self.batch_mix)
        if any(r < 0 for r in self.batch_mix):
            raise ValueError("batch_mix entries must be non-negative")
        if self.warmup_steps > self.steps and self.steps > 0:
            raise ValueError("warmup_steps cannot exceed steps")
        if self.schedule not in ("linear", "cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_mix"] = list(self.batch_mix)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then decay to 0 at ``cfg.steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    peak, warm, total = cfg.peak_lr, cfg.warmup_steps, cfg.steps
    if step < warm:
        return peak * step / warm
    if cfg.schedule == "constant":
        return peak
    if step >= total:
        return 0.0
    frac = (step - warm) / max(total - warm, 1)
    if cfg.schedule == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return peak * (1.0 - frac)


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamWState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> AdamWState:
    """In-place AdamW update with bias correction and decoupled weight decay.

    Raises NonFiniteGradient before touching anything if a gradient has a NaN or inf.
    """
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradient("gradient contains NaN or inf")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            if g is None:
                continue
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


def clip_grad_norm(grads: Iterable[torch.Tensor | None], max_norm: float | None) -> float:
    """Global L2 norm of the gradients, rescaling them in place when above ``max_norm``."""
    grads = [g for g in grads if g is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if max_norm is not None and total > max_norm and math.isfinite(total):
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


# --- training loop -----------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    kind: str
    loss: float
    lr: float
    grad_norm: float
    parts: dict = field(default_factory=dict)

    def tsv(self) -> str:
        return f"{self.step}\t{self.kind}\t{self.loss:.8g}\t{self.lr:.8g}\t{self.grad_norm:.8g}"


class _Cycler:
    """Deterministic batch sampler: reshuffle the pool every epoch."""

    def __init__(self, items: list, batch_size: int, seed: int):
        self.items = items
        self.batch_size = min(batch_size, len(items))
        self.rng = np.random.default_rng(seed)
        self.order: list[int] = []

    def next(self) -> list:
        while len(self.order) < self.batch_size:
            self.order.extend(self.rng.permutation(len(self.items)).tolist())
        picked, self.order = self.order[:self.batch_size], self.order[self.batch_size:]
        return [self.items[i] for i in picked]


def train(model: PixelTextGPT, data: dict[str, list[Example]], cfg: TrainConfig,
          kinds: Sequence[str] | None = None, checkpoint_dir: str | Path | None = None,
          log_path: str | Path | None = None, callback=None) -> list[StepRecord]:
    """Pre-train ``model`` in place.

    ``data`` maps each kind to its examples. ``kinds`` restricts training to a
    subset (kinds with a zero share in ``cfg.batch_mix`` are never scheduled).
    Every enabled kind must have data.
    """
    ratio = list(cfg.batch_mix)
    if kinds is not None:
        ratio = [r if k in kinds else 0 for k, r in zip(KINDS, ratio)]
    enabled = [k for k, r in zip(KINDS, ratio) if r > 0]
    # Examples with nothing to predict (a lone token, a single patch) carry no signal.
    data = {k: [e for e in data.get(k, []) if e.patch_loss_mask.any() or e.token_loss_mask.any()]
            for k in enabled}
    for k in enabled:
        if not data[k]:
            raise MissingModality(f"no {k} data with trainable positions for an enabled {k} objective")
    schedule = mix_schedule(ratio, cfg.steps, sub_seed(cfg.seed, "schedule")) if cfg.steps else []
    cyclers = {k: _Cycler(data[k], cfg.batch_size, sub_seed(cfg.seed, f"batches/{k}")) for k in enabled}
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamWState()
    records: list[StepRecord] = []
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
        save_model(ckdir / "step_0.ckpt", model, train=cfg.to_dict(), step=0)
    log_fh = open(log_path, "w") if log_path else None
    try:
        if log_fh:
            log_fh.write("step\tkind\tloss\tlr\tgrad_norm\n")
        model.train()
        for step, kind in enumerate(schedule):
            batch = collate(cyclers[kind].next(), model.cfg.patch_dim, dtype)
            losses = batch_losses(model, batch)
            loss = sum(losses.values())
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = [p.grad for p in params]
            gnorm = clip_grad_norm(grads, cfg.grad_clip)
            lr = lr_at(step, cfg)
            adamw_step(params, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
            rec = StepRecord(step, kind, loss.item(), lr, gnorm, {k: v.item() for k, v in losses.items()})
            records.append(rec)
            if log_fh:
                log_fh.write(rec.tsv() + "\n")
            if callback:
                callback(rec)
            if ckdir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_model(ckdir / f"step_{step + 1}.ckpt", model, train=cfg.to_dict(), step=step + 1)
        if ckdir and cfg.steps:
            save_model(ckdir / "final.ckpt", model, train=cfg.to_dict(), step=cfg.steps)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return records


@torch.no_grad()
def evaluate_losses(model: PixelTextGPT, examples: Sequence[Example], batch_size: int = 32) -> dict[str, float]:
    """Position-weighted mean patch MSE and token CE over ``examples``."""
    dtype = next(model.parameters()).dtype
    sums = {"patch": 0.0, "token": 0.0}
    counts = {"patch": 0, "token": 0}
    for i in range(0, len(examples), batch_size):
        batch = collate(examples[i:i + batch_size], model.cfg.patch_dim, dtype)
        for name, value in batch_losses(model, batch).items():
            n = int((batch.patch_loss_mask if name == "patch" else batch.token_loss_mask).sum())
            sums[name] += float(value) * n
            counts[name] += n
    return {k: sums[k] / counts[k] for k in sums if counts[k]}
