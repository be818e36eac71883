"""Downstream tasks: label readout, channel adaptation, fine-tuning loop, metrics."""
from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigMismatch, DegenerateInput, EmptySequence, LengthError, LengthMismatch
from .font import GlyphSet, default_glyphs
from .model import ModelConfig, PixelTextGPT, SequenceInput, load_checkpoint, save_checkpoint
from .patchio import PatchSequence, convert_render_mode, patchify
from .pretrain import (AdamWState, Example, adamw_step, build_pair_sequence, clip_grad_norm, collate,
                       sub_seed)
from .render import RenderConfig, RenderedStrip, RenderOverflow, Role, render_pair, render_text
from .tokenizer import EOS_ID, TokenSequence, Vocab, encode

log = logging.getLogger(__name__)

METRICS = ("acc", "f1", "mcc", "spearman")


@dataclass
class TaskSpec:
    name: str = "task"
    kind: str = "classification"
    num_labels: int = 2
    arity: str = "single"
    metric: str = "acc"
    render_mode: str = "rgb"
    modality: str = "pixel"
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if (self.metric == "spearman") != (self.kind == "regression"):
            raise ValueError("spearman is the regression metric and only valid for regression")
        if self.arity not in ("single", "pair"):
            raise ValueError(f"unknown arity {self.arity!r}")
        if self.render_mode not in ("rgb", "grayscale", "binary"):
            raise ValueError(f"unknown render mode {self.render_mode!r}")
        if self.modality not in ("pixel", "text", "dual"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.kind == "regression":
            self.num_labels = 1
        elif self.labels:
            self.num_labels = len(self.labels)

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "regression" else self.num_labels


# --- metrics -----------------------------------------------------------------

def _check(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{len(preds)} predictions for {len(labels)} labels")
    if preds.size == 0:
        raise LengthMismatch("metrics need at least one example")
    return preds, labels


def metric_acc(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    return float(np.mean(preds == labels))


def metric_f1(preds, labels, positive=1) -> float:
    """Binary F1 of the ``positive`` class; 0 when there are no positive predictions or labels."""
    preds, labels = _check(preds, labels)
    tp = np.sum((preds == positive) & (labels == positive))
    fp = np.sum((preds == positive) & (labels != positive))
    fn = np.sum((preds != positive) & (labels == positive))
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def metric_mcc(preds, labels) -> float:
    """Matthews correlation from the k-class confusion matrix; 0 (with a warning) when undefined."""
    preds, labels = _check(preds, labels)
    classes = np.union1d(preds, labels)
    p = np.searchsorted(classes, preds)
    t = np.searchsorted(classes, labels)
    C = np.zeros((len(classes), len(classes)), dtype=np.float64)
    np.add.at(C, (t, p), 1)
    n = C.sum()
    correct = np.trace(C)
    pk, tk = C.sum(axis=0), C.sum(axis=1)
    cov_pt = correct * n - pk @ tk
    cov_pp = n * n - pk @ pk
    cov_tt = n * n - tk @ tk
    if cov_pp == 0 or cov_tt == 0:
        warnings.warn("MCC undefined: predictions or labels take a single value", DegenerateInput, stacklevel=2)
        return 0.0
    return float(cov_pt / math.sqrt(cov_pp * cov_tt))


def average_ranks(x) -> np.ndarray:
    """1-based ranks, ties sharing the mean of the ranks they span."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    start = 0
    for i in range(1, len(x) + 1):
        if i == len(x) or sx[i] != sx[start]:
            ranks[order[start:i]] = (start + 1 + i) / 2
            start = i
    return ranks


def metric_spearman(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    if len(preds) < 2:
        raise LengthMismatch("spearman needs at least two points")
    rp, rl = average_ranks(preds), average_ranks(labels)
    rp -= rp.mean()
    rl -= rl.mean()
    denom = math.sqrt(float(rp @ rp) * float(rl @ rl))
    if denom == 0:
        warnings.warn("spearman undefined for constant input", DegenerateInput, stacklevel=2)
        return 0.0
    return float(rp @ rl / denom)


METRIC_FUNCS = {"acc": metric_acc, "f1": metric_f1, "mcc": metric_mcc, "spearman": metric_spearman}


@dataclass
class EvalReport:
    task: str
    metric: str
    metrics: dict
    n: int
    confusion: list | None = None
    step: int | None = None

    @property
    def value(self) -> float:
        return self.metrics[self.metric]

    def to_text(self) -> str:
        lines = [f"task: {self.task}", f"samples: {self.n}"]
        if self.step is not None:
            lines.append(f"best_step: {self.step}")
        lines += [f"{k}: {v:.6f}" for k, v in self.metrics.items()]
        if self.confusion is not None:
            lines.append("confusion: " + " ; ".join(" ".join(str(c) for c in row) for row in self.confusion))
        lines.append(f"METRIC {self.metric} {self.value:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_predictions(task: TaskSpec, preds, labels) -> EvalReport:
    preds, labels = _check(preds, labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInput)
        if task.kind == "regression":
            metrics = {"spearman": metric_spearman(preds, labels)} if len(preds) > 1 else {"spearman": 0.0}
            confusion = None
        else:
            metrics = {name: METRIC_FUNCS[name](preds, labels) for name in ("acc", "f1", "mcc")}
            k = task.num_labels
            cm = np.zeros((k, k), dtype=np.int64)
            np.add.at(cm, (np.asarray(labels, int), np.asarray(preds, int)), 1)
            confusion = cm.tolist()
    return EvalReport(task.name, task.metric, metrics, len(preds), confusion)


# --- representation and heads ------------------------------------------------

def pooled_repr(hidden: torch.Tensor, attention_mask) -> torch.Tensor:
    """Hidden state at the last attended (content) position of each sequence.

    Works on (N, D) with an (N,) mask or (B, N, D) with a (B, N) mask.
    """
    mask = torch.as_tensor(attention_mask, dtype=torch.bool)
    single = hidden.dim() == 2
    if single:
        hidden, mask = hidden[None], mask[None]
    if not mask.any(dim=1).all():
        raise EmptySequence("sequence has no content position to read a label from")
    N = mask.shape[1]
    last = N - 1 - mask.flip(1).long().argmax(dim=1)
    out = hidden[torch.arange(hidden.shape[0]), last]
    return out[0] if single else out


def trim_to_content(inp: SequenceInput) -> SequenceInput:
    """Drop trailing positions after the last attended one in the batch.

    Under the causal mask those positions cannot influence the pooled state,
    so removing them makes the readout exactly independent of extra padding.
    """
    attended = torch.nonzero(inp.attention_mask.any(dim=0)).flatten()
    n = int(attended[-1]) + 1 if attended.numel() else inp.shape[1]
    if n == inp.shape[1]:
        return inp
    return SequenceInput(inp.is_patch[:, :n], inp.attention_mask[:, :n], inp.positions[:, :n],
                         None if inp.token_ids is None else inp.token_ids[:, :n],
                         None if inp.patches is None else inp.patches[:, :n])


class TaskModel(nn.Module):
    """A backbone plus an affine task head on the pooled representation."""

    def __init__(self, backbone: PixelTextGPT, task: TaskSpec):
        super().__init__()
        self.backbone = backbone
        self.task = task
        self.head = nn.Linear(backbone.cfg.hidden_size, task.out_dim)

    @property
    def cfg(self) -> ModelConfig:
        return self.backbone.cfg

    def forward(self, inp: SequenceInput) -> torch.Tensor:
        inp = trim_to_content(inp)
        hidden = self.backbone(inp)
        out = self.head(pooled_repr(hidden, inp.attention_mask))
        return out[:, 0] if self.task.kind == "regression" else out


def attach_task_head(model: PixelTextGPT, task: TaskSpec, config: ModelConfig | None = None,
                     seed: int = 42) -> TaskModel:
    """Wrap ``model`` with a freshly initialized ``D -> k`` head (``D -> 1`` for regression).

    The language-modeling heads stay in the backbone but are not on the loss path.
    ``config``, when given, must agree with the model's architecture. Grayscale
    and binary tasks get a channel-averaged patch projection.
    """
    if config is not None:
        mine, theirs = model.cfg.to_dict(), config.to_dict()
        diff = [k for k in mine if k != "channels" and mine[k] != theirs[k]]
        if diff:
            raise ConfigMismatch("checkpoint and requested config differ in " + ", ".join(
                f"{k} ({mine[k]} vs {theirs[k]})" for k in diff))
    if task.render_mode != "rgb" and task.modality != "text" and model.cfg.channels == 3:
        adapt_model_channels(model)
    tm = TaskModel(model, task)
    gen =torch.Generator().manual_seed(sub_seed(seed, "head"))
    with torch.no_grad():
        tm.head.weight.normal_(0.0, model.cfg.initializer_range, generator=gen)
        tm.head.bias.zero_()
    return tm.to(next(model.parameters()).dtype)


def adapt_patch_embedding_channels(weight: torch.Tensor, channels: int = 3) -> torch.Tensor:
    """Average an input projection of shape (D, P*P*C) over channels -> (D, P*P)."""
    D, n = weight.shape
    if n % channels:
        raise ValueError(f"projection width {n} is not a multiple of {channels} channels")
    return weight.reshape(D, n // channels, channels).mean(dim=-1)


def adapt_model_channels(model: PixelTextGPT) -> PixelTextGPT:
    """Switch a three-channel model to single-channel patches in place.

    The patch projection weights are averaged by channel with the bias kept;
    the regression head's outputs are averaged the same way so the config
    stays self-consistent.
    """
    cfg = model.cfg
    if cfg.channels == 1:
        return model
    if cfg.channels != 3:
        raise ValueError("channel adaptation expects a three-channel model")
    new_cfg = ModelConfig.from_dict({**cfg.to_dict(), "channels": 1})
    old_in, old_out = model.patch_proj, model.regression_head
    proj = nn.Linear(new_cfg.patch_dim, cfg.hidden_size).to(old_in.weight.dtype)
    head = nn.Linear(cfg.hidden_size, new_cfg.patch_dim).to(old_out.weight.dtype)
    with torch.no_grad():
        proj.weight.copy_(adapt_patch_embedding_channels(old_in.weight))
        proj.bias.copy_(old_in.bias)
        head.weight.copy_(old_out.weight.reshape(-1, 3, cfg.hidden_size).mean(dim=1))
        head.bias.copy_(old_out.bias.reshape(-1, 3).mean(dim=1))
    model.patch_proj, model.regression_head = proj, head
    model.cfg = new_cfg
    for block in model.blocks:
        block.attn.cfg = new_cfg
    return model


# --- inputs ------------------------------------------------------------------

def _pad_patches(seq: PatchSequence, budget: int) -> PatchSequence:
    seq = seq.trimmed()
    n = len(seq)
    if n > budget:
        raise LengthError(f"{n} rendered patches exceed the patch budget of {budget}")
    dim = seq.patches.shape[1]
    patches = np.ones((budget, dim), dtype=seq.patches.dtype)
    patches[:n] = seq.patches
    roles = np.full(budget, Role.PAD, dtype=np.uint8)
    roles[:n] = seq.roles
    return PatchSequence(patches, roles, seq.patch_px, seq.channels)


def dual_example(strip: RenderedStrip, tokens: TokenSequence, patch_budget: int,
                 max_positions: int | None = None, P: int = 16) -> Example:
    """Image patches right-filled with white pad patches to ``patch_budget``, then the tokens."""
    seq = _pad_patches(patchify(strip, P), patch_budget)
    total = patch_budget + len(tokens)
    if max_positions is not None and total > max_positions:
        raise LengthError(f"dual input of {total} positions exceeds max_positions {max_positions}")
    return build_pair_sequence(seq, tokens, max_positions, "pair")


def build_dual_input(strip: RenderedStrip, tokens: TokenSequence, patch_budget: int,
                     max_positions: int | None = None, P: int = 16) -> SequenceInput:
    return dual_example(strip, tokens, patch_budget, max_positions, P).to_input()


@dataclass
class FineTuneConfig:
    lr: float = 1e-4
    schedule: str = "linear"
    warmup_steps: int = 10
    steps: int = 500
    batch_size: int = 32
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    eval_every: int = 50
    patience: int = 10
    seed: int = 42
    freeze_backbone: bool = False
    patch_budget: int = 64
    threshold: int = 128

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown fine-tuning keys: {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr * step / self.warmup_steps
        frac = min(1.0, (step - self.warmup_steps) / max(self.steps - self.warmup_steps, 1))
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1 + math.cos(math.pi * frac))
        return self.lr * (1 - frac)


class TaskEncoder:
    """Turns raw ``(text_a, text_b)`` rows into model examples for one task."""

    def __init__(self, task: TaskSpec, model_cfg: ModelConfig, vocab: Vocab | None = None,
                 patch_budget: int = 64, threshold: int = 128, glyphs: GlyphSet | None = None):
        if task.modality in ("text", "dual") and vocab is None:
            raise ValueError(f"{task.modality} modality needs a tokenizer vocabulary")
        self.task = task
        self.model_cfg = model_cfg
        self.vocab = vocab
        self.threshold = threshold
        self.glyphs = glyphs or default_glyphs()
        limit = model_cfg.max_positions if task.modality == "pixel" else min(patch_budget, model_cfg.max_positions)
        self.render_cfg = RenderConfig(max_patches=limit, patch_px=model_cfg.patch_px,
                                       height_px=model_cfg.patch_px)
        self.patch_budget = patch_budget

    def _strip(self, a: str, b: str | None) -> RenderedStrip:
        wa, wb = a.split(), (b.split() if b is not None else None)
        while True:
            try:
                if wb is None:
                    strip = render_text(" ".join(wa), self.render_cfg, self.glyphs)
                else:
                    strip = render_pair(" ".join(wa), " ".join(wb), self.render_cfg, self.glyphs)
                break
            except RenderOverflow:
                # Truncate word by word, always from the longer segment.
                if wb is None or len(wa) >= len(wb):
                    wa = wa[:-1]
                else:
                    wb = wb[:-1]
        return convert_render_mode(strip, self.task.render_mode, self.threshold)

    def _tokens(self, a: str, b: str | None, limit: int) -> TokenSequence:
        ids = encode(a, self.vocab).ids.tolist()
        if b is not None:
            ids += [EOS_ID] + encode(b, self.vocab).ids.tolist()
        return TokenSequence(ids[:limit])

    def encode(self, a: str, b: str | None = None) -> Example:
        mod = self.task.modality
        P = self.model_cfg.patch_px
        if mod == "pixel":
            return build_pair_sequence(patchify(self._strip(a, b), P).trimmed(), None, kind="pixel")
        if mod == "text":
            return build_pair_sequence(None, self._tokens(a, b, self.model_cfg.max_positions), kind="text",
                                       patch_dim=self.model_cfg.patch_dim)
        limit = self.model_cfg.max_positions - self.patch_budget
        return dual_example(self._strip(a, b), self._tokens(a, b, limit), self.patch_budget,
                            self.model_cfg.max_positions, P)


def _predict(model: TaskModel, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = collate(examples[i:i + batch_size], model.cfg.patch_dim, dtype)
            outs.append(model(batch.inputs).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0,))


def predict_outputs(model: TaskModel, examples: Sequence[Example]) -> np.ndarray:
    """Raw head outputs: logits (n, k) for classification, scores (n,) for regression."""
    return _predict(model, examples)


def evaluate(model: TaskModel, examples: Sequence[Example], labels) -> EvalReport:
    out = _predict(model, examples)
    preds = out if model.task.kind == "regression" else out.argmax(axis=1)
    return evaluate_predictions(model.task, preds, labels)


def finetune(model: TaskModel, train_examples: Sequence[Example], train_labels,
             dev_examples: Sequence[Example], dev_labels, cfg: FineTuneConfig | None = None,
             callback=None) -> EvalReport:
    """Fine-tune ``model`` in place with early stopping on the dev metric.

    The dev split is scored every ``cfg.eval_every`` steps (and before the first
    step); training stops after ``cfg.patience`` evaluations without
    improvement. The weights of the best evaluation are restored at the end and
    the returned report describes them.
    """
    cfg = cfg or FineTuneConfig()
    task = model.task
    dtype = next(model.parameters()).dtype
    y = torch.as_tensor(np.asarray(train_labels), dtype=dtype if task.kind == "regression" else torch.long)
    for p in model.backbone.parameters():
        p.requires_grad_(not cfg.freeze_backbone)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamWState()
    rng = np.random.default_rng(sub_seed(cfg.seed, "finetune/batches"))
    order: list[int] = []
    bs = min(cfg.batch_size, len(train_examples))

    best = evaluate(model, dev_examples, dev_labels)
    best.step = 0
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for step in range(cfg.steps):
        while len(order) < bs:
            order.extend(rng.permutation(len(train_examples)).tolist())
        idx, order = order[:bs], order[bs:]
        model.train()
        batch = collate([train_examples[i] for i in idx], model.cfg.patch_dim, dtype)
        out = model(batch.inputs)
        target = y[idx]
        if task.kind == "regression":
            loss = torch.mean((out - target) ** 2)
        else:
            loss = torch.nn.functional.cross_entropy(out, target)
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = [p.grad for p in params]
        clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, state, cfg.lr_at(step), cfg.betas, cfg.eps, cfg.weight_decay)
        if callback:
            callback(step, loss.item())
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            rep = evaluate(model, dev_examples, dev_labels)
            rep.step = step + 1
            log.info("step %d dev %s %.4f", step + 1, rep.metric, rep.value)
            if rep.value > best.value:
                best, best_state, stale = rep, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    model.load_state_dict(best_state)
    model.eval()
    return best


# --- task files and checkpoints ----------------------------------------------

def read_task_tsv(path: str | Path) -> list[tuple[str, str | None, str]]:
    """Rows of ``(text_a, text_b or None, label)`` from a headed UTF-8 TSV file."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        cols = reader.fieldnames or []
        if "text_a" not in cols or "label" not in cols:
            raise ValueError(f"{path}: header must contain text_a and label columns")
        has_b = "text_b" in cols
        return [(r["text_a"], r["text_b"] if has_b else None, r["label"]) for r in reader]


def encode_labels(task: TaskSpec, raw: Sequence[str]) -> np.ndarray:
    if task.kind == "regression":
        return np.asarray([float(v) for v in raw], dtype=np.float64)
    if not task.labels:
        task.labels = sorted(set(raw))
        task.num_labels = len(task.labels)
    index = {name: i for i, name in enumerate(task.labels)}
    unknown = sorted(set(raw) - set(index))
    if unknown:
        raise ValueError(f"labels not seen in training data: {unknown}")
    return np.asarray([index[v] for v in raw], dtype=np.int64)


def save_task_model(path: str | Path, model: TaskModel, **extra) -> None:
    tensors = {f"backbone.{k}": v for k, v in model.backbone.state_dict().items()}
    tensors.update({"head.weight": model.head.weight, "head.bias": model.head.bias})
    save_checkpoint(path, tensors, {"model": model.cfg.to_dict(), "task": asdict(model.task), **extra})


def load_task_model(path: str | Path) -> tuple[TaskModel, dict]:
    meta, tensors = load_checkpoint(path)
    if "task" not in meta:
        raise ConfigMismatch(f"{path} is not a fine-tuned checkpoint (no task head)")
    backbone = PixelTextGPT(ModelConfig.from_dict(meta["model"]))
    task = TaskSpec(**meta["task"])
    tm = TaskModel(backbone, task)
    tm.load_state_dict(tensors)
    tm.eval()
    return tm, meta
