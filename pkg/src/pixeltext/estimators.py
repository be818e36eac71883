"""scikit-learn compatible wrappers around rendering, tokenization, pre-training and fine-tuning.

Inputs ``X`` are sequences of strings, or of ``(text_a, text_b)`` pairs for
two-segment tasks.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_consistent_length, check_is_fitted, column_or_1d

from .finetune import (FineTuneConfig, TaskEncoder, TaskSpec, attach_task_head, encode_labels, finetune,
                       predict_outputs)
from .model import ModelConfig, PixelTextGPT, load_model
from .patchio import convert_render_mode, patchify
from .pretrain import (VARIANTS, TrainConfig, build_pair_sequence, evaluate_losses, init_model, pixel_example,
                       text_example, train)
from .render import RenderConfig, render_pair, truncate_or_segment
from .tokenizer import TokenSequence, Vocab, decode, encode, train_bpe


def check_texts(X) -> list:
    """Validate a 1-D collection of strings or string pairs and return it as a list."""
    if isinstance(X, (str, bytes)):
        raise ValueError("expected a sequence of texts, got a single string")
    items = list(X.tolist() if isinstance(X, np.ndarray) else X)
    if not items:
        raise ValueError("found an empty collection of texts")
    for item in items:
        if isinstance(item, str):
            continue
        if isinstance(item, (tuple, list)) and len(item) == 2 and all(isinstance(s, str) for s in item):
            continue
        raise ValueError(f"expected str or (str, str) pair, got {type(item).__name__}")
    return items


def _split(item) -> tuple[str, str | None]:
    return (item, None) if isinstance(item, str) else (item[0], item[1])


class TextRenderer(TransformerMixin, BaseEstimator):
    """Render texts to fixed-size patch arrays.

    ``transform`` returns an array of shape (n_texts, max_patches, P*P*C) with
    values in [0, 1]. Long single texts are truncated to the longest word-aligned
    prefix; pairs that do not fit raise ``RenderOverflow``.
    """

    def __init__(self, max_patches=1024, patch_px=16, padding_px=3, render_mode="rgb", threshold=128):
        self.max_patches = max_patches
        self.patch_px = patch_px
        self.padding_px = padding_px
        self.render_mode = render_mode
        self.threshold = threshold

    def fit(self, X=None, y=None):
        self.config_ = RenderConfig(height_px=self.patch_px, max_patches=self.max_patches,
                                    patch_px=self.patch_px, padding_px=self.padding_px)
        channels = 3 if self.render_mode == "rgb" else 1
        convert_render_mode(np.zeros((1, 1, 3), np.uint8), self.render_mode, self.threshold)
        self.n_patches_ = self.max_patches
        self.patch_dim_ = self.patch_px * self.patch_px * channels
        return self

    def render(self, X) -> list:
        check_is_fitted(self, "config_")
        strips = []
        for item in check_texts(X):
            a, b = _split(item)
            strip = truncate_or_segment(a, self.config_, mode="truncate")[0] if b is None \
                else render_pair(a, b, self.config_)
            strips.append(convert_render_mode(strip, self.render_mode, self.threshold))
        return strips

    def transform(self, X):
        return np.stack([patchify(s, self.patch_px).patches for s in self.render(X)])


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Byte-level BPE. ``transform`` maps texts to lists of token ids."""

    def __init__(self, vocab_size=512):
        self.vocab_size = vocab_size

    def fit(self, X, y=None):
        texts = [t for item in check_texts(X) for t in _split(item) if t is not None]
        self.vocab_ = train_bpe(texts, self.vocab_size)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        return [encode(t, self.vocab_).ids.tolist() for t in check_texts(X)]

    def inverse_transform(self, ids):
        check_is_fitted(self, "vocab_")
        return [decode(seq, self.vocab_) for seq in ids]


class PixelLanguageModel(BaseEstimator):
    """Pre-train one of the four model variants on raw texts.

    ``variant`` picks which objectives are mixed: ``textgpt`` (tokens only),
    ``pixelgpt`` (rendered patches only), ``monogpt`` (both, unpaired) or
    ``dualgpt`` (both plus patch-then-token pairs of the same text, 4:4:2).
    """

    def __init__(self, variant="dualgpt", hidden_size=128, n_layers=4, n_heads=8, n_kv_heads=4,
                 intermediate_size=352, max_positions=256, vocab_size=512, steps=2000, batch_size=8,
                 peak_lr=5e-4, warmup_steps=200, seed=0):
        self.variant = variant
        self.hidden_size = hidden_size
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.intermediate_size = intermediate_size
        self.max_positions = max_positions
        self.vocab_size = vocab_size
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.seed = seed

    def _examples(self, texts):
        render_cfg = RenderConfig(max_patches=self.max_positions)
        data = {"text": [], "pixel": [], "pair": []}
        patch_dim = self.model_.cfg.patch_dim
        for t in texts:
            tokens = encode(t, self.vocab_)
            data["text"].append(text_example(TokenSequence(tokens.ids[:self.max_positions]), patch_dim=patch_dim))
            for strip in truncate_or_segment(t, render_cfg, mode="segment"):
                seq = patchify(strip).trimmed()
                data["pixel"].append(pixel_example(seq, self.max_positions))
            first = patchify(truncate_or_segment(t, render_cfg, mode="truncate")[0]).trimmed()
            room = self.max_positions - len(first)
            if room > 0:
                data["pair"].append(build_pair_sequence(first, TokenSequence(tokens.ids[:room])))
        return data

    def fit(self, X, y=None):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
        texts = [t for item in check_texts(X) for t in _split(item) if t is not None]
        self.vocab_ = train_bpe(texts, self.vocab_size)
        cfg = ModelConfig(hidden_size=self.hidden_size, n_layers=self.n_layers, n_heads=self.n_heads,
                          n_kv_heads=self.n_kv_heads, intermediate_size=self.intermediate_size,
                          vocab_size=self.vocab_.size, max_positions=self.max_positions)
        self.model_ = init_model(cfg, self.seed)
        self.train_config_ = TrainConfig(peak_lr=self.peak_lr, warmup_steps=min(self.warmup_steps, self.steps),
                                         batch_mix=VARIANTS[self.variant], seed=self.seed, steps=self.steps,
                                         batch_size=self.batch_size)
        self.data_ = self._examples(texts)
        self.history_ = train(self.model_, self.data_, self.train_config_)
        return self

    def losses(self, X=None) -> dict:
        """Per-kind mean patch MSE / token cross-entropy on ``X`` (default: the training texts)."""
        check_is_fitted(self, "model_")
        data = self.data_ if X is None else self._examples(
            [t for item in check_texts(X) for t in _split(item) if t is not None])
        ratio = dict(zip(("text", "pixel", "pair"), VARIANTS[self.variant]))
        return {k: evaluate_losses(self.model_, v) for k, v in data.items() if v and ratio[k]}


class _TaskEstimator(BaseEstimator):
    _kind = "classification"

    def __init__(self, backbone=None, vocab=None, modality="pixel", render_mode="rgb", steps=500, lr=1e-4,
                 batch_size=32, warmup_steps=10, patch_budget=64, validation_fraction=0.2, eval_every=50,
                 patience=10, freeze_backbone=False, model_config=None, seed=42):
        self.backbone = backbone
        self.vocab = vocab
        self.modality = modality
        self.render_mode = render_mode
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.patch_budget = patch_budget
        self.validation_fraction = validation_fraction
        self.eval_every = eval_every
        self.patience = patience
        self.freeze_backbone = freeze_backbone
        self.model_config = model_config
        self.seed = seed

    def _backbone(self) -> tuple[PixelTextGPT, Vocab | None]:
        vocab = self.vocab
        if isinstance(self.backbone, PixelLanguageModel):
            check_is_fitted(self.backbone, "model_")
            model, vocab = self.backbone.model_, vocab or self.backbone.vocab_
            model = PixelTextGPT(model.cfg).to(next(model.parameters()).dtype)
            model.load_state_dict(self.backbone.model_.state_dict())
        elif isinstance(self.backbone, PixelTextGPT):
            model = PixelTextGPT(self.backbone.cfg)
            model.load_state_dict(self.backbone.state_dict())
        elif isinstance(self.backbone, (str, Path)):
            model, _ = load_model(self.backbone)
        else:
            model = None
        if isinstance(vocab, (str, Path)):
            vocab = Vocab.load(vocab)
        if model is None:
            cfg = self.model_config or ModelConfig(vocab_size=vocab.size if vocab else 512)
            model = init_model(cfg, self.seed)
        return model, vocab

    def fit(self, X, y):
        items = check_texts(X)
        y = column_or_1d(y, warn=True)
        check_consistent_length(items, y)
        arity = "pair" if not isinstance(items[0], str) else "single"
        task = TaskSpec(name=type(self).__name__, kind=self._kind, arity=arity,
                        metric="spearman" if self._kind == "regression" else "acc",
                        render_mode=self.render_mode, modality=self.modality)
        raw = [str(v) for v in y] if self._kind == "classification" else y
        if self._kind == "classification":
            self.classes_ = np.unique(y)
            task.labels = [str(c) for c in self.classes_]
            task.num_labels = len(task.labels)
        labels = encode_labels(task, raw)
        model, self.vocab_ = self._backbone()
        self.model_ = attach_task_head(model, task, seed=self.seed)
        self.encoder_ = TaskEncoder(task, self.model_.cfg, self.vocab_, self.patch_budget)
        examples = [self.encoder_.encode(*_split(item)) for item in items]

        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(len(items))
        n_dev = max(1, int(round(len(items) * self.validation_fraction)))
        dev, tr = perm[:n_dev], perm[n_dev:]
        cfg = FineTuneConfig(lr=self.lr, warmup_steps=self.warmup_steps, steps=self.steps,
                             batch_size=self.batch_size, eval_every=self.eval_every, patience=self.patience,
                             seed=self.seed, freeze_backbone=self.freeze_backbone,
                             patch_budget=self.patch_budget)
        self.report_ = finetune(self.model_, [examples[i] for i in tr], labels[tr],
                                [examples[i] for i in dev], labels[dev], cfg)
        return self

    def _outputs(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        examples = [self.encoder_.encode(*_split(item)) for item in check_texts(X)]
        return predict_outputs(self.model_, examples)


class PixelTextClassifier(ClassifierMixin, _TaskEstimator):
    """Fine-tune a backbone with a linear head read out at the last content position."""

    _kind = "classification"

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self._outputs(X)), dim=1).numpy()

    def predict(self, X):
        return self.classes_[self._outputs(X).argmax(axis=1)]


class PixelTextRegressor(RegressorMixin, _TaskEstimator):
    _kind = "regression"

    def predict(self, X):
        return self._outputs(X)
