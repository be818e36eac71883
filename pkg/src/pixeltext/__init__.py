"""Pixel-based autoregressive language modeling at desk scale.

Text is rendered onto 16 px RGB strips, cut into 16x16 patches and modeled by
a decoder-only transformer that predicts the next patch (regression head), the
next token (classification head), or both for patch-then-token pairs.
"""
from .errors import *  # noqa: F401,F403
from .font import GlyphSet, default_glyphs
from .render import (RenderConfig, RenderedStrip, Role, fit_words, measure_text, render_pair, render_text,
                     truncate_or_segment)
from .patchio import (PatchSequence, Record, Modality, classify_patch, depatchify, normalize_targets, patchify,
                      read_shard, to_binary, to_grayscale, write_shard)
from .tokenizer import TokenSequence, Vocab, decode, encode, train_bpe
from .model import ModelConfig, PixelTextGPT, SequenceInput, load_model, save_model
from .pretrain import (MixedBatch, TrainConfig, adamw_step, build_pair_sequence, init_model, lr_at, mix_schedule,
                       next_patch_loss, next_token_loss, train)
from .finetune import (EvalReport, FineTuneConfig, TaskSpec, adapt_patch_embedding_channels, attach_task_head,
                       build_dual_input, finetune, metric_acc, metric_f1, metric_mcc, metric_spearman,
                       pooled_repr)
from .estimators import BPETokenizer, PixelLanguageModel, PixelTextClassifier, PixelTextRegressor, TextRenderer

__version__ = "0.1.0"
