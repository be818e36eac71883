"""Command line entry point: ``pixeltext {render,tokenize,pretrain,finetune,eval,inspect}``.

Settings resolve as defaults < ``--config`` file < command-line flags. The
config file is YAML holding flat ``key: value`` pairs named after the fields of
the render, model, training and fine-tuning configs.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import CorruptCheckpoint, CorruptShard, PixelTextError, RenderOverflow

EXIT_USER, EXIT_INPUT, EXIT_OVERFLOW, EXIT_VOCAB = 1, 2, 3, 4


class CLIError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USER):
        super().__init__(msg)
        self.code = code


# --- configuration -----------------------------------------------------------

def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_settings(args) -> dict:
    settings = {}
    if args.config:
        path = Path(args.config)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise CLIError(f"cannot read config {path}: {exc.strerror}", EXIT_INPUT) from None
        except yaml.YAMLError as exc:
            raise CLIError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise CLIError(f"config {path} must be a mapping of key: value pairs")
        settings.update(loaded)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        settings[key.strip()] = _parse_value(value)
    return settings


def build(cls, settings: dict, used: set, **overrides):
    """Instantiate dataclass ``cls`` from the settings it has fields for, then flag overrides."""
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in settings.items() if k in names}
    used.update(kwargs)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid {cls.__name__} settings: {exc}") from None


def reject_unused(settings: dict, used: set) -> None:
    unknown = sorted(set(settings) - used)
    if unknown:
        raise CLIError(f"unknown configuration keys for this command: {', '.join(unknown)}")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_vocab(path):
    from .tokenizer import Vocab
    try:
        return Vocab.load(path)
    except OSError as exc:
        raise CLIError(f"cannot read tokenizer {path}: {exc.strerror}", EXIT_INPUT) from None
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_INPUT) from None


def _check_vocab(model_cfg, vocab, ckpt) -> None:
    if vocab is not None and vocab.size != model_cfg.vocab_size:
        raise CLIError(f"vocabulary size mismatch: checkpoint {ckpt} has {model_cfg.vocab_size} tokens, "
                       f"tokenizer has {vocab.size}", EXIT_VOCAB)


def _corpus_files(corpus: str) -> list[Path]:
    root = Path(corpus)
    if not root.is_dir():
        raise CLIError(f"corpus {root} is not a readable directory", EXIT_INPUT)
    return sorted(p for p in root.rglob("*") if p.is_file())


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CLIError(f"cannot read {path} as UTF-8: {exc}", EXIT_INPUT) from None


# --- subcommands -------------------------------------------------------------

def cmd_render(args) -> int:
    from .patchio import Modality, Record, ShardWriter
    from .render import RenderConfig, render_text, truncate_or_segment
    from .tokenizer import encode

    settings, used = load_settings(args), set()
    cfg = build(RenderConfig, settings, used, max_patches=args.max_patches)
    reject_unused(settings, used)
    vocab = _load_vocab(args.tokenizer) if args.tokenizer else None
    kinds = set(args.kinds.split(",")) if args.kinds else ({"pixel", "text", "pair"} if vocab else {"pixel"})
    if kinds - {"pixel", "text", "pair"}:
        raise CLIError(f"unknown record kinds: {sorted(kinds - {'pixel', 'text', 'pair'})}")
    if kinds & {"text", "pair"} and vocab is None:
        raise CLIError("text and pair records need --tokenizer")
    out = _out_dir(args) / args.name
    docs = strips = content = 0
    P = cfg.patch_px
    files = _corpus_files(args.corpus)
    # Write beside the target and rename at the end so a failed run leaves no partial shard.
    tmp = out.with_name(out.name + ".partial")
    writer = ShardWriter(tmp, P, cfg.channels)
    try:
        for path in files:
            text = _read_text(path)
            docs += 1
            if args.segment or args.truncate:
                rendered = truncate_or_segment(text, cfg, mode="segment" if args.segment else "truncate")
            else:
                try:
                    rendered = [render_text(text, cfg)]
                except RenderOverflow as exc:
                    raise CLIError(f"{path}: {exc} (use --segment or --truncate)", EXIT_OVERFLOW) from None
            flat = []
            for strip in rendered:
                n = strip.used_patches
                px = strip.pixels[:, :n * P].reshape(P, n, P, cfg.channels).transpose(1, 0, 2, 3)
                flat.append(px.reshape(n, -1))
                strips += 1
                content += strip.content_patches
                if "pixel" in kinds:
                    writer.write(Record(Modality.PIXEL, flat[-1]))
            if vocab is not None:
                ids = encode(text, vocab).ids
                if "text" in kinds:
                    writer.write(Record(Modality.TEXT, tokens=ids))
                if "pair" in kinds:
                    writer.write(Record(Modality.PAIR, flat[0], ids))
        writer.close()
        tmp.replace(out)
    finally:
        writer.close()
        tmp.unlink(missing_ok=True)
    records = writer._count
    print(f"documents\t{docs}\nstrips\t{strips}\ncontent_patches\t{content}\nrecords\t{records}\nshard\t{out}")
    return 0


def cmd_tokenize(args) -> int:
    from .tokenizer import train_bpe
    settings = load_settings(args)
    size = settings.pop("vocab_size", 512)
    reject_unused(settings, set())
    if args.vocab_size is not None:
        size = args.vocab_size
    texts = [_read_text(p) for p in _corpus_files(args.corpus)]
    vocab = train_bpe(texts, size)
    out = _out_dir(args) / args.name
    vocab.save(out)
    print(f"documents\t{len(texts)}\nvocab_size\t{vocab.size}\nmerges\t{len(vocab.merges)}\nvocab\t{out}")
    return 0


def _examples_from_shards(paths, max_positions: int, patch_dim: int):
    from .patchio import Modality, iter_shard, record_patch_sequence
    from .pretrain import build_pair_sequence
    from .tokenizer import TokenSequence
    data = {"text": [], "pixel": [], "pair": []}
    for path in paths:
        try:
            for rec in iter_shard(path):
                seq = record_patch_sequence(rec) if rec.n_patches else None
                if seq is not None:
                    seq = seq.trimmed()
                    if len(seq) > max_positions:
                        seq = type(seq)(seq.patches[:max_positions], seq.roles[:max_positions],
                                        seq.patch_px, seq.channels)
                room = max_positions - (len(seq) if seq is not None else 0)
                toks = TokenSequence(rec.tokens[:room].astype(np.int64)) if rec.n_tokens else None
                if rec.modality == Modality.PIXEL:
                    data["pixel"].append(build_pair_sequence(seq, None, kind="pixel"))
                elif rec.modality == Modality.TEXT:
                    data["text"].append(build_pair_sequence(None, toks, kind="text", patch_dim=patch_dim))
                elif toks is not None and len(toks):
                    data["pair"].append(build_pair_sequence(seq, toks, kind="pair"))
        except OSError as exc:
            raise CLIError(f"cannot read shard {path}: {exc.strerror}", EXIT_INPUT) from None
    return data


def cmd_pretrain(args) -> int:
    from .model import ModelConfig
    from .pretrain import VARIANTS, TrainConfig, init_model, train

    settings, used = load_settings(args), set()
    vocab = _load_vocab(args.tokenizer) if args.tokenizer else None
    mcfg = build(ModelConfig, settings, used, vocab_size=vocab.size if vocab else None)
    tcfg = build(TrainConfig, settings, used, steps=args.steps, seed=args.seed,
                 batch_mix=VARIANTS[args.variant] if args.variant else None)
    reject_unused(settings, used)
    if tcfg.batch_mix[0] + tcfg.batch_mix[2] and vocab is None:
        raise CLIError("objectives with text need --tokenizer")
    data = _examples_from_shards(args.shards, mcfg.max_positions, mcfg.patch_dim)
    for ex in data["text"] + data["pair"]:
        if ex.token_ids.max(initial=0) >= mcfg.vocab_size:
            raise CLIError(f"shard token id {int(ex.token_ids.max())} is outside the model vocabulary "
                           f"of {mcfg.vocab_size}", EXIT_VOCAB)
    out = _out_dir(args)
    model = init_model(mcfg, tcfg.seed)
    records = train(model, data, tcfg, checkpoint_dir=out, log_path=out / "metrics.tsv")
    kinds = sorted({r.kind for r in records})
    last = records[-1].tsv() if records else "none"
    print(f"steps\t{len(records)}\nkinds\t{','.join(kinds) or 'none'}\nlast\t{last}\n"
          f"checkpoint\t{out / ('final.ckpt' if records else 'step_0.ckpt')}")
    return 0


def _task_from(settings, used, args):
    from .finetune import TaskSpec
    return build(TaskSpec, settings, used, name=args.task_name, kind=args.task_kind, metric=args.metric,
                 modality=args.modality, render_mode=args.render_mode)


def _encode_rows(rows, encoder):
    return [encoder.encode(a, b) for a, b, _ in rows]


def _read_rows(path):
    from .finetune import read_task_tsv
    try:
        return read_task_tsv(path)
    except OSError as exc:
        raise CLIError(f"cannot read task file {path}: {exc.strerror}", EXIT_INPUT) from None
    except (UnicodeDecodeError, ValueError) as exc:
        raise CLIError(f"{path}: {exc}", EXIT_INPUT) from None


def cmd_finetune(args) -> int:
    from .finetune import (FineTuneConfig, TaskEncoder, attach_task_head, encode_labels, finetune,
                           save_task_model)
    from .model import ModelConfig, load_model
    from .pretrain import init_model

    settings, used = load_settings(args), set()
    vocab = _load_vocab(args.tokenizer) if args.tokenizer else None
    if args.checkpoint:
        try:
            model, _ = load_model(args.checkpoint)
        except OSError as exc:
            raise CLIError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}", EXIT_INPUT) from None
        _check_vocab(model.cfg, vocab, args.checkpoint)
        used.update(k for k in settings if k in {f.name for f in dataclasses.fields(ModelConfig)})
    else:
        model = init_model(build(ModelConfig, settings, used, vocab_size=vocab.size if vocab else None),
                           args.seed or 0)
    fcfg = build(FineTuneConfig, settings, used, steps=args.steps, seed=args.seed, lr=args.lr)
    task = _task_from(settings, used, args)
    reject_unused(settings, used)
    train_rows, dev_rows = _read_rows(args.train), _read_rows(args.dev)
    if task.arity == "single" and any(b is not None for _, b, _ in train_rows):
        task.arity = "pair"
    y_train = encode_labels(task, [r[2] for r in train_rows])
    y_dev = encode_labels(task, [r[2] for r in dev_rows])
    tm = attach_task_head(model, task, seed=fcfg.seed)
    encoder = TaskEncoder(task, tm.cfg, vocab, fcfg.patch_budget, fcfg.threshold)
    report = finetune(tm, _encode_rows(train_rows, encoder), y_train, _encode_rows(dev_rows, encoder), y_dev, fcfg)
    out = _out_dir(args)
    save_task_model(out / "task.ckpt", tm, finetune=dataclasses.asdict(fcfg))
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    from .finetune import FineTuneConfig, TaskEncoder, encode_labels, evaluate, load_task_model
    try:
        tm, meta = load_task_model(args.checkpoint)
    except OSError as exc:
        raise CLIError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}", EXIT_INPUT) from None
    vocab = _load_vocab(args.tokenizer) if args.tokenizer else None
    _check_vocab(tm.cfg, vocab, args.checkpoint)
    fcfg = FineTuneConfig.from_dict(meta.get("finetune", {})) if meta.get("finetune") else FineTuneConfig()
    rows = _read_rows(args.data)
    labels = encode_labels(tm.task, [r[2] for r in rows])
    encoder = TaskEncoder(tm.task, tm.cfg, vocab, fcfg.patch_budget, fcfg.threshold)
    report = evaluate(tm, _encode_rows(rows, encoder), labels)
    if args.out:
        (_out_dir(args) / "eval_report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def _write_pnm(path: Path, pixels: np.ndarray) -> None:
    h, w, c = pixels.shape
    magic = b"P6" if c == 3 else b"P5"
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels).tobytes())


def cmd_inspect(args) -> int:
    from .model import CKPT_MAGIC, load_checkpoint
    from .patchio import SHARD_MAGIC, iter_shard, read_shard_header

    reject_unused(load_settings(args), set())
    path = Path(args.path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}", EXIT_INPUT) from None
    if magic == SHARD_MAGIC:
        with open(path, "rb") as fh:
            header = read_shard_header(fh)
        print(f"shard {path}\nversion\t{header.version}\nrecords\t{header.count}\n"
              f"patch_px\t{header.patch_px}\nchannels\t{header.channels}")
        for i, rec in enumerate(iter_shard(path)):
            print(f"record {i}\t{rec.modality.name.lower()}\tpatches={rec.n_patches}\ttokens={rec.n_tokens}")
            if args.ppm and i == args.record:
                P, C = header.patch_px, header.channels
                px = rec.patches.reshape(rec.n_patches, P, P, C).transpose(1, 0, 2, 3).reshape(P, -1, C)
                _write_pnm(Path(args.ppm), px)
        if args.ppm and args.record >= header.count:
            raise CLIError(f"record {args.record} does not exist (shard has {header.count})")
        return 0
    if magic == CKPT_MAGIC:
        meta, tensors = load_checkpoint(path)
        print(f"checkpoint {path}")
        for section, values in sorted(meta.items()):
            if isinstance(values, dict):
                for k, v in sorted(values.items()):
                    print(f"{section}.{k}\t{v}")
            else:
                print(f"{section}\t{values}")
        for name, t in tensors.items():
            print(f"tensor {name}\t{tuple(t.shape)}")
        return 0
    raise CLIError(f"{path}: unrecognized file (magic {magic!r})", EXIT_INPUT)


# --- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are user errors (exit 1); exit 2 is reserved for unreadable input."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        g = _Parser(add_help=False)
        g.add_argument("--config", metavar="PATH", default=default, help="YAML file of key: value settings")
        g.add_argument("--seed", type=int, default=default,
                       help="root seed; components derive named sub-seeds from it")
        g.add_argument("--out", metavar="DIR", default=default, help="output directory (default: .)")
        g.add_argument("--set", action="append", metavar="KEY=VALUE", default=default,
                       help="override one setting (repeatable)")
        return g

    # Global flags are accepted before or after the subcommand.
    common = globals_parser(argparse.SUPPRESS)
    parser = _Parser(prog="pixeltext", parents=[globals_parser(None)],
                                     description="Render text to patches and train pixel/text language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="render a corpus directory into a shard")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--name", default="render.shard", help="shard file name inside --out")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--segment", action="store_true", help="split long documents into several strips")
    mode.add_argument("--truncate", action="store_true", help="keep only the first strip of long documents")
    p.add_argument("--max-patches", type=int)
    p.add_argument("--tokenizer", metavar="VOCAB", help="also write text and pair records")
    p.add_argument("--kinds", help="comma-separated subset of pixel,text,pair")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("tokenize", parents=[common], help="train a BPE vocabulary on a corpus directory")
    p.add_argument("--corpus", required=True, metavar="DIR")
    p.add_argument("--vocab-size", type=int, help="target vocabulary size (default 512)")
    p.add_argument("--name", default="vocab.txt")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train on shards")
    p.add_argument("--shards", nargs="+", required=True, metavar="SHARD")
    p.add_argument("--variant", choices=["textgpt", "pixelgpt", "monogpt", "dualgpt"])
    p.add_argument("--tokenizer", metavar="VOCAB")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune on a TSV task")
    p.add_argument("--checkpoint", help="pre-trained checkpoint (default: fresh weights)")
    p.add_argument("--tokenizer", metavar="VOCAB")
    p.add_argument("--train", required=True, metavar="TSV")
    p.add_argument("--dev", required=True, metavar="TSV")
    p.add_argument("--task-name")
    p.add_argument("--task-kind", choices=["classification", "regression"])
    p.add_argument("--metric", choices=["acc", "f1", "mcc", "spearman"])
    p.add_argument("--modality", choices=["pixel", "text", "dual"])
    p.add_argument("--render-mode", choices=["rgb", "grayscale", "binary"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="score a fine-tuned checkpoint on a TSV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", metavar="VOCAB")
    p.add_argument("--data", required=True, metavar="TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="describe a shard or checkpoint")
    p.add_argument("path")
    p.add_argument("--record", type=int, default=0, help="record to dump with --ppm")
    p.add_argument("--ppm", metavar="FILE", help="write the record's patches as a portable pixmap")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("PIXELTEXT_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"pixeltext {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except RenderOverflow as exc:
        print(f"pixeltext {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW
    except (CorruptShard, CorruptCheckpoint) as exc:
        print(f"pixeltext {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PixelTextError, ValueError) as exc:
        print(f"pixeltext {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
