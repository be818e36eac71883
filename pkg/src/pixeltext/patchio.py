"""Strips to patch sequences and back, masks, render-mode conversion, shard files.

Flattening order inside a patch is row, then column, then channel, so element
``(r * P + c) * C + ch`` of a flattened patch is pixel ``(r, c)`` channel ``ch``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import CorruptShard, ShapeError
from .render import RenderedStrip, Role

NORM_EPS = 1e-6


def roles_to_masks(roles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention mask (element is content) and loss mask (next element is content)."""
    roles = np.asarray(roles)
    attention = roles == Role.CONTENT
    loss = np.zeros_like(attention)
    loss[:-1] = attention[1:]
    return attention, loss


@dataclass
class PatchSequence:
    patches: np.ndarray  # (N, P*P*C) floats in [0, 1]
    roles: np.ndarray  # (N,) uint8 Role codes
    patch_px: int = 16
    channels: int = 3
    attention_mask: np.ndarray = field(init=False, repr=False)
    loss_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.patches) != len(self.roles):
            raise ShapeError("one role per patch required")
        self.attention_mask, self.loss_mask = roles_to_masks(self.roles)

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def used(self) -> int:
        """Patches up to and including the last non-pad patch."""
        idx = np.flatnonzero(self.roles != Role.PAD)
        return 0 if idx.size == 0 else int(idx[-1]) + 1

    def trimmed(self) -> "PatchSequence":
        """Drop trailing padding."""
        n = self.used
        return PatchSequence(self.patches[:n], self.roles[:n], self.patch_px, self.channels)


def classify_patch(patch: np.ndarray) -> Role:
    patch = np.asarray(patch)
    if not patch.any():
        return Role.EOS
    if (patch == 1).all():
        return Role.PAD
    return Role.CONTENT


def classify_patches(patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    roles = np.full(len(patches), Role.CONTENT, dtype=np.uint8)
    roles[(patches == 1).all(axis=1)] = Role.PAD
    roles[~patches.any(axis=1)] = Role.EOS
    return roles


def _pixels_of(strip) -> np.ndarray:
    pixels = strip.pixels if isinstance(strip, RenderedStrip) else np.asarray(strip)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels


def patchify(strip: RenderedStrip | np.ndarray, P: int = 16, dtype=np.float32) -> PatchSequence:
    """Cut a strip into ``W / P`` flattened patches scaled to [0, 1].

    Roles come from the strip when it is a :class:`RenderedStrip`, otherwise
    they are classified from the pixels.
    """
    pixels = _pixels_of(strip)
    H, W, C = pixels.shape
    if H != P or W % P:
        raise ShapeError(f"strip of shape {pixels.shape} cannot be cut into {P}x{P} patches")
    n = W // P
    flat = pixels.reshape(P, n, P, C).transpose(1, 0, 2, 3).reshape(n, P * P * C)
    patches = flat.astype(dtype) / dtype(255)
    if isinstance(strip, RenderedStrip):
        roles = np.asarray(strip.patch_roles, dtype=np.uint8).copy()
    else:
        roles = classify_patches(patches)
    return PatchSequence(patches, roles, P, C)


def depatchify(seq: PatchSequence | np.ndarray, P: int = 16, channels: int | None = None) -> np.ndarray:
    patches = seq.patches if isinstance(seq, PatchSequence) else np.asarray(seq)
    if channels is None:
        channels = seq.channels if isinstance(seq, PatchSequence) else 3
    if patches.ndim != 2 or patches.shape[1] != P * P * channels:
        raise ShapeError(f"patches of shape {patches.shape} are not {P}x{P}x{channels}")
    n = len(patches)
    pixels = np.rint(np.asarray(patches, dtype=np.float64) * 255)
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    return pixels.reshape(n, P, P, channels).transpose(1, 0, 2, 3).reshape(P, n * P, channels)


def normalize_targets(patches, eps: float = NORM_EPS) -> np.ndarray:
    """Standardize every patch over its own values: ``(x - mean) / sqrt(var + eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = patches.patches if isinstance(patches, PatchSequence) else np.asarray(patches)
    x = x.astype(np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _with_pixels(strip, pixels: np.ndarray):
    if isinstance(strip, RenderedStrip):
        return RenderedStrip(pixels, strip.used_patches, strip.patch_roles)
    return pixels


def to_grayscale(strip: RenderedStrip | np.ndarray):
    """ITU-R 601 luma, ``round(0.299 R + 0.587 G + 0.114 B)`` with halves rounded up.

    Computed in integer arithmetic so the result is exact.
    """
    pixels = _pixels_of(strip)
    if pixels.shape[-1] != 3:
        raise ShapeError("grayscale conversion needs three channels")
    rgb = pixels.astype(np.int64)
    gray = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return _with_pixels(strip, gray.astype(np.uint8)[..., None])


def to_binary(strip: RenderedStrip | np.ndarray, threshold: int = 128):
    """Grayscale, then values below ``threshold`` become 0 and the rest 255."""
    if not 0 <= threshold <= 255:
        raise ValueError("threshold must be in [0, 255]")
    gray = to_grayscale(strip)
    g = _pixels_of(gray)
    return _with_pixels(strip, np.where(g < threshold, 0, 255).astype(np.uint8))


def convert_render_mode(strip, mode: str, threshold: int = 128):
    if mode == "rgb":
        return strip
    if mode == "grayscale":
        return to_grayscale(strip)
    if mode == "binary":
        return to_binary(strip, threshold)
    raise ValueError(f"unknown render mode {mode!r}")


# --- shard files -------------------------------------------------------------

class Modality(IntEnum):
    TEXT = 0
    PIXEL = 1
    PAIR = 2


@dataclass
class Record:
    """One shard entry: raw pixel patches and/or token ids, each with its attention mask."""

    modality: Modality
    patches: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.uint8))
    tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    patch_mask: np.ndarray | None = None
    token_mask: np.ndarray | None = None

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.patches = np.asarray(self.patches, dtype=np.uint8)
        if self.patches.ndim != 2:
            raise ShapeError("record patches must be 2-D (n_patches, patch_dim)")
        if not len(self.patches):
            self.patches = np.zeros((0, 0), np.uint8)  # one canonical empty payload, whatever the patch size
        self.tokens = np.asarray(self.tokens, dtype=np.uint32)
        if self.patch_mask is None:
            self.patch_mask = classify_patches(self.patches / 255.0) == Role.CONTENT
        if self.token_mask is None:
            self.token_mask = np.ones(len(self.tokens), dtype=bool)
        self.patch_mask = np.asarray(self.patch_mask, dtype=bool)
        self.token_mask = np.asarray(self.token_mask, dtype=bool)
        if len(self.patch_mask) != len(self.patches) or len(self.token_mask) != len(self.tokens):
            raise ShapeError("mask lengths must match payload lengths")

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Record):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.n_patches == other.n_patches
            and (self.n_patches == 0 or np.array_equal(self.patches, other.patches))
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.patch_mask, other.patch_mask)
            and np.array_equal(self.token_mask, other.token_mask)
        )


SHARD_MAGIC = b"PXSHARD1"
SHARD_VERSION = 1
_HEADER = struct.Struct("<8sHIHH")  # magic, version, record count, patch_px, channels
_REC = struct.Struct("<BII")  # modality, n_patches, n_tokens


class ShardWriter:
    """Streaming shard writer; the record count is patched into the header on close."""

    def __init__(self, path: str | Path, patch_px: int = 16, channels: int = 3):
        self.path = Path(path)
        self.patch_dim = patch_px * patch_px * channels
        self._fh: BinaryIO = open(self.path, "wb")
        self._count = 0
        self._fh.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, 0, patch_px, channels))

    def write(self, rec: Record) -> None:
        if rec.n_patches and rec.patches.shape[1] != self.patch_dim:
            raise ShapeError(f"patch dim {rec.patches.shape[1]} != shard patch dim {self.patch_dim}")
        fh = self._fh
        fh.write(_REC.pack(rec.modality, rec.n_patches, rec.n_tokens))
        fh.write(np.ascontiguousarray(rec.patches).tobytes())
        fh.write(rec.tokens.astype("<u4").tobytes())
        fh.write(np.packbits(rec.patch_mask).tobytes())
        fh.write(np.packbits(rec.token_mask).tobytes())
        self._count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(10)
        self._fh.write(struct.pack("<I", self._count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_shard(path: str | Path, records: Iterable[Record], patch_px: int = 16, channels: int = 3) -> int:
    with ShardWriter(path, patch_px, channels) as w:
        for rec in records:
            w.write(rec)
        return w._count


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    # Check the remaining size first so a corrupt length never triggers a huge allocation.
    if n > os.fstat(fh.fileno()).st_size - fh.tell():
        raise CorruptShard(f"truncated shard while reading {what}")
    data = fh.read(n)
    if len(data) != n:
        raise CorruptShard(f"truncated shard while reading {what}")
    return data


@dataclass(frozen=True)
class ShardHeader:
    version: int
    count: int
    patch_px: int
    channels: int

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * self.channels


def read_shard_header(fh: BinaryIO) -> ShardHeader:
    magic, version, count, patch_px, channels = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if magic != SHARD_MAGIC:
        raise CorruptShard(f"bad shard magic {magic!r}")
    if version != SHARD_VERSION:
        raise CorruptShard(f"unsupported shard version {version}")
    if channels not in (1, 3) or not 1 <= patch_px <= 1024:
        raise CorruptShard(f"implausible patch geometry {patch_px}px x {channels} channels")
    return ShardHeader(version, count, patch_px, channels)


def iter_shard(path: str | Path) -> Iterator[Record]:
    """Yield records one at a time; memory use is bounded by the largest record."""
    with open(path, "rb") as fh:
        header = read_shard_header(fh)
        dim = header.patch_dim
        for i in range(header.count):
            modality, n_p, n_t = _REC.unpack(_read_exact(fh, _REC.size, f"record {i}"))
            if modality not in Modality._value2member_map_:
                raise CorruptShard(f"record {i}: unknown modality {modality}")
            patches = np.frombuffer(_read_exact(fh, n_p * dim, "patches"), np.uint8).reshape(n_p, dim)
            tokens = np.frombuffer(_read_exact(fh, 4 * n_t, "tokens"), "<u4").astype(np.uint32)
            pm = np.unpackbits(np.frombuffer(_read_exact(fh, (n_p + 7) // 8, "mask"), np.uint8))[:n_p]
            tm = np.unpackbits(np.frombuffer(_read_exact(fh, (n_t + 7) // 8, "mask"), np.uint8))[:n_t]
            yield Record(Modality(modality), patches.copy(), tokens, pm.astype(bool), tm.astype(bool))
        if fh.read(1):
            raise CorruptShard("trailing bytes after last record")


def read_shard(path: str | Path) -> list[Record]:
    return list(iter_shard(path))


def record_patch_sequence(rec: Record, header: ShardHeader | None = None, P: int = 16) -> PatchSequence:
    """Patches of a record as a scaled sequence, roles recovered from pixels."""
    channels = header.channels if header else rec.patches.shape[1] // (P * P) if rec.n_patches else 3
    patches = rec.patches.astype(np.float32) / np.float32(255)
    return PatchSequence(patches, classify_patches(patches), P, channels)
