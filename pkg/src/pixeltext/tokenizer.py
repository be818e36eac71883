"""Byte-level BPE tokenizer.

Ids 0-255 are raw bytes, 256-258 are the specials (pad, bos, eos) and every
id from 259 on is a merge, in the order merges were learned.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, UnknownId
from .render import Role

PAD_ID, BOS_ID, EOS_ID = 256, 257, 258
N_BASE = 259
VOCAB_HEADER = "pxbpe"
VOCAB_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    merges: tuple[tuple[int, int], ...] = ()
    tokens: tuple[bytes, ...] = field(init=False, repr=False)
    ranks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        table = [bytes([b]) for b in range(256)] + [b"", b"", b""]
        ranks = {}
        for i, (a, b) in enumerate(self.merges):
            if not (0 <= a < len(table) and 0 <= b < len(table)) or a in (PAD_ID, BOS_ID, EOS_ID) \
                    or b in (PAD_ID, BOS_ID, EOS_ID):
                raise ValueError(f"merge {i} refers to an invalid token")
            ranks[(a, b)] = i
            table.append(table[a] + table[b])
        object.__setattr__(self, "tokens", tuple(table))
        object.__setattr__(self, "ranks", ranks)

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id, bos_id, eos_id = PAD_ID, BOS_ID, EOS_ID

    def save(self, path: str | Path) -> None:
        # Merges are written as byte strings, so two merged tokens with equal bytes would be ambiguous.
        if len(set(self.tokens[N_BASE:])) != self.size - N_BASE:
            raise ValueError("vocab has merged tokens with identical bytes; it cannot be saved unambiguously")
        lines = [f"{VOCAB_HEADER} {VOCAB_VERSION} {self.size}"]
        lines += [f"{self.tokens[a].hex()} {self.tokens[b].hex()}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="ascii").splitlines()
        try:
            magic, version, size = lines[0].split()
            if magic != VOCAB_HEADER or int(version) != VOCAB_VERSION:
                raise ValueError
            size = int(size)
        except (IndexError, ValueError):
            raise ValueError(f"{path}: not a vocab file") from None
        by_bytes: dict[bytes, int] = {bytes([b]): b for b in range(256)}
        merges = []
        for n, line in enumerate(lines[1:], start=N_BASE):
            left, right = (bytes.fromhex(h) for h in line.split())
            merges.append((by_bytes[left], by_bytes[right]))
            by_bytes.setdefault(left + right, n)
        vocab = cls(tuple(merges))
        if vocab.size != size:
            raise ValueError(f"{path}: header says {size} tokens, file defines {vocab.size}")
        return vocab


def _as_byte_docs(corpus) -> list[bytes]:
    if isinstance(corpus, (bytes, bytearray)):
        return [bytes(corpus)]
    if isinstance(corpus, str):
        return [corpus.encode("utf-8")]
    return [d if isinstance(d, bytes) else d.encode("utf-8") for d in corpus]


def train_bpe(corpus, target_vocab: int = 512) -> Vocab:
    """Learn merges greedily by pair frequency until ``target_vocab`` tokens exist.

    Ties go to the pair whose left token has the smaller byte string, then the
    right token. Pairs never span document boundaries. Training stops early
    once no pair occurs at least twice.
    """
    if target_vocab < N_BASE:
        raise ValueError(f"target_vocab must be at least {N_BASE}")
    docs = [list(d) for d in _as_byte_docs(corpus) if d]
    if not docs:
        raise EmptyCorpus("cannot train a tokenizer on an empty corpus")

    table = [bytes([b]) for b in range(256)] + [b"", b"", b""]
    counts: Counter = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for i, seq in enumerate(docs):
        for pair in zip(seq, seq[1:]):
            counts[pair] += 1
            where[pair].add(i)

    merges = []
    while len(table) < target_vocab:
        best = None
        best_key = None
        for pair, c in counts.items():
            if c < 2:
                continue
            key = (-c, table[pair[0]], table[pair[1]], pair)
            if best_key is None or key < best_key:
                best, best_key = pair, key
        if best is None:
            break
        new_id = len(table)
        table.append(table[best[0]] + table[best[1]])
        merges.append(best)
        for i in sorted(where.pop(best, ())):
            seq = docs[i]
            for pair in zip(seq, seq[1:]):
                counts[pair] -= 1
                if counts[pair] == 0:
                    del counts[pair]
            docs[i] = seq = _merge(seq, best, new_id)
            for pair in zip(seq, seq[1:]):
                counts[pair] += 1
                where[pair].add(i)
    return Vocab(tuple(merges))


def _merge(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i, n = 0, len(seq)
    a, b = pair
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def encode_bytes(data: bytes, vocab: Vocab) -> list[int]:
    seq = list(data)
    ranks = vocab.ranks
    while len(seq) > 1:
        rank, pair = min(((ranks.get(p, len(ranks)), p) for p in zip(seq, seq[1:])))
        if rank == len(ranks):
            break
        seq = _merge(seq, pair, N_BASE + rank)
    return seq


def decode_bytes(ids: Iterable[int], vocab: Vocab) -> bytes:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise UnknownId(f"token id {i} outside vocabulary of size {vocab.size}")
        out.append(vocab.tokens[i])
    return b"".join(out)


@dataclass
class TokenSequence:
    ids: np.ndarray  # (N,) int64
    roles: np.ndarray = None  # (N,) uint8 Role codes

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.roles is None:
            self.roles = np.full(len(self.ids), Role.CONTENT, dtype=np.uint8)
        self.roles = np.asarray(self.roles, dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def attention_mask(self) -> np.ndarray:
        return self.roles == Role.CONTENT


def encode(text: str, vocab: Vocab) -> TokenSequence:
    return TokenSequence(encode_bytes(text.encode("utf-8"), vocab))


def decode(tokens: TokenSequence | Sequence[int], vocab: Vocab) -> str:
    """Specials decode to nothing; invalid UTF-8 is replaced rather than raised."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    return decode_bytes(ids, vocab).decode("utf-8", errors="replace")
