"""Whitespace/punctuation tokenizer and deterministic vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, UNK, DEC_START, IMG_START, IMG_END = "<pad>", "<unk>", "<dec>", "<img>", "</img>"
SPECIALS = (PAD, UNK, DEC_START, IMG_START, IMG_END)
MAX_LEN = 128

_WORD = re.compile(r"\w+", re.UNICODE)


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def dec_id(self) -> int:
        return self.index[DEC_START]

    @property
    def n_special(self) -> int:
        return len(SPECIALS)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocab:
    """Specials first, then tokens by (count desc, token asc); rare tokens dropped."""
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(split_words(text))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> list[int]:
    return [vocab.id(w) for w in split_words(text)[:max_len]]
