"""Word-level tokenizer with a byte fallback.

Text is split into pieces (a word with its leading space, a punctuation mark
with its leading space, or a whitespace run). Pieces seen in the corpus get
their own id; anything else is spelled out as UTF-8 bytes, so encode/decode
round-trips every string.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)
_PIECE_RE = re.compile(r" ?[A-Za-z0-9]+| ?[^A-Za-z0-9\s]|\s+")
_BYTE_BASE = len(SPECIALS)


def pieces(text: str) -> list[str]:
    return _PIECE_RE.findall(text)


class Tokenizer:
    def __init__(self, words: list[str]):
        self.words = list(words)
        self.offset = _BYTE_BASE + 256
        self.word_to_id = {w: self.offset + i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, corpus: Iterable[str], min_count: int = 1) -> "Tokenizer":
        counts = Counter(p for text in corpus for p in pieces(text))
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return self.offset + len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for p in pieces(text):
            tid = self.word_to_id.get(p)
            if tid is not None:
                out.append(tid)
            else:
                out.extend(_BYTE_BASE + b for b in p.encode("utf-8"))
        return out

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        parts: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if _BYTE_BASE <= i < self.offset:
                buf.append(i - _BYTE_BASE)
                continue
            if buf:
                parts.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
            if i < _BYTE_BASE:
                if not skip_special:
                    parts.append(SPECIALS[i])
            else:
                parts.append(self.words[i - self.offset])
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"words": self.words}, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(json.loads(Path(path).read_text(encoding="utf-8"))["words"])
