from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

BLANK_SYMBOL = "<blank>"


class Vocab:
    """Word-level output vocabulary; id 0 is the blank (also used as start-of-sequence)."""

    def __init__(self, words: Iterable[str]):
        self.words = [BLANK_SYMBOL] + [w for w in words if w != BLANK_SYMBOL]
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise KeyError(f"word {word!r} not in vocabulary") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(w) for w in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words[1:]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip())
