"""WordPiece-style subword vocabulary, trained by greedy pair merging."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")
CONT = "##"


class VocabError(ValueError):
    pass


def normalize(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).lower().split())


@dataclass
class Vocabulary:
    pieces: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.pieces[:4]) != SPECIALS:
            raise VocabError(f"first four pieces must be {SPECIALS}")
        self.index = {p: i for i, p in enumerate(self.pieces)}
        if len(self.index) != len(self.pieces):
            raise VocabError("duplicate pieces in vocabulary")

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def encode(self, text: str) -> list[int]:
        return encode(text, self)

    def decode(self, ids: Iterable[int]) -> str:
        return decode(ids, self)


def build_vocab(corpus: Iterable[str], target_size: int = 512) -> Vocabulary:
    """Train a vocabulary of at most ``target_size`` pieces.

    Starts from every character seen (both word-initial and ``##`` forms),
    then repeatedly merges the most frequent adjacent piece pair, ties
    broken by the lexicographically smallest merged piece. Stops at
    ``target_size`` or when no pair is left.
    """
    words: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        words.update(normalize(line).split())
    if n_lines == 0 or not words:
        raise VocabError("cannot build a vocabulary from an empty corpus")

    chars = sorted({ch for w in words for ch in w})
    base = [*SPECIALS] + chars + [CONT + ch for ch in chars]
    if target_size <= len(base):
        raise VocabError(f"target_size {target_size} too small for {len(base)} base pieces")

    pieces = list(base)
    known = set(pieces)
    # each word as its current segmentation
    segs = {w: [w[0]] + [CONT + ch for ch in w[1:]] for w in sorted(words)}
    while len(pieces) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, seg in segs.items():
            for a, b in zip(seg, seg[1:]):
                pairs[(a, b)] += words[w]
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], _merge(*kv[0])))[0]
        merged = _merge(*best)
        for w, seg in segs.items():
            segs[w] = _apply_merge(seg, best, merged)
        if merged not in known:
            known.add(merged)
            pieces.append(merged)
    return Vocabulary(pieces)


def _merge(a: str, b: str) -> str:
    return a + b[len(CONT):]


def _apply_merge(seg: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out = []
    i = 0
    while i < len(seg):
        if i + 1 < len(seg) and (seg[i], seg[i + 1]) == pair:
            out.append(merged)
            i += 2
        else:
            out.append(seg[i])
            i += 1
    return out


def _wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab.index:
                found = vocab.index[piece]
                break
            end -= 1
        if found is None:
            # unseen character: emit UNK for it and carry on after it
            ids.append(UNK)
            start += 1
        else:
            ids.append(found)
            start = end
    return ids


def encode(text: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first per whitespace-separated word."""
    ids: list[int] = []
    for word in normalize(text).split():
        ids.extend(_wordpiece(word, vocab))
    return ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} out of range [0, {len(vocab)})")
        if i in (PAD, BOS, EOS):
            continue
        piece = vocab.pieces[i]
        if piece.startswith(CONT) and words:
            words[-1] += piece[len(CONT):]
        elif piece.startswith(CONT):
            words.append(piece[len(CONT):])
        else:
            words.append(piece)
    return " ".join(words)
