"""Word-level tokenizer with a small configurable vocabulary.

Special ids are fixed: BOS=0, EOS=1, PAD=2, UNK=3. Content words are ranked by
training-corpus frequency with lexicographic tie-breaking, so vocabulary
construction is deterministic for a given corpus and size limit.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

from .data import CaptionText, DatasetSplit, SplitName, TokenSequence, normalize_caption

BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
UNK_ID = 3

SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")


class Tokenizer:
    def __init__(self, words: list[str]):
        self.tokens = list(SPECIAL_TOKENS) + list(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._to_id = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, caption: CaptionText | str) -> TokenSequence:
        text = caption.text if isinstance(caption, CaptionText) else normalize_caption(caption)
        ids = [self._to_id.get(word, UNK_ID) for word in text.split()]
        return TokenSequence(ids=(BOS_ID, *ids, EOS_ID))

    def decode(self, tokens: TokenSequence | list[int] | tuple[int, ...]) -> str:
        ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
        words = []
        for i in ids:
            if i in (BOS_ID, EOS_ID, PAD_ID):
                continue
            words.append("unk" if i == UNK_ID else self.tokens[i])
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        # integer header = number of special tokens, then one token per line
        lines = [str(len(SPECIAL_TOKENS))] + self.tokens
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty vocabulary file")
        n_special = int(lines[0])
        tokens = lines[1:]
        if len(tokens) < n_special:
            raise ValueError(f"{path}: fewer tokens than declared specials")
        if tuple(tokens[:n_special]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: unexpected special tokens {tokens[:n_special]}")
        return cls(words=tokens[n_special:])


def build_vocabulary(splits: list[DatasetSplit], max_size: int) -> Tokenizer:
    """Build a frequency-ranked word vocabulary from the training captions only."""
    if max_size < len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must be >= {len(SPECIAL_TOKENS)}, got {max_size}")
    counts: Counter[str] = Counter()
    for split in splits:
        if split.name != SplitName.TRAIN:
            continue
        for pair in split:
            for caption in pair.captions:
                counts.update(caption.words)
    if not counts:
        raise ValueError("no training captions to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max_size - len(SPECIAL_TOKENS)
    return Tokenizer(words=[word for word, _ in ranked[:budget]])
