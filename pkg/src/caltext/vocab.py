"""Symbol inventory mapping characters to dense indices.

Index 0 is reserved for the end-of-sequence marker and never maps to a
printable symbol; file line i of a vocabulary file defines index i + 1.
"""

import unicodedata

EOS_INDEX = 0


class Vocabulary:
    def __init__(self, symbols):
        cleaned = [unicodedata.normalize("NFC", s) for s in symbols]
        if any(s == "" for s in cleaned):
            raise ValueError("vocabulary symbols must be nonempty")
        if len(set(cleaned)) != len(cleaned):
            dupes = sorted({s for s in cleaned if cleaned.count(s) > 1})
            raise ValueError(f"duplicate vocabulary symbols: {dupes!r}")
        self.symbols = cleaned
        self._index = {s: i + 1 for i, s in enumerate(cleaned)}

    @property
    def size(self) -> int:
        """k: printable symbols plus the reserved end marker."""
        return len(self.symbols) + 1

    def __contains__(self, symbol) -> bool:
        return symbol in self._index

    def index_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            point = "+".join(f"U+{ord(ch):04X}" for ch in symbol)
            raise ValueError(f"symbol {symbol!r} ({point}) not in vocabulary") from None

    def symbol_of(self, index: int) -> str:
        if not 1 <= index < self.size:
            raise ValueError(f"index {index} outside printable range 1..{self.size - 1}")
        return self.symbols[index - 1]

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            raw = f.read()
        lines = raw.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return Vocabulary(lines)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for s in self.symbols:
                f.write(s + "\n")


def encode_text(text: str, vocab: Vocabulary):
    """Character indices of `text` with the end marker appended."""
    return [vocab.index_of(ch) for ch in text] + [EOS_INDEX]


def decode_indices(indices, vocab: Vocabulary) -> str:
    """Inverse of encode_text; decoding stops at the first end marker."""
    out = []
    for idx in indices:
        if not 0 <= idx < vocab.size:
            raise ValueError(f"index {idx} outside vocabulary of size {vocab.size}")
        if idx == EOS_INDEX:
            break
        out.append(vocab.symbol_of(idx))
    return "".join(out)
