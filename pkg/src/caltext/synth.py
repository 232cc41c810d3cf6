"""Synthetic glyph-line corpus for desk-scale runs.

Five fixed 5x7 glyph shapes are rendered onto white line images, laid out
right to left: the first character of the text sits at the right edge, the
way a right-to-left script is displayed, while the ground-truth string stays
in logical reading order. The fixture corpus is five lines, one of them
blank (all-white image, empty text), under a single writer id.

Usable as a module: `python -m caltext.synth OUTDIR` writes images, a
manifest, and a vocabulary file.
"""

import sys
from pathlib import Path

import numpy as np

from .images import write_pgm

GLYPHS = {
    "a": ("#####",
          "#...#",
          "#...#",
          "#####",
          "#...#",
          "#...#",
          "#...#"),
    "b": ("####.",
          "#...#",
          "#...#",
          "####.",
          "#...#",
          "#...#",
          "####."),
    "c": (".####",
          "#....",
          "#....",
          "#....",
          "#....",
          "#....",
          ".####"),
    "d": ("..#..",
          "..#..",
          "..#..",
          "#####",
          "..#..",
          "..#..",
          "..#.."),
    "e": ("#####",
          "#....",
          "#....",
          "####.",
          "#....",
          "#....",
          "#####"),
}

FIXTURE_TEXTS = ("abc", "de", "cad", "", "bead")
FIXTURE_SYMBOLS = ("a", "b", "c", "d", "e")


def render_text(text: str, height: int = 32, width: int = 256,
                scale: int = 3, gap: int = 6, margin: int = 8) -> np.ndarray:
    """White float canvas with `text` drawn right to left, ink = 0.0."""
    canvas = np.ones((height, width))
    glyph_w, glyph_h = 5 * scale, 7 * scale
    if glyph_h > height:
        raise ValueError(f"glyph height {glyph_h} exceeds canvas height {height}")
    top = (height - glyph_h) // 2
    x_right = width - margin
    for ch in text:
        if ch not in GLYPHS:
            raise ValueError(f"no glyph for character {ch!r}")
        x_left = x_right - glyph_w
        if x_left < margin:
            raise ValueError(f"text {text!r} does not fit a {width}-wide canvas")
        rows = GLYPHS[ch]
        for gy in range(7):
            for gx in range(5):
                if rows[gy][gx] == "#":
                    y0 = top + gy * scale
                    x0 = x_left + gx * scale
                    canvas[y0:y0 + scale, x0:x0 + scale] = 0.0
        x_right = x_left - gap
    return canvas


def write_fixture(out_dir, height: int = 32, width: int = 256):
    """Write the five-line corpus; returns (manifest_path, vocab_path)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    manifest_rows = []
    for i, text in enumerate(FIXTURE_TEXTS):
        name = f"line{i}.pgm"
        canvas = render_text(text, height=height, width=width)
        write_pgm(out / name, np.rint(canvas * 255).astype(np.uint8))
        manifest_rows.append(f"{name}\tw0\t{text}\t")

    manifest_path = out / "manifest.tsv"
    manifest_path.write_text("\n".join(manifest_rows) + "\n", encoding="utf-8")
    vocab_path = out / "vocab.txt"
    vocab_path.write_text("".join(s + "\n" for s in FIXTURE_SYMBOLS),
                          encoding="utf-8")
    return manifest_path, vocab_path


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m caltext.synth OUTDIR", file=sys.stderr)
        return 1
    manifest, vocab = write_fixture(argv[0])
    print(f"wrote {manifest} and {vocab}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
