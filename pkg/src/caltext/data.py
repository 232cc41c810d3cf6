"""Corpus ingestion, preprocessing, and augmentation.

The manifest is UTF-8 tab-separated, one sample per line:

    image_path <TAB> writer_id <TAB> text <TAB> flags

with flags a comma-separated subset of {crossed_out_readable,
crossed_out_unreadable, overwritten}, possibly empty. Image paths are
resolved relative to the manifest's directory. Splits are assigned per
writer, never per line, so no writer's hand appears in two splits.
"""

import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import read_grayscale
from .tensor import Tensor

KNOWN_FLAGS = frozenset({"crossed_out_readable", "crossed_out_unreadable",
                         "overwritten"})


@dataclass(frozen=True)
class LineSample:
    image_path: str
    writer_id: str
    text: str
    flags: frozenset = frozenset()


@dataclass
class CorpusSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (line_no, reason)
    warnings: list = field(default_factory=list)

    def all_samples(self):
        return self.train + self.val + self.test


def normalize_text(text: str) -> str:
    """NFC composition, runs of spaces collapsed, outer whitespace dropped."""
    text = unicodedata.normalize("NFC", text)
    return " ".join(text.split())


def parse_manifest(path):
    """Yields (line_no, LineSample) for well-formed rows, raising on a
    malformed field count so broken manifests fail loudly."""
    base = Path(path).parent
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(
                    f"{path}:{line_no}: expected 4 tab-separated fields, "
                    f"got {len(fields)}")
            image_path, writer_id, text, flag_field = fields
            flags = frozenset(x for x in flag_field.split(",") if x)
            unknown = flags - KNOWN_FLAGS
            if unknown:
                raise ValueError(f"{path}:{line_no}: unknown flags {sorted(unknown)}")
            sample = LineSample(image_path=str(base / image_path),
                                writer_id=writer_id,
                                text=normalize_text(text),
                                flags=flags)
            out.append((line_no, sample))
    return out


def split_writers(writers, fractions, rng):
    """Partition writer ids into train/val/test by the given fractions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise ValueError(f"bad split fractions {fractions}")
    writers = sorted(set(writers))
    order = [writers[i] for i in rng.permutation(len(writers))]
    total = sum(fractions)
    n = len(order)
    n_train = round(n * fractions[0] / total)
    n_val = round(n * fractions[1] / total)
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return (set(order[:n_train]),
            set(order[n_train:n_train + n_val]),
            set(order[n_train + n_val:]))


def load_corpus(manifest_path, vocab, fractions=(0.75, 0.13, 0.12),
                seed: int = 0, require_images: bool = True,
                allow_blank: bool = True) -> CorpusSplit:
    """Load, validate, and split a manifest by writer.

    Rejected lines (unknown character, missing image, or blank text when
    `allow_blank` is false) are recorded with reasons rather than raised, so
    callers can decide how strict to be.
    """
    rows = parse_manifest(manifest_path)
    split = CorpusSplit()
    kept = []
    for line_no, sample in rows:
        if not sample.text and not allow_blank:
            split.rejected.append((line_no, "blank text"))
            continue
        bad_char = next((ch for ch in sample.text if ch not in vocab), None)
        if bad_char is not None:
            split.rejected.append(
                (line_no, f"character U+{ord(bad_char):04X} {bad_char!r} "
                          f"not in vocabulary"))
            continue
        if require_images and not Path(sample.image_path).is_file():
            split.rejected.append((line_no, f"missing image {sample.image_path}"))
            continue
        kept.append(sample)

    writers = {s.writer_id for s in kept}
    if len(writers) == 1:
        split.warnings.append(
            f"single writer {next(iter(writers))!r}: every line goes to train")
        split.train = kept
        return split

    rng = np.random.default_rng(seed)
    train_w, val_w, test_w = split_writers(writers, fractions, rng)
    for sample in kept:
        if sample.writer_id in train_w:
            split.train.append(sample)
        elif sample.writer_id in val_w:
            split.val.append(sample)
        else:
            split.test.append(sample)
    return split


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample; exact identity when extents already match."""
    in_h, in_w = image.shape
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    # pixel-center alignment: output center i maps to (i + 0.5) * scale - 0.5
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def preprocess(image: np.ndarray, target_h: int = 100,
               target_w: int = 800, pad_below_width: int = 300) -> Tensor:
    """Pad-then-resize a grayscale line image to the model's input extents.

    Images narrower than `pad_below_width` get white padding split equally
    left and right until the width doubles; everything is then bilinearly
    resized to target_h x target_w. Values stay in [0, 1], ink dark.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a grayscale H x W image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("zero-area image")
    if arr.max() > 1.0 + 1e-9:
        arr = arr / 255.0

    h, w = arr.shape
    if w < pad_below_width:
        left = w // 2
        right = w - left
        arr = np.pad(arr, ((0, 0), (left, right)), constant_values=1.0)

    resized = bilinear_resize(arr, target_h, target_w)
    resized = np.clip(resized, 0.0, 1.0)
    return Tensor(resized.reshape(target_h, target_w, 1))


def load_and_preprocess(path, target_h: int = 100, target_w: int = 800) -> Tensor:
    try:
        gray = read_grayscale(path)
        return preprocess(gray, target_h, target_w)
    except (OSError, ValueError) as err:
        raise ValueError(f"cannot preprocess {path}: {err}") from err


def salt_pepper(image: Tensor, amount: float = 0.04, salt_fraction: float = 0.2,
                rng=None) -> Tensor:
    """Speckle noise: each pixel independently replaced with probability
    `amount`; replacements are white with probability `salt_fraction`, else
    black. Returns a fresh constant tensor."""
    if not 0.0 <= amount <= 1.0:
        raise ValueError(f"noise amount {amount} outside [0, 1]")
    if amount == 0.0:
        return image
    if rng is None:
        raise ValueError("salt_pepper with amount > 0 needs an rng")
    data = image.data.copy()
    hit = rng.random(data.shape) < amount
    salt = rng.random(data.shape) < salt_fraction
    data[hit & salt] = 1.0
    data[hit & ~salt] = 0.0
    return Tensor(data)
