"""Raster I/O.

Binary PGM (P5) and PPM (P6) are read and written natively so that emitted
rasters round-trip through this module bit-exactly. PNG goes through Pillow.
Grayscale pixels are exchanged with the rest of the package as float arrays
in [0, 1] with 1.0 = white background.
"""

import numpy as np
from PIL import Image


def _read_netpbm_tokens(data: bytes, count: int):
    """First `count` whitespace-separated header tokens, honoring # comments.
    Returns (tokens, offset of the byte right after the final separator)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated netpbm header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i:i + 1].isspace():
                i += 1
            tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from raster data
    return tokens, i + 1


def read_raster(path) -> np.ndarray:
    """Load PGM/PPM/PNG. Returns uint8 (H, W) grayscale or (H, W, 3) color."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] in (b"P5", b"P6"):
        tokens, offset = _read_netpbm_tokens(data, 4)
        magic, width, height, maxval = (tokens[0], int(tokens[1]),
                                        int(tokens[2]), int(tokens[3]))
        if width <= 0 or height <= 0:
            raise ValueError(f"zero-area raster in {path}")
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval} in {path}, expected 255")
        channels = 1 if magic == b"P5" else 3
        need = width * height * channels
        raw = data[offset:offset + need]
        if len(raw) < need:
            raise ValueError(f"truncated raster data in {path}")
        pixels = np.frombuffer(raw, dtype=np.uint8)
        if channels == 1:
            return pixels.reshape(height, width).copy()
        return pixels.reshape(height, width, 3).copy()
    try:
        with Image.open(path) as img:
            if img.mode in ("RGB", "RGBA", "P"):
                return np.asarray(img.convert("RGB"), dtype=np.uint8)
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except Exception as err:
        raise ValueError(f"unreadable image {path}: {err}") from err


def read_grayscale(path) -> np.ndarray:
    """Load any supported raster as float grayscale in [0, 1]."""
    raster = read_raster(path)
    if raster.ndim == 3:
        # luma weights for color input
        raster = (0.299 * raster[:, :, 0] + 0.587 * raster[:, :, 1]
                  + 0.114 * raster[:, :, 2])
    return np.asarray(raster, dtype=np.float64) / 255.0


def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs an H x W array, got shape {arr.shape}")
    arr = _to_uint8(arr)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 array, got shape {arr.shape}")
    arr = _to_uint8(arr)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def write_png(path, pixels: np.ndarray) -> None:
    arr = _to_uint8(np.asarray(pixels))
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    raise ValueError(f"expected uint8 or float pixels, got {arr.dtype}")
