"""Spatiotemporal attention rendering.

Each decode step's attention map is tinted by where its step falls in time,
interpolating from the first-step color (default yellow) to the last-step
color (default green), and the tinted maps are summed into one image:

    t_hat = (step - 1) / max(T - 1, 1)
    color = (1 - t_hat) * first_color + t_hat * last_color
    combined = sum over steps of color * alpha

The combined image is jointly max-normalized (one scale for all channels, so
hue is preserved) and clamped, then alpha-blended over the line image.
"""

import numpy as np

from .data import bilinear_resize

YELLOW = (1.0, 1.0, 0.0)
GREEN = (0.0, 1.0, 0.0)


def step_color(step: int, total_steps: int, first_color=YELLOW,
               last_color=GREEN) -> np.ndarray:
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside 1..{total_steps}")
    t_hat = (step - 1) / max(total_steps - 1, 1)
    c0 = np.asarray(first_color, dtype=np.float64)
    c1 = np.asarray(last_color, dtype=np.float64)
    return (1.0 - t_hat) * c0 + t_hat * c1


def colorize_attention(alphas, grid_shape, first_color=YELLOW,
                       last_color=GREEN, normalize: bool = True) -> np.ndarray:
    """Combine per-step attention maps into an (h, w, 3) color image.

    `alphas` may be flat (L,) vectors or (h, w) maps. With normalize=False
    the raw tinted sum is returned, which is linear in the attention maps.
    """
    alphas = list(alphas)
    if not alphas:
        raise ValueError("need at least one attention map")
    h, w = grid_shape
    total = len(alphas)
    combined = np.zeros((h, w, 3))
    for step, alpha in enumerate(alphas, start=1):
        plane = np.asarray(alpha, dtype=np.float64).reshape(h, w)
        combined += plane[:, :, None] * step_color(step, total, first_color,
                                                   last_color)[None, None, :]
    if normalize:
        peak = combined.max()
        if peak > 0:
            combined = combined / peak
        combined = np.clip(combined, 0.0, 1.0)
    return combined


def overlay(image: np.ndarray, colored: np.ndarray, opacity: float) -> np.ndarray:
    """Blend a colored attention grid over a grayscale image.

    The grid is bilinearly upsampled to the image extents; blending is
    out = (1 - opacity) * gray + opacity * clamp(gray + colored), an additive
    tint that keeps the underlying strokes visible.
    """
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity {opacity} outside [0, 1]")
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3 and gray.shape[2] == 1:
        gray = gray[:, :, 0]
    if gray.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {gray.shape}")
    height, width = gray.shape

    up = np.stack([bilinear_resize(colored[:, :, c], height, width)
                   for c in range(3)], axis=2)
    base = np.repeat(gray[:, :, None], 3, axis=2)
    tinted = np.clip(base + up, 0.0, 1.0)
    return (1.0 - opacity) * base + opacity * tinted


def attention_overlay(image: np.ndarray, alphas, grid_shape,
                      opacity: float = 0.6) -> np.ndarray:
    """One-call path from decode attentions to a blended raster."""
    colored = colorize_attention(alphas, grid_shape)
    return overlay(image, colored, opacity)
