"""Heatmap upscaling, color coding, compositing and PNG output."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

# jet-style control points: (position, (r, g, b))
JET = (
    (0.0, (0, 0, 131)),
    (0.125, (0, 60, 170)),
    (0.375, (5, 255, 255)),
    (0.625, (255, 255, 0)),
    (0.875, (250, 0, 0)),
    (1.0, (128, 0, 0)),
)

DEFAULT_ALPHA = 0.5
BOX_COLOR = (255, 255, 255)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers: src = (dst + 0.5) * scale - 0.5, clamped to the border
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upscale_bilinear(values: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a 2-D map with half-pixel center alignment."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {v.shape}")
    h, w = v.shape
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    rows = v[y0] * (1 - fy)[:, None] + v[y1] * fy[:, None]
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    # convex weights can overshoot the source range by rounding only
    return np.clip(out, v.min(), v.max())


def apply_colormap(values: np.ndarray, palette=JET) -> np.ndarray:
    """Map values in [0, 1] to ``H x W x 3`` uint8 via piecewise-linear palette.

    Out-of-range values are clamped (with a warning giving the count).
    Channel values are truncated toward zero.
    """
    v = np.asarray(values, dtype=np.float64)
    bad = int(np.count_nonzero((v < 0) | (v > 1) | np.isnan(v)))
    if bad:
        warnings.warn(f"apply_colormap: clamped {bad} value(s) outside [0, 1]", RuntimeWarning, stacklevel=2)
        v = np.clip(np.nan_to_num(v, nan=0.0), 0.0, 1.0)
    xs = [p for p, _ in palette]
    rgb = np.stack([np.interp(v, xs, [c[k] for _, c in palette]) for k in range(3)], axis=-1)
    return np.floor(rgb).astype(np.uint8)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if image.shape != heat.shape:
        raise ValueError(f"image shape {image.shape} != heatmap shape {heat.shape}")
    out = (1 - alpha) * image.astype(np.float64) + alpha * heat.astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def draw_box(image: np.ndarray, box, color=BOX_COLOR, thickness: int = 1) -> np.ndarray:
    """Copy of ``image`` with the outline of ``box`` (x0, y0, x1, y1) burned in.

    Corner coordinates are inclusive pixel positions; the outline grows
    inward with ``thickness``.
    """
    out = image.copy()
    if thickness <= 0:
        return out
    h, w = out.shape[:2]
    x0, y0, x1, y1 = (int(round(c)) for c in box)
    x0, x1 = sorted((min(max(x0, 0), w - 1), min(max(x1, 0), w - 1)))
    y0, y1 = sorted((min(max(y0, 0), h - 1), min(max(y1, 0), h - 1)))
    t = thickness
    out[y0:min(y0 + t, y1 + 1), x0:x1 + 1] = color
    out[max(y1 - t + 1, y0):y1 + 1, x0:x1 + 1] = color
    out[y0:y1 + 1, x0:min(x0 + t, x1 + 1)] = color
    out[y0:y1 + 1, max(x1 - t + 1, x0):x1 + 1] = color
    return out


def to_rgb8(image: np.ndarray) -> np.ndarray:
    """``3 x H x W`` float image in [0, 1] -> ``H x W x 3`` uint8."""
    return np.clip(np.rint(np.transpose(image, (1, 2, 0)) * 255), 0, 255).astype(np.uint8)


def render_heatmap(image_rgb: np.ndarray, normalized: np.ndarray, box=None,
                   alpha: float = DEFAULT_ALPHA, palette=JET) -> np.ndarray:
    """Full pipeline: upscale, color, composite, then outline the box if given."""
    h, w = image_rgb.shape[:2]
    heat = apply_colormap(upscale_bilinear(normalized, w, h), palette)
    out = overlay(image_rgb, heat, alpha)
    if box is not None:
        out = draw_box(out, box)
    return out


def write_png(path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")
    return path
