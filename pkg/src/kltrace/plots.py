"""Deterministic PNG rendering of traces: heatmaps, markers, panels.

Pure numpy + PIL so the same inputs produce the same bytes on every run.
"""

from __future__ import annotations

import numpy as np

from kltrace.dataset_io import write_png
from kltrace.errors import ConfigError

# five anchor colors interpolated to a 256-entry perceptual-ish ramp
_ANCHORS = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=np.float64)

_INVALID_GRAY = np.array([40, 40, 40], dtype=np.uint8)


def _lut() -> np.ndarray:
    xs = np.linspace(0.0, 1.0, len(_ANCHORS))
    t = np.linspace(0.0, 1.0, 256)
    return np.stack([np.interp(t, xs, _ANCHORS[:, c]) for c in range(3)], axis=1).round().astype(np.uint8)


_LUT = _lut()


def colorize(values: np.ndarray, validity: np.ndarray | None = None,
             vmax: float | None = None) -> np.ndarray:
    """Map non-negative cell values to colors; invalid cells go dark gray."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError(f"heatmap values must be 2-d, got shape {values.shape}")
    if validity is None:
        validity = np.ones(values.shape, dtype=bool)
    top = float(vmax) if vmax is not None else float(values[validity].max()) if validity.any() else 0.0
    scaled = np.zeros_like(values) if top <= 0 else np.clip(values / top, 0.0, 1.0)
    idx = np.clip((scaled * 255).round().astype(int), 0, 255)
    img = _LUT[idx]
    img[~validity] = _INVALID_GRAY
    return img


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor integer upscale of an (h, w, 3) image."""
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def heatmap_image(values: np.ndarray, validity: np.ndarray, patch: int) -> np.ndarray:
    """Cell map rendered at pixel resolution (one patch = patch x patch px)."""
    return upscale(colorize(values, validity), patch)


def draw_cross(img: np.ndarray, x: float, y: float, color=(255, 0, 0), arm: int = 3) -> None:
    """Paint a small + marker in place, clipped at the borders."""
    h, w = img.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    if not (0 <= cx < w and 0 <= cy < h):
        return
    for d in range(-arm, arm + 1):
        if 0 <= cy + d < h:
            img[cy + d, cx] = color
        if 0 <= cx + d < w:
            img[cy, cx + d] = color


def hstack_panels(panels: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Side-by-side layout with white separators; panels share a height."""
    if not panels:
        raise ConfigError("panel list is empty")
    h = panels[0].shape[0]
    if any(p.shape[0] != h for p in panels):
        raise ConfigError("panels have different heights")
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p.astype(np.uint8))
    return np.concatenate(parts, axis=1)


def trace_panel(
    f1: np.ndarray,
    f1_pert: np.ndarray,
    f2: np.ndarray,
    values: np.ndarray,
    validity: np.ndarray,
    patch: int,
    query: tuple[float, float],
    target: tuple[float, float] | None = None,
    gt: tuple[float, float] | None = None,
) -> np.ndarray:
    """clean f1 | perturbed f1 | f2 with markers | divergence heatmap.

    Query in yellow on the first frames, prediction in red and ground truth
    in green on the third.
    """
    a = f1.copy()
    b = f1_pert.copy()
    c = f2.copy()
    draw_cross(a, query[0], query[1], color=(255, 255, 0))
    draw_cross(b, query[0], query[1], color=(255, 255, 0))
    if gt is not None:
        draw_cross(c, gt[0], gt[1], color=(0, 255, 0))
    if target is not None:
        draw_cross(c, target[0], target[1], color=(255, 0, 0))
    hm = heatmap_image(values, validity, patch)
    if hm.shape[0] != a.shape[0]:
        raise ConfigError("heatmap and frame sizes disagree")
    return hstack_panels([a, b, c, hm])


def save_plot(path, img: np.ndarray) -> None:
    write_png(path, img)
