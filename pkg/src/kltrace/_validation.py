"""Input validation helpers used across the package.

Mirrors the sklearn convention of small check_* functions that either
return the validated array or raise a typed error.
"""

from __future__ import annotations

import numpy as np

from kltrace.errors import ConfigError, DataError


def check_frame(frame: np.ndarray, name: str = "frame") -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DataError(f"{name} must be (H, W, 3), got {frame.shape}")
    if frame.dtype != np.uint8:
        raise DataError(f"{name} must be uint8, got {frame.dtype}")
    return frame

def check_frame_divisible(frame: np.ndarray, patch: int, name: str = "frame") -> np.ndarray:
    frame = check_frame(frame, name)
    h, w = frame.shape[:2]
    if h % patch or w % patch:
        raise ConfigError(f"{name} dims {h}x{w} not divisible by patch size {patch}")
    return frame

def check_flow(flow: np.ndarray, shape_hw: tuple[int, int] | None = None) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow must be (H, W, 2), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise DataError("flow contains non-finite values")
    if shape_hw is not None and flow.shape[:2] != shape_hw:
        raise DataError(f"flow shape {flow.shape[:2]} != frame shape {shape_hw}")
    return flow

def check_point_in_frame(x: float, y: float, width: int, height: int, name: str = "point") -> None:
    if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
        raise ConfigError(f"{name} ({x}, {y}) outside frame {width}x{height}")

def check_probability(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"{name} must be in [0, 1], got {p}")
    return p
