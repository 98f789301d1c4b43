"""Finite-difference kinematics on meter-scale (T, 2) waypoint arrays."""
from __future__ import annotations

import numpy as np

DT = 0.1
MIN_SEGMENT = 1e-6  # meters; shorter segments carry the previous heading


def segment_lengths(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points, axis=0), axis=1)


def speeds(points: np.ndarray, dt: float = DT) -> np.ndarray:
    return segment_lengths(points) / dt


def longitudinal_accel(points: np.ndarray, dt: float = DT) -> np.ndarray:
    return np.diff(speeds(points, dt)) / dt


def headings(points: np.ndarray) -> np.ndarray:
    """Unwrapped segment headings; degenerate segments reuse the last valid one."""
    d = np.diff(points, axis=0)
    raw = np.arctan2(d[:, 1], d[:, 0])
    valid = np.linalg.norm(d, axis=1) > MIN_SEGMENT
    if not np.any(valid):
        return np.zeros(len(d))
    idx = np.where(valid, np.arange(len(d)), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = np.argmax(valid)  # leading gaps take the first valid heading
    return np.unwrap(raw[idx])


def yaw_rates(points: np.ndarray, dt: float = DT) -> np.ndarray:
    return np.diff(headings(points)) / dt


def jerk_vectors(points: np.ndarray, dt: float = DT) -> np.ndarray:
    """Third forward differences divided by dt**3, shape (T - 3, 2)."""
    return np.diff(points, n=3, axis=0) / dt**3


def max_abs_jerk(points: np.ndarray, dt: float = DT) -> float:
    j = jerk_vectors(points, dt)
    return float(np.max(np.linalg.norm(j, axis=1))) if len(j) else 0.0


def distance_to_polyline(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Euclidean distance from every point to the closest polyline segment."""
    a = polyline[:-1][None, :, :]
    b = polyline[1:][None, :, :]
    p = points[:, None, :]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    u = np.clip(np.sum((p - a) * ab, axis=-1) / denom, 0.0, 1.0)
    closest = a + u[..., None] * ab
    return np.min(np.linalg.norm(p - closest, axis=-1), axis=1)
