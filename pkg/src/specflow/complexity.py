"""Tortuosity x jerk-energy importance weights (meter-scale inputs)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinematics as kin

EPS_DISP = 0.5  # m
TAU_CAP = 10.0
ALPHA = 0.05
EXPONENT_CAP = 50.0


@dataclass(frozen=True)
class ComplexityWeight:
    tortuosity: float
    jerk_energy: float
    weight: float
    alpha: float


def tortuosity(x: np.ndarray, eps_disp: float = EPS_DISP, tau_cap: float = TAU_CAP) -> float:
    x = np.asarray(x, dtype=np.float64)
    disp = float(np.linalg.norm(x[-1] - x[0]))
    if disp <= eps_disp:
        return tau_cap
    return float(np.sum(kin.segment_lengths(x))) / disp


def jerk_energy(x: np.ndarray, alpha: float = ALPHA, dt: float = kin.DT, cap: float = EXPONENT_CAP) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 4:
        raise ValueError("jerk needs at least 4 points")
    j = kin.jerk_vectors(x, dt)
    return float(np.exp(min(cap, alpha * float(np.sum(j * j)) * dt)))


def complexity_weight(x: np.ndarray, alpha: float = ALPHA) -> ComplexityWeight:
    tau = tortuosity(x)
    je = jerk_energy(x, alpha)
    return ComplexityWeight(tortuosity=tau, jerk_energy=je, weight=tau * je, alpha=alpha)


def batch_normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight batch")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and positive")
    return w * (w.size / np.sum(w))
