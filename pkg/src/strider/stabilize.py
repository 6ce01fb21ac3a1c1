"""Posture stabilization primitives.

A planar compliant pendulum model captures how leg/structure stiffness turns
ground impacts into body oscillation; full-state feedback re-places its poles
to add damping. Capture-point error feedback produces the desired ZMP, which
is split into per-foot weights by projecting onto the inter-foot segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass
class CompliantLipm:
    """Spring-damper cart at constant height: commanded position y_u drives
    the body x through stiffness k and damping c; output is the model ZMP."""

    mass: float = 40.0
    stiffness: float = 2.0e4
    damping: float = 40.0
    com_height: float = 0.7
    gravity: float = 9.81
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self) -> None:
        if self.mass <= 0 or self.stiffness <= 0:
            raise ValueError("mass and stiffness must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        self.state = np.asarray(self.state, dtype=float).reshape(2).copy()
        self._disc_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def omega_n(self) -> float:
        return math.sqrt(self.stiffness / self.mass)

    @property
    def zeta(self) -> float:
        return self.damping / (2.0 * math.sqrt(self.stiffness * self.mass))

    def continuous_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        k_m = self.stiffness / self.mass
        c_m = self.damping / self.mass
        a = np.array([[0.0, 1.0], [-k_m, -c_m]])
        b = np.array([[0.0, 0.0], [k_m, c_m]])
        return a, b

    def _discrete(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        cached = self._disc_cache.get(dt)
        if cached is None:
            a, b = self.continuous_matrices()
            ad = scipy.linalg.expm(a * dt)
            # A is invertible (k > 0), so the zero-order hold integral is exact.
            bd = np.linalg.solve(a, (ad - np.eye(2)) @ b)
            cached = (ad, bd)
            self._disc_cache[dt] = cached
        return cached

    def acceleration(self, y_u: float, y_u_dot: float = 0.0) -> float:
        x, xd = self.state
        return (self.stiffness * (y_u - x) + self.damping * (y_u_dot - xd)) / self.mass

    def energy(self, y_u: float) -> float:
        """Mechanical energy about the commanded equilibrium."""
        x, xd = self.state
        return 0.5 * self.mass * xd**2 + 0.5 * self.stiffness * (x - y_u) ** 2


def compliant_step(
    model: CompliantLipm, y_u: float, dt: float, y_u_dot: float = 0.0
) -> tuple[np.ndarray, float]:
    """Advance the compliant model one step under a zero-order-hold input.

    Returns the new state and the model ZMP x - (z_c / g) * xdd. The
    discretization is exact for the linear dynamics, so undamped motion
    preserves amplitude and damped motion decays at the true rate.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ad, bd = model._discrete(dt)
    model.state = ad @ model.state + bd @ np.array([y_u, y_u_dot])
    acc = model.acceleration(y_u, y_u_dot)
    y_zmp = model.state[0] - (model.com_height / model.gravity) * acc
    return model.state.copy(), float(y_zmp)


@dataclass
class DampingController:
    """Full-state feedback u = -k1*x - k2*xd placing the compliant model's
    poles at the requested natural frequency and damping ratio."""

    k1: float
    k2: float
    omega_d: float
    zeta_d: float

    def command(self, state: np.ndarray) -> float:
        return -self.k1 * state[0] - self.k2 * state[1]

    def closed_loop_matrix(self, model: CompliantLipm) -> np.ndarray:
        a, _ = model.continuous_matrices()
        k_m = model.stiffness / model.mass
        b_pos = np.array([[0.0], [k_m]])
        return a - b_pos @ np.array([[self.k1, self.k2]])


def damping_feedback(
    model: CompliantLipm, omega_d: float, zeta_d: float
) -> DampingController:
    """Pole placement on the two-state model through the position input.

    The command-rate feedthrough is ignored in the design; the closed-loop
    characteristic polynomial is s^2 + 2 zeta_d omega_d s + omega_d^2.
    """
    if not 0.0 < zeta_d <= 1.2:
        raise ValueError("target damping ratio must be in (0, 1.2]")
    if omega_d <= 0:
        raise ValueError("target natural frequency must be positive")
    k_m = model.stiffness / model.mass
    c_m = model.damping / model.mass
    k1 = (omega_d**2 - k_m) / k_m
    k2 = (2.0 * zeta_d * omega_d - c_m) / k_m
    return DampingController(k1=k1, k2=k2, omega_d=omega_d, zeta_d=zeta_d)


@dataclass(frozen=True)
class CapturePointFeedback:
    """Gain on the capture-point error; omega = sqrt(g / z_c)."""

    gain: float = 3.0
    omega: float = math.sqrt(9.81 / 0.7)

    def __post_init__(self) -> None:
        if self.gain <= 0:
            raise ValueError("capture-point gain must be positive")


def czmp(
    ref_cp: tuple[float, float],
    meas_cp: tuple[float, float],
    ref_zmp: tuple[float, float],
    fb: CapturePointFeedback,
) -> tuple[float, float]:
    """Desired ZMP from capture-point error: ref_zmp + gain * (meas - ref)."""
    return (
        ref_zmp[0] + fb.gain * (meas_cp[0] - ref_cp[0]),
        ref_zmp[1] + fb.gain * (meas_cp[1] - ref_cp[1]),
    )


def foot_weight_distribution(
    czmp_xy: tuple[float, float],
    left_pos: tuple[float, float],
    right_pos: tuple[float, float],
) -> tuple[float, float]:
    """Split support weight between feet by projecting the desired ZMP onto
    the inter-foot segment; weights are clamped to [0, 1] and sum to 1."""
    left = np.asarray(left_pos, dtype=float)
    right = np.asarray(right_pos, dtype=float)
    seg = right - left
    seg_sq = float(seg @ seg)
    if seg_sq < 1e-18:
        raise ValueError("feet positions coincide")
    s = float((np.asarray(czmp_xy) - left) @ seg) / seg_sq
    s = min(1.0, max(0.0, s))
    return 1.0 - s, s
