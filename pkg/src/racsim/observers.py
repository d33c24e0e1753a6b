"""
Adaptive state observers.

The motion-state observer reconstructs velocity from a (noisy) position
signal plus the known actuation, so no velocity sensor is needed. Its
estimation error obeys the linear system

    d/dt [e_q, e_v] = [[-l1, 1], [-l2, 0]] [e_q, e_v]

so the characteristic polynomial is ``s^2 + l1 s + l2``. Larger gains make the
estimate converge faster but pass more measurement noise into it.

The torque observer integrates the velocity tracking error into an estimate
of the torque the drive must deliver; leakage keeps the estimate bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class ObserverState:
    q_hat: float | np.ndarray = 0.0
    v_hat: float | np.ndarray = 0.0
    tau_hat: float | np.ndarray = 0.0
    l1: float = 50.0
    l2: float = 625.0

    def __post_init__(self):
        if not (self.l1 > 0 and self.l2 > 0):
            raise ValueError("observer gains must be positive")
        for name in ("q_hat", "v_hat", "tau_hat"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"observer estimate {name} is not finite")


@dataclass(frozen=True)
class TorqueObserverGains:
    gamma_tau: float = 2000.0
    sigma_tau: float = 0.01

    def __post_init__(self):
        if not self.gamma_tau > 0 or self.sigma_tau < 0:
            raise ValueError("need gamma_tau > 0 and sigma_tau >= 0")


def velocity_observer_step(q_meas, tau, obs: ObserverState, inertia_hint, h: float) -> ObserverState:
    """Forward-Euler update of position and velocity estimates."""
    if not h > 0:
        raise ValueError("step size must be positive")
    innov = np.asarray(q_meas, dtype=float) - obs.q_hat
    q_hat = obs.q_hat + h * (obs.v_hat + obs.l1 * innov)
    v_hat = obs.v_hat + h * (obs.l2 * innov + np.asarray(tau, dtype=float) / inertia_hint)
    if not (np.all(np.isfinite(q_hat)) and np.all(np.isfinite(v_hat))):
        raise FloatingPointError("velocity observer diverged to a non-finite estimate")
    return replace(obs, q_hat=q_hat, v_hat=v_hat)


def torque_observer_step(omega_meas, omega_ref, obs: ObserverState, gains: TorqueObserverGains,
                         h: float) -> ObserverState:
    """Required-torque estimate ``tau' = tau + h (gamma (w_ref - w) - sigma tau)``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    err = np.asarray(omega_ref, dtype=float) - np.asarray(omega_meas, dtype=float)
    tau_hat = obs.tau_hat + h * (gains.gamma_tau * err - gains.sigma_tau * obs.tau_hat)
    return replace(obs, tau_hat=tau_hat)


def observer_poles(l1: float, l2: float) -> np.ndarray:
    """Continuous-time eigenvalues of the velocity-observer error dynamics."""
    return np.roots([1.0, l1, l2])


def discrete_observer_poles(l1: float, l2: float, h: float) -> np.ndarray:
    """Eigenvalues of the Euler-discretised error map (per step)."""
    A = np.array([[1.0 - h * l1, h], [-h * l2, 1.0]])
    return np.linalg.eigvals(A)


def critically_damped_gains(bandwidth: float) -> tuple[float, float]:
    """``(l1, l2)`` placing both observer poles at ``-bandwidth``."""
    return 2.0 * bandwidth, bandwidth * bandwidth


def torque_fixed_point(error: float, gains: TorqueObserverGains) -> float:
    """Steady-state torque estimate under a constant velocity error."""
    if gains.sigma_tau == 0:
        return math.copysign(math.inf, error) if error else 0.0
    return gains.gamma_tau * error / gains.sigma_tau
