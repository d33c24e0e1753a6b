"""
Subsystem-based robust adaptive control (RAC) for uncertain SF chains.

Each subsystem ``i`` gets a virtual control

    alpha_i = g_hat_i^-1 ( [r' if i == 1] - f_hat_i - k_i e_i
                           - rho_i tanh(e_i / eps_i) - g_hat_{i-1}^T e_{i-1} )

with ``e_1 = x_1 - r`` and ``e_i = x_i - alpha_{i-1}``. The last virtual
control is the plant input. The time derivative of ``alpha_{i-1}`` is never
formed; it is treated as part of the uncertainty that the adaptive bound
``rho_i`` has to cover. The ``-g_hat_{i-1}^T e_{i-1}`` connector cancels the
cross term that subsystem ``i-1`` leaves in the summed Lyapunov derivative.

Gains and bounds are arrays shaped ``(..., n, m)``; leading axes batch
several controllers (one per tuning candidate) through the same call.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .sfcore import IntegrationError, SaturationLimits, saturate


def _as_block(value, n: int, m: int) -> np.ndarray:
    """Broadcast a scalar, ``(n,)``, ``(n, m)`` or batched ``(..., n, m)`` gain."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full((n, m), float(a))
    if a.ndim == 1:
        if a.shape[0] != n:
            raise ValueError(f"per-subsystem gain needs length {n}, got {a.shape[0]}")
        return np.repeat(a[:, None], m, axis=1)
    if a.shape[-2:] != (n, m):
        raise ValueError(f"gain block must end in shape ({n}, {m}), got {a.shape}")
    return a


@dataclass(frozen=True)
class SubsystemGains:
    """Tunables of every subsystem: feedback ``k``, adaptation rate ``gamma``,
    leakage ``sigma`` and tanh smoothing width ``eps``."""

    k: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        for name, lo_ok in (("k", False), ("gamma", False), ("sigma", True), ("eps", False)):
            a = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"gain {name} must be finite")
            if lo_ok and np.any(a < 0):
                raise ValueError(f"gain {name} must be >= 0")
            if not lo_ok and np.any(a <= 0):
                raise ValueError(f"gain {name} must be > 0")

    @classmethod
    def build(cls, n: int, m: int = 1, k=1.0, gamma=1.0, sigma=0.0, eps=1.0) -> "SubsystemGains":
        return cls(k=_as_block(k, n, m), gamma=_as_block(gamma, n, m),
                   sigma=_as_block(sigma, n, m), eps=_as_block(eps, n, m))

    @property
    def shape(self) -> tuple:
        return np.broadcast_shapes(self.k.shape, self.gamma.shape, self.sigma.shape, self.eps.shape)


@dataclass(frozen=True)
class ControllerState:
    """Adaptive bounds ``rho_hat`` plus the last cascade evaluation."""

    rho_hat: np.ndarray
    alpha: Optional[np.ndarray] = None
    errors: Optional[np.ndarray] = None
    u_raw: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, shape, rho0=0.0) -> "ControllerState":
        rho = np.broadcast_to(np.asarray(rho0, dtype=float), shape).copy()
        if np.any(rho < 0):
            raise ValueError("initial bound estimates must be >= 0")
        return cls(rho_hat=rho)


def adapt_bound(rho_hat, e, gains: SubsystemGains, h: float):
    """One Euler step of the sigma-modified bound law, projected onto ``rho >= 0``.

    ``rho' = max(0, rho + h * gamma * (|e| - sigma * rho))``
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    rho = np.asarray(rho_hat, dtype=float)
    upd = rho + h * gains.gamma * (np.abs(e) - gains.sigma * rho)
    out = np.maximum(0.0, upd)
    return float(out) if out.ndim == 0 else out


def connector_term(e_i, g_hat_i, matrix: Optional[bool] = None):
    """Increment ``-g_hat_i^T e_i`` injected into subsystem ``i+1``.

    ``matrix`` says whether ``g_hat_i`` is a square gain matrix; by default it
    is inferred from having one more axis than ``e_i``.
    """
    e_i = np.asarray(e_i, dtype=float)
    g = np.asarray(g_hat_i, dtype=float)
    if matrix is None:
        matrix = g.ndim == e_i.ndim + 1 and g.ndim >= 2
    if matrix:
        out = -np.einsum("...ji,...j->...i", g, e_i)
    else:
        out = -g * e_i
    return float(out) if out.ndim == 0 else out


def _block(G, i, matrix):
    return G[..., i, :, :] if matrix else G[..., i, :]


def _apply_inverse(g, v, matrix):
    if matrix:
        batch = np.broadcast_shapes(g.shape[:-2], v.shape[:-1])
        g = np.broadcast_to(g, batch + g.shape[-2:])
        v = np.broadcast_to(v, batch + v.shape[-1:])
        return np.linalg.solve(g, v[..., None])[..., 0]
    return v / g


def _resolve_gain_model(g_hat, x, t, n, m):
    if g_hat is None:
        return np.ones((n, m))
    return np.asarray(g_hat(x, t) if callable(g_hat) else g_hat, dtype=float)


def _cascade(x, ref, gains: SubsystemGains, state: ControllerState, limits: Optional[SaturationLimits],
             h: float, t: float, model_terms: Optional[Callable], g_hat, check: bool = True):
    k, eps = gains.k, gains.eps
    n, m = k.shape[-2], k.shape[-1]
    x = np.asarray(x, dtype=float)
    chain = x[..., : n * m].reshape(x.shape[:-1] + (n, m))
    r = np.asarray(ref[0], dtype=float).reshape(m)
    r_dot = np.asarray(ref[1], dtype=float).reshape(m) if len(ref) > 1 else np.zeros(m)
    G = _resolve_gain_model(g_hat, x, t, n, m)
    matrix = G.ndim >= 3 and G.shape[-3:] == (n, m, m)
    F = np.asarray(model_terms(x, t), dtype=float) if model_terms is not None else None
    rho = state.rho_hat

    errors = []
    alphas = []
    prev = r
    for i in range(n):
        e_i = chain[..., i, :] - prev
        rhs = -k[..., i, :] * e_i - rho[..., i, :] * np.tanh(e_i / eps[..., i, :])
        if i == 0:
            rhs = rhs + r_dot
        if F is not None:
            rhs = rhs - F[..., i, :]
        if i > 0:
            rhs = rhs + connector_term(errors[-1], _block(G, i - 1, matrix), matrix)
        alpha_i = _apply_inverse(_block(G, i, matrix), rhs, matrix)
        if check and not np.all(np.isfinite(alpha_i)):
            raise IntegrationError("non-finite virtual control", i + 1, t)
        errors.append(e_i)
        alphas.append(alpha_i)
        prev = alpha_i

    err = np.stack(errors, axis=-2)
    alpha = np.stack(alphas, axis=-2)
    u_raw = alpha[..., -1, :]
    u = saturate(u_raw, limits) if limits is not None else u_raw
    new_state = replace(state, rho_hat=adapt_bound(rho, err, gains, h), alpha=alpha, errors=err, u_raw=u_raw)
    return u, new_state


def control_step_model_free(x, ref, gains: SubsystemGains, ctrl_state: ControllerState,
                            limits: Optional[SaturationLimits], h: float, t: float = 0.0, g_hat=None):
    """One RAC update without any plant model.

    ``ref`` is ``(r, r_dot, ...)``; ``g_hat`` optionally gives nominal input
    gains (constant array or ``(x, t)`` callable), defaulting to ones.
    Returns ``(u, ctrl_state')`` with ``u`` inside ``limits``.
    """
    return _cascade(x, ref, gains, ctrl_state, limits, h, t, None, g_hat)


def control_step_model_based(x, ref, gains: SubsystemGains, ctrl_state: ControllerState,
                             limits: Optional[SaturationLimits], h: float, model_terms: Callable,
                             t: float = 0.0, g_hat=None):
    """As :func:`control_step_model_free`, with ``-f_hat_i(x, t)`` feedforward.

    ``model_terms(x, t)`` returns the stacked ``(..., n, m)`` known terms.
    """
    return _cascade(x, ref, gains, ctrl_state, limits, h, t, model_terms, g_hat)


class RACController:
    """Stateful RAC policy with the rollout interface used by ``simulate``."""

    policy = "rac"
    fallback_active = True

    def __init__(self, gains: SubsystemGains, h: float, limits: Optional[SaturationLimits] = None,
                 model_terms: Optional[Callable] = None, g_hat=None, rho0=0.0):
        self.gains = gains
        self.h = h
        self.limits = limits
        self.model_terms = model_terms
        self.g_hat = g_hat
        self.rho0 = rho0
        self.state = ControllerState.initial(gains.shape, rho0)

    @property
    def n(self) -> int:
        return self.gains.k.shape[-2]

    @property
    def m(self) -> int:
        return self.gains.k.shape[-1]

    def reset(self, rng=None):
        self.state = ControllerState.initial(self.gains.shape, self.rho0)

    def peek(self, t, x, ref):
        """Evaluate the cascade without committing the adaptive update."""
        return _cascade(x, ref, self.gains, self.state, None, self.h, t, self.model_terms, self.g_hat)

    def compute(self, t, x, ref):
        _, self.state = _cascade(x, ref, self.gains, self.state, None, self.h, t, self.model_terms, self.g_hat)
        return self.state.u_raw, self.state.errors

    def step(self, t, x, ref):
        """Saturated control for direct use outside ``simulate``."""
        u_raw, _ = self.compute(t, x, ref)
        return saturate(u_raw, self.limits) if self.limits is not None else u_raw
