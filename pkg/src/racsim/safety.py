"""
Supervisory safety layer: prescribed-performance envelope, log-barrier values
and the latched two-level switching automaton.

The low-level layer hands control from the primary (neural) policy to the RAC
fallback once the tracking error reaches ``theta_switch`` of the envelope; the
handover is permanent for the rest of the run. The high-level layer shuts the
system down when the error reaches the envelope itself.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace


class BarrierViolation(ArithmeticError):
    """The error reached the barrier bound, where the log-barrier is undefined."""


class Decision(enum.Enum):
    CONTINUE_PRIMARY = "ContinuePrimary"
    RUN_FALLBACK = "RunFallback"
    SHUTDOWN = "Shutdown"


@dataclass(frozen=True)
class PPCEnvelope:
    """Exponentially shrinking error bound from ``o_shoot`` down to ``o_bound``.

    ``o_shoot == o_bound`` gives the constant-bound supervisor; ``o_star`` is
    then irrelevant and may be zero.
    """

    o_shoot: float
    o_bound: float
    o_star: float

    def __post_init__(self):
        vals = (self.o_shoot, self.o_bound, self.o_star)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("envelope parameters must be finite")
        if not self.o_bound > 0:
            raise ValueError("o_bound must be positive")
        if self.o_shoot < self.o_bound:
            raise ValueError("o_shoot must be >= o_bound")
        if self.o_shoot > self.o_bound and not self.o_star > 0:
            raise ValueError("o_star must be positive for a shrinking envelope")
        if self.o_star < 0:
            raise ValueError("o_star must be non-negative")

    @classmethod
    def constant(cls, bound: float) -> "PPCEnvelope":
        return cls(bound, bound, 0.0)


def envelope(env: PPCEnvelope, t: float) -> float:
    if t < 0:
        raise ValueError("envelope is defined for t >= 0")
    return (env.o_shoot - env.o_bound) * math.exp(-env.o_star * t) + env.o_bound


def blf_value(e: float, bound: float) -> float:
    """Log-barrier ``ln(b^2 / (b^2 - e^2))``; raises at or beyond the bound."""
    if not bound > 0:
        raise ValueError("barrier bound must be positive")
    if not abs(e) < bound:
        raise BarrierViolation(f"|e|={abs(e):.6g} reached the barrier bound {bound:.6g}")
    # log1p keeps the small-error regime accurate
    return -math.log1p(-(e * e) / (bound * bound))


@dataclass(frozen=True)
class SupervisorState:
    theta_switch: float = 0.8
    latched: bool = False
    shutdown: bool = False
    events: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 < self.theta_switch < 1.0:
            raise ValueError("theta_switch must lie in (0, 1)")


def supervise(e: float, t: float, env: PPCEnvelope, sup: SupervisorState):
    """One supervisory decision for tracking error ``e`` at time ``t``.

    Returns ``(decision, new_state)``. Shutdown and the fallback latch are
    sticky: once set they are never cleared.
    """
    if sup.shutdown:
        return Decision.SHUTDOWN, sup
    bound = envelope(env, t)
    mag = abs(e)
    if not mag < bound:
        return Decision.SHUTDOWN, replace(sup, shutdown=True, events=sup.events + ((t, "shutdown"),))
    if sup.latched:
        return Decision.RUN_FALLBACK, sup
    if mag >= sup.theta_switch * bound:
        return Decision.RUN_FALLBACK, replace(sup, latched=True, events=sup.events + ((t, "switch"),))
    return Decision.CONTINUE_PRIMARY, sup


class Supervisor:
    """Stateful wrapper used by the rollout loop."""

    def __init__(self, env: PPCEnvelope, theta_switch: float = 0.8):
        self.env = env
        self.state = SupervisorState(theta_switch=theta_switch)

    def envelope_at(self, t: float) -> float:
        return envelope(self.env, t)

    def update(self, e: float, t: float) -> Decision:
        decision, self.state = supervise(e, t, self.env, self.state)
        return decision
