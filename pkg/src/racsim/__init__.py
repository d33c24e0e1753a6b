"""Robust adaptive control of uncertain strict-feedback systems."""

from .sfcore import (
    IntegrationError,
    SaturationLimits,
    Trace,
    UncertainSFModel,
    saturate,
    saturation_coefficients,
    simulate,
    step,
)
from .safety import Decision, PPCEnvelope, Supervisor, SupervisorState, blf_value, envelope, supervise

__version__ = "0.1.0"
