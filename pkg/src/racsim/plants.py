"""
Ground-truth plant models in strict-feedback form.

* PMSM-driven electromechanical linear actuator (EMLA): position, velocity and
  q-axis current form the SF chain driven by the q-axis voltage; the d-axis
  current is an auxiliary state held near zero by the drive and enters the
  chain as a non-triangular coupling.
* Hydraulic in-wheel drive (IWD): valve pressure -> motor torque -> wheel speed.
* Planar 2-DoF manipulator with actuator faults.

Parameter dataclasses carry their unit in every field name so that a scenario
file can override them by key.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sfcore import SaturationLimits, UncertainSFModel


def load_params(cls, mapping: Optional[dict] = None):
    """Instantiate a parameter dataclass from a key/value mapping.

    Unknown keys raise ``KeyError`` naming the key, so typos in scenario files
    are not silently ignored.
    """
    mapping = dict(mapping or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    out = cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in mapping.items()})
    return out


# --------------------------------------------------------------------------- EMLA


@dataclass(frozen=True)
class EMLAParams:
    # motor / gearbox / screw datasheet values
    pm_flux_wb: float = 0.134
    pole_pairs: int = 4
    rated_power_w: float = 11.6e3
    rated_current_a: float = 23.1
    peak_current_a: float = 48.2
    rated_torque_nm: float = 37.0
    peak_torque_nm: float = 77.0
    rated_speed_rpm: float = 3000.0
    max_speed_rpm: float = 3877.0
    phase_resistance_ohm: float = 0.08
    phase_inductance_h: float = 2.42e-3
    gear_ratio: float = 7.7
    screw_lead_m: float = 0.016
    screw_diameter_m: float = 0.063
    screw_lead_angle_deg: float = 4.55
    # load side and drive, not in the datasheet
    load_mass_kg: float = 500.0
    rotor_inertia_kgm2: float = 0.0035
    viscous_friction_ns_per_m: float = 5000.0
    screw_efficiency: float = 0.9
    d_axis_gain_ohm: float = 2.0
    voltage_limit_v: float = 300.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"EMLA parameter {f.name} must be positive and finite, got {v}")
        if not self.peak_torque_nm > self.rated_torque_nm:
            raise ValueError("peak torque must exceed rated torque")
        if self.screw_efficiency > 1:
            raise ValueError("screw efficiency cannot exceed 1")

    @property
    def torque_constant(self) -> float:
        """Motor torque per q-axis ampere, N*m/A."""
        return 1.5 * self.pole_pairs * self.pm_flux_wb

    @property
    def motor_rad_per_m(self) -> float:
        """Motor shaft angle per metre of rod travel."""
        return 2.0 * math.pi * self.gear_ratio / self.screw_lead_m

    @property
    def force_per_torque(self) -> float:
        """Rod force per motor N*m after gearbox, screw and efficiency, N/(N*m)."""
        return self.motor_rad_per_m * self.screw_efficiency

    @property
    def force_constant(self) -> float:
        """Rod force per q-axis ampere, N/A."""
        return self.torque_constant * self.force_per_torque

    @property
    def moving_mass_kg(self) -> float:
        """Load mass plus rotor inertia reflected to the rod."""
        return self.load_mass_kg + self.rotor_inertia_kgm2 * self.motor_rad_per_m ** 2

    @property
    def max_linear_speed(self) -> float:
        return self.max_speed_rpm * 2.0 * math.pi / 60.0 / self.motor_rad_per_m


def motor_torque(i_q, params: EMLAParams):
    return params.torque_constant * np.asarray(i_q, dtype=float)


def emla_derivatives(state, inputs, params: EMLAParams, F_load, t: float = 0.0) -> np.ndarray:
    """Time derivative of ``[x, v, i_q, i_d]`` for inputs ``[v_q, v_d]``.

    Standard rotor-frame PMSM model with electrical speed ``p * w_m``; the
    motor speed follows the rod velocity through gearbox and screw.
    """
    state = np.asarray(state, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    v, i_q, i_d = state[..., 1], state[..., 2], state[..., 3]
    v_q, v_d = inputs[..., 0], inputs[..., 1]
    R, L, psi = params.phase_resistance_ohm, params.phase_inductance_h, params.pm_flux_wb
    w_e = params.pole_pairs * params.motor_rad_per_m * v
    di_d = (v_d - R * i_d + w_e * L * i_q) / L
    di_q = (v_q - R * i_q - w_e * L * i_d - w_e * psi) / L
    force = params.force_constant * i_q
    dv = (force - F_load - params.viscous_friction_ns_per_m * v) / params.moving_mass_kg
    return np.stack([v, dv, di_q, di_d], axis=-1)


@dataclass(frozen=True)
class LoadProfile:
    """Piecewise-linear load force schedule; values in kN, held outside."""

    times_s: tuple
    force_kn: tuple

    _t: np.ndarray = field(init=False, repr=False, compare=False)
    _f: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ts = np.asarray(self.times_s, dtype=float)
        if len(ts) != len(self.force_kn) or len(ts) == 0:
            raise ValueError("load profile needs matching, non-empty time and force lists")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("load profile times must be strictly increasing")
        object.__setattr__(self, "_t", ts)
        object.__setattr__(self, "_f", 1e3 * np.asarray(self.force_kn, dtype=float))

    @classmethod
    def constant(cls, force_kn: float) -> "LoadProfile":
        return cls((0.0,), (force_kn,))

    def __call__(self, t: float) -> float:
        """Load force in newtons."""
        return float(np.interp(t, self._t, self._f))


def emla_sf_model(params: EMLAParams = EMLAParams(), load: Optional[LoadProfile] = None,
                  limits: Optional[SaturationLimits] = None) -> UncertainSFModel:
    """EMLA as a 3-subsystem chain ``x -> v -> i_q <- v_q`` plus the d-axis.

    The drive holds ``i_d`` near zero with ``v_d = -d_axis_gain * i_d - w_e L i_q``;
    the residual ``w_e * i_d`` coupling is carried in the unmodeled channel.
    """
    load = load or LoadProfile.constant(0.0)
    R, L, psi = params.phase_resistance_ohm, params.phase_inductance_h, params.pm_flux_wb
    m = params.moving_mass_kg
    c = params.viscous_friction_ns_per_m
    kf = params.force_constant
    w_per_v = params.pole_pairs * params.motor_rad_per_m

    def f(x, t):
        out = np.zeros(x.shape[:-1] + (3, 1))
        out[..., 1, 0] = -c / m * x[..., 1]
        out[..., 2, 0] = (-R * x[..., 2] - w_per_v * psi * x[..., 1]) / L
        return out

    gain = np.array([[1.0], [kf / m], [1.0 / L]])

    def g(x, t):
        return np.broadcast_to(gain, x.shape[:-1] + gain.shape)

    def d(x, t):
        out = np.zeros(x.shape[:-1] + (3, 1))
        out[..., 2, 0] = -w_per_v * x[..., 1] * x[..., 3]
        return out

    def gamma(t):
        return np.array([[0.0], [-load(t) / m], [0.0]])

    def aux(x, u, t):
        # drive-side i_d = 0 loop; its cross-coupling feedforward cancels w_e L i_q
        return (-(params.d_axis_gain_ohm + R) / L) * x[..., 3:4]

    if limits is None:
        limits = SaturationLimits.symmetric(params.voltage_limit_v)
    return UncertainSFModel(n=3, f=f, g=g, d=d, gamma=gamma, m=1, n_aux=1, aux=aux,
                            limits=limits, name="emla", state_names=("x", "v", "i_q", "i_d"))


def emla_nominal_terms(params: EMLAParams = EMLAParams(), load: Optional[LoadProfile] = None):
    """Controller-side model ``(f_hat, g_hat)`` of the EMLA chain.

    Known: friction, back-EMF, resistive drop and, if given, the measured
    load force. Never known: d-axis coupling.
    """
    R, L, psi = params.phase_resistance_ohm, params.phase_inductance_h, params.pm_flux_wb
    m = params.moving_mass_kg
    c = params.viscous_friction_ns_per_m
    w_per_v = params.pole_pairs * params.motor_rad_per_m

    def f_hat(x, t):
        f_load = load(t) if load is not None else 0.0
        out = np.zeros(x.shape[:-1] + (3, 1))
        out[..., 1, 0] = -(c * x[..., 1] + f_load) / m
        out[..., 2, 0] = (-R * x[..., 2] - w_per_v * psi * x[..., 1]) / L
        return out

    g_hat = np.array([[1.0], [params.force_constant / m], [1.0 / L]])
    return f_hat, g_hat


# ---------------------------------------------------------------- hydraulic IWD


@dataclass(frozen=True)
class HydraulicIWDParams:
    wheel_inertia_kgm2: float = 300.0
    viscous_damping_nms: float = 750.0
    gear_ratio: float = 17.7
    wheel_diameter_m: float = 0.854
    rated_motor_torque_nm: float = 400.0
    valve_time_constant_s: float = 0.02
    torque_time_constant_s: float = 0.05
    valve_limit: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"IWD parameter {f.name} must be positive and finite, got {v}")

    @property
    def torque_gain(self) -> float:
        """Motor torque per unit of valve pressure state; rated command gives rated torque."""
        return self.rated_motor_torque_nm / self.valve_limit


def hydraulic_iwd_derivatives(state, valve_cmd, params: HydraulicIWDParams,
                              disturbance_torque=0.0, t: float = 0.0) -> np.ndarray:
    """Derivative of ``[w, tau_h, p_v]``: two first-order lags feeding the wheel."""
    state = np.asarray(state, dtype=float)
    w, tau_h, p_v = state[..., 0], state[..., 1], state[..., 2]
    valve_cmd = np.asarray(valve_cmd, dtype=float).reshape(np.shape(w))
    dp = (valve_cmd - p_v) / params.valve_time_constant_s
    dtau = (params.torque_gain * p_v - tau_h) / params.torque_time_constant_s
    dw = (params.gear_ratio * tau_h - params.viscous_damping_nms * w - disturbance_torque) / params.wheel_inertia_kgm2
    return np.stack([dw, dtau, dp], axis=-1)


def wheel_linear_speed(omega, params: HydraulicIWDParams = HydraulicIWDParams()):
    return np.asarray(omega, dtype=float) * params.wheel_diameter_m / 2.0


def hydraulic_iwd_sf_model(params: HydraulicIWDParams = HydraulicIWDParams(),
                           disturbance=None) -> UncertainSFModel:
    """IWD chain ``w -> tau_h -> p_v <- valve``; ``disturbance(t)`` is a wheel torque."""
    J, b = params.wheel_inertia_kgm2, params.viscous_damping_nms
    Tv, Th = params.valve_time_constant_s, params.torque_time_constant_s

    def f(x, t):
        return np.stack([-b * x[..., 0] / J, -x[..., 1] / Th, -x[..., 2] / Tv], axis=-1)[..., None]

    gain = np.array([[params.gear_ratio / J], [params.torque_gain / Th], [1.0 / Tv]])

    def g(x, t):
        return np.broadcast_to(gain, x.shape[:-1] + gain.shape)

    gamma = None
    if disturbance is not None:
        def gamma(t):
            return np.array([[-float(disturbance(t)) / J], [0.0], [0.0]])

    return UncertainSFModel(n=3, f=f, g=g, gamma=gamma, m=1,
                            limits=SaturationLimits.symmetric(params.valve_limit),
                            name="hydraulic_iwd", state_names=("w", "tau_h", "p_v"))


def hydraulic_iwd_nominal_terms(params: HydraulicIWDParams = HydraulicIWDParams()):
    J, b = params.wheel_inertia_kgm2, params.viscous_damping_nms
    Tv, Th = params.valve_time_constant_s, params.torque_time_constant_s

    def f_hat(x, t):
        return np.stack([-b * x[..., 0] / J, -x[..., 1] / Th, -x[..., 2] / Tv], axis=-1)[..., None]

    g_hat = np.array([[params.gear_ratio / J], [params.torque_gain / Th], [1.0 / Tv]])
    return f_hat, g_hat


# ------------------------------------------------------------------ manipulator


@dataclass(frozen=True)
class ManipulatorParams:
    """Planar two-link arm moving in a vertical plane (joint angles from horizontal)."""

    link1_mass_kg: float = 3.0
    link2_mass_kg: float = 2.0
    link1_length_m: float = 0.6
    link2_length_m: float = 0.5
    link1_com_m: float = 0.3
    link2_com_m: float = 0.25
    link1_inertia_kgm2: float = 0.09
    link2_inertia_kgm2: float = 0.0417
    gravity_m_s2: float = 9.81
    joint_friction_nms: tuple = (0.2, 0.2)
    torque_limit_nm: tuple = (80.0, 40.0)

    def __post_init__(self):
        for name in ("link1_length_m", "link2_length_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("link1_mass_kg", "link2_mass_kg", "link1_com_m", "link2_com_m",
                     "link1_inertia_kgm2", "link2_inertia_kgm2", "gravity_m_s2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def inertia_matrix(q, p: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    c2 = np.cos(q[..., 1])
    m1, m2 = p.link1_mass_kg, p.link2_mass_kg
    l1, lc1, lc2 = p.link1_length_m, p.link1_com_m, p.link2_com_m
    I1, I2 = p.link1_inertia_kgm2, p.link2_inertia_kgm2
    m11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * c2) + I1 + I2
    m12 = m2 * (lc2**2 + l1 * lc2 * c2) + I2
    M = np.empty(c2.shape + (2, 2))
    M[..., 0, 0] = m11
    M[..., 0, 1] = m12
    M[..., 1, 0] = m12
    M[..., 1, 1] = m2 * lc2**2 + I2
    return M


def coriolis_matrix(q, dq, p: ManipulatorParams) -> np.ndarray:
    """Christoffel-form C with ``dM/dt - 2C`` skew-symmetric."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    hh = -p.link2_mass_kg * p.link1_length_m * p.link2_com_m * np.sin(q[..., 1])
    dq1, dq2 = dq[..., 0], dq[..., 1]
    C = np.zeros(hh.shape + (2, 2))
    C[..., 0, 0] = hh * dq2
    C[..., 0, 1] = hh * (dq1 + dq2)
    C[..., 1, 0] = -hh * dq1
    return C


def gravity_vector(q, p: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    g = p.gravity_m_s2
    m1, m2 = p.link1_mass_kg, p.link2_mass_kg
    c1, c12 = np.cos(q[..., 0]), np.cos(q[..., 0] + q[..., 1])
    g2 = m2 * p.link2_com_m * g * c12
    out = np.empty(c1.shape + (2,))
    out[..., 0] = (m1 * p.link1_com_m + m2 * p.link1_length_m) * g * c1 + g2
    out[..., 1] = g2
    return out


def potential_energy(q, p: ManipulatorParams):
    q = np.asarray(q, dtype=float)
    g = p.gravity_m_s2
    s1, s12 = np.sin(q[..., 0]), np.sin(q[..., 0] + q[..., 1])
    return ((p.link1_mass_kg * p.link1_com_m + p.link2_mass_kg * p.link1_length_m) * g * s1
            + p.link2_mass_kg * p.link2_com_m * g * s12)


def kinetic_energy(q, dq, p: ManipulatorParams):
    dq = np.asarray(dq, dtype=float)
    return 0.5 * np.einsum("...i,...ij,...j->...", dq, inertia_matrix(q, p), dq)


def _inv2(M):
    """Closed-form inverse of (batched) 2x2 matrices."""
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    det = a * d - b * c
    if np.any(np.abs(det) <= 1e-300):
        raise np.linalg.LinAlgError("singular manipulator inertia matrix")
    out = np.empty_like(M)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


def _matvec(A, v):
    out = np.empty(np.broadcast_shapes(A.shape[:-1], v.shape))
    out[..., 0] = A[..., 0, 0] * v[..., 0] + A[..., 0, 1] * v[..., 1]
    out[..., 1] = A[..., 1, 0] * v[..., 0] + A[..., 1, 1] * v[..., 1]
    return out


def manipulator_derivatives(q, dq, tau, params: ManipulatorParams):
    """Return ``(dq, ddq)`` with ``ddq = M^-1 (tau - C dq - G - B dq)``."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    tau = np.asarray(tau, dtype=float)
    Minv = _inv2(inertia_matrix(q, params))
    C = coriolis_matrix(q, dq, params)
    rhs = tau - _matvec(C, dq) - gravity_vector(q, params) - np.asarray(params.joint_friction_nms) * dq
    return dq, _matvec(Minv, rhs)


# ------------------------------------------------------------------------ faults

FAULT_MODES = ("healthy", "stuck", "degraded", "excessive")


@dataclass(frozen=True)
class FaultSpec:
    """Actuator fault switched on at ``onset_s``.

    ``joints`` selects the affected actuators (0-based); ``None`` means all.
    """

    mode: str = "healthy"
    onset_s: float = 0.0
    degradation: float = 1.0
    stuck_value: float = 0.0
    excess_gain: float = 1.5
    joints: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in FAULT_MODES:
            raise ValueError(f"fault mode must be one of {FAULT_MODES}, got {self.mode!r}")
        if not self.onset_s >= 0:
            raise ValueError("fault onset must be >= 0")
        if self.mode == "degraded" and not 0.0 < self.degradation <= 1.0:
            raise ValueError("degradation factor must lie in (0, 1]")
        if self.mode == "excessive" and not self.excess_gain > 1.0:
            raise ValueError("excessive-torque gain must exceed 1")
        if not math.isfinite(self.stuck_value):
            raise ValueError("stuck value must be finite")


def apply_fault(spec: FaultSpec, tau_cmd, t: float):
    """Torque actually delivered by a (possibly faulty) actuator."""
    tau = np.asarray(tau_cmd, dtype=float)
    if spec.mode == "healthy" or t < spec.onset_s:
        return float(tau) if tau.ndim == 0 else tau.copy()
    if spec.mode == "stuck":
        faulty = np.full_like(tau, spec.stuck_value)
    elif spec.mode == "degraded":
        faulty = spec.degradation * tau
    else:
        faulty = spec.excess_gain * tau
    if spec.joints is not None and tau.ndim:
        mask = np.zeros(tau.shape[-1], dtype=bool)
        mask[list(spec.joints)] = True
        faulty = np.where(mask, faulty, tau)
    return float(faulty) if faulty.ndim == 0 else faulty


def _free_block(x, params):
    """Stacked drift ``[0, M^-1 (-C dq - G - B dq)]`` shaped ``(..., 2, 2)``."""
    q, dq = x[..., 0:2], x[..., 2:4]
    out = np.zeros(x.shape[:-1] + (2, 2))
    out[..., 1, :] = manipulator_derivatives(q, dq, 0.0, params)[1]
    return out


def _gain_block(x, params):
    """Stacked input gains ``[I, M^-1]`` shaped ``(..., 2, 2, 2)``."""
    out = np.zeros(x.shape[:-1] + (2, 2, 2))
    out[..., 0, 0, 0] = 1.0
    out[..., 0, 1, 1] = 1.0
    out[..., 1, :, :] = _inv2(inertia_matrix(x[..., 0:2], params))
    return out


def manipulator_sf_model(params: ManipulatorParams = ManipulatorParams(),
                         faults: Sequence[FaultSpec] = (), payload_torque=None) -> UncertainSFModel:
    """Arm as a 2-subsystem chain of 2-vectors: ``q -> dq <- tau``.

    ``payload_torque(t)`` adds an external joint-torque disturbance.
    """
    def f(x, t):
        return _free_block(x, params)

    def g(x, t):
        return _gain_block(x, params)

    d = None
    if payload_torque is not None:
        def d(x, t):
            Minv = _inv2(inertia_matrix(x[..., 0:2], params))
            acc = _matvec(Minv, np.broadcast_to(np.asarray(payload_torque(t), dtype=float), x.shape[:-1] + (2,)))
            out = np.zeros(acc.shape[:-1] + (2, 2))
            out[..., 1, :] = acc
            return out

    input_map = None
    if faults:
        def input_map(u, t):
            for spec in faults:
                u = apply_fault(spec, u, t)
            return np.asarray(u, dtype=float)

    lim = np.asarray(params.torque_limit_nm, dtype=float)
    return UncertainSFModel(n=2, f=f, g=g, d=d, m=2, input_map=input_map,
                            limits=SaturationLimits(-lim, lim), name="manipulator",
                            state_names=("q1", "q2", "dq1", "dq2"))


def manipulator_nominal_terms(params: ManipulatorParams = ManipulatorParams()):
    """Rigid-body model for the model-based controller: ``(f_hat, g_hat)``."""
    def f_hat(x, t):
        return _free_block(x, params)

    def g_hat(x, t):
        return _gain_block(x, params)

    return f_hat, g_hat
