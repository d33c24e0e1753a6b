"""
Scenario orchestration: references, closed-loop wiring, metrics and comparisons.

A scenario is a plain mapping (normally read from a YAML file) with sections
``plant``, ``controller``, ``observer``, ``safety``, ``reference``,
``tuning`` and the top-level ``duration_s``, ``step_s`` and ``seed``. See
``racsim/scenarios/*.yaml`` for complete examples.
"""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from . import plants as P
from .observers import ObserverState, velocity_observer_step
from .policy import (PolicyNet, RampProfile, concat_datasets, forward, generate_dataset, init_policy,
                     lm_train, load_policy, normalize_to)
from .rac import ControllerState, RACController, SubsystemGains, _cascade
from .safety import Decision, PPCEnvelope, Supervisor, envelope
from .sfcore import IntegrationError, SaturationLimits, Trace, UncertainSFModel, n_steps, simulate
from .tuner import jaya_optimize, rmse, tracking_cost_arrays


class ScenarioError(ValueError):
    """Invalid scenario configuration; the message starts with the field path."""


# ------------------------------------------------------------------ references


@dataclass(frozen=True)
class QuinticReference:
    """Rest-to-rest fifth-order polynomial from ``q0`` to ``qf`` over ``T`` seconds.

    Held at ``q0`` before ``t0`` and at ``qf`` after ``t0 + T``.
    """

    q0: np.ndarray
    qf: np.ndarray
    T: float
    t0: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("quintic duration must be positive")

    def __call__(self, t: float):
        s = min(max((t - self.t0) / self.T, 0.0), 1.0)
        q0 = np.asarray(self.q0, dtype=float)
        dq = np.asarray(self.qf, dtype=float) - q0
        pos = 10 * s**3 - 15 * s**4 + 6 * s**5
        vel = (30 * s**2 - 60 * s**3 + 30 * s**4) / self.T
        acc = (60 * s - 180 * s**2 + 120 * s**3) / self.T**2
        return q0 + dq * pos, dq * vel, dq * acc


def quintic_reference(q0, qf, T: float, t0: float = 0.0) -> QuinticReference:
    return QuinticReference(np.atleast_1d(np.asarray(q0, dtype=float)),
                            np.atleast_1d(np.asarray(qf, dtype=float)), float(T), float(t0))


class QuinticSchedule:
    """Duty cycle of consecutive quintic segments through ``waypoints``."""

    def __init__(self, waypoints, segment_s, start_s: float = 0.0):
        pts = [np.atleast_1d(np.asarray(w, dtype=float)) for w in waypoints]
        if len(segment_s) != len(pts) - 1:
            raise ValueError("need one segment duration per waypoint transition")
        self.segments = []
        t = float(start_s)
        for a, b, T in zip(pts[:-1], pts[1:], segment_s):
            self.segments.append(QuinticReference(a, b, float(T), t))
            t += float(T)
        self.start = float(start_s)
        self.end = t

    def __call__(self, t: float):
        for seg in self.segments:
            if t < seg.t0 + seg.T:
                return seg(t)
        return self.segments[-1](t)


@dataclass(frozen=True)
class PiecewiseLinear:
    times_s: tuple
    values: tuple

    def __post_init__(self):
        if len(self.times_s) != len(self.values) or not self.times_s:
            raise ValueError("schedule needs matching, non-empty times and values")
        if np.any(np.diff(np.asarray(self.times_s, dtype=float)) <= 0):
            raise ValueError("schedule times must be strictly increasing")

    def __call__(self, t: float):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            return float(np.interp(t, self.times_s, vals))
        return np.array([np.interp(t, self.times_s, vals[:, j]) for j in range(vals.shape[1])])


# --------------------------------------------------------------------- config


def _get(cfg, path: str, default=None, required=False):
    node = cfg
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            if required:
                raise ScenarioError(f"{path}: missing required field")
            return default
        node = node[key]
    return node


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_scenario(path) -> dict:
    """Read a scenario YAML file; relative file references resolve against it."""
    path = Path(path)
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{path}: scenario file must hold a mapping")
    cfg.setdefault("name", path.stem)
    cfg["_base_dir"] = str(path.parent.resolve())
    return cfg


def builtin_scenario(name: str) -> dict:
    return load_scenario(Path(__file__).parent / "scenarios" / f"{name}.yaml")


def _resolve_path(cfg, p) -> Path:
    p = Path(p)
    if not p.is_absolute() and "_base_dir" in cfg:
        p = Path(cfg["_base_dir"]) / p
    return p


# --------------------------------------------------------------------- plants


@dataclass
class PlantSetup:
    model: UncertainSFModel
    x0: np.ndarray
    f_hat: Optional[Callable]
    g_hat_nominal: object
    effort: Optional[Callable] = None  # (x, u) -> generalized force for the observer
    inertia: object = 1.0
    output_rate_index: int = 1


def _schedule(cfg_node, key_values: str, scale: float = 1.0):
    if cfg_node is None:
        return None
    if isinstance(cfg_node, (int, float)):
        return lambda t, c=float(cfg_node) * scale: c
    vals = [np.asarray(v, dtype=float) * scale for v in cfg_node[key_values]]
    sched = PiecewiseLinear(tuple(cfg_node["times_s"]), tuple(np.asarray(vals).tolist()))
    return sched


def build_plant(cfg: dict) -> PlantSetup:
    kind = _get(cfg, "plant.type", required=True)
    params_cfg = _get(cfg, "plant.params", {}) or {}
    try:
        if kind == "emla":
            params = P.load_params(P.EMLAParams, params_cfg)
            load_cfg = _get(cfg, "plant.load_kn")
            load = P.LoadProfile(tuple(load_cfg["times_s"]), tuple(load_cfg["force_kn"])) if load_cfg else None
            model = P.emla_sf_model(params, load)
            measured = load if _get(cfg, "plant.load_measured", True) else None
            f_hat, g_hat = P.emla_nominal_terms(params, measured)
            setup = PlantSetup(model, np.zeros(model.dim), f_hat, g_hat,
                               effort=lambda x, u: params.force_constant * x[..., 2:3],
                               inertia=params.moving_mass_kg)
        elif kind == "hydraulic_iwd":
            params = P.load_params(P.HydraulicIWDParams, params_cfg)
            dist = _schedule(_get(cfg, "plant.disturbance_nm"), "torque_nm")
            model = P.hydraulic_iwd_sf_model(params, dist)
            f_hat, g_hat = P.hydraulic_iwd_nominal_terms(params)
            setup = PlantSetup(model, np.zeros(model.dim), f_hat, g_hat)
        elif kind == "manipulator":
            params = P.load_params(P.ManipulatorParams, params_cfg)
            faults = []
            for j, fc in enumerate(_get(cfg, "plant.faults", []) or []):
                fc = dict(fc)
                if "joints" in fc and fc["joints"] is not None:
                    fc["joints"] = tuple(fc["joints"])
                try:
                    faults.append(P.FaultSpec(**fc))
                except (TypeError, ValueError) as exc:
                    raise ScenarioError(f"plant.faults[{j}]: {exc}") from exc
            payload = _schedule(_get(cfg, "plant.payload_torque_nm"), "torque_nm")
            model = P.manipulator_sf_model(params, faults, payload)
            f_hat, g_hat = P.manipulator_nominal_terms(params)
            setup = PlantSetup(model, np.zeros(model.dim), f_hat, g_hat,
                               effort=None, inertia=np.diag(P.inertia_matrix(np.zeros(2), params)))
        elif kind == "linear_chain":
            a = np.asarray(_get(cfg, "plant.params.a", required=True), dtype=float)
            g = np.asarray(_get(cfg, "plant.params.g", required=True), dtype=float)
            dist = np.asarray(_get(cfg, "plant.params.disturbance", np.zeros_like(a)), dtype=float)
            lim = _get(cfg, "plant.params.input_limit", 1e6)
            model = linear_chain_model(a, g, dist, SaturationLimits.symmetric(float(lim)))
            f_hat = lambda x, t: (a * x[..., : len(a)])[..., None]
            setup = PlantSetup(model, np.zeros(model.dim), f_hat, g[:, None])
        else:
            raise ScenarioError(f"plant.type: unknown plant {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"plant.params: {exc}") from exc

    x0 = _get(cfg, "plant.initial_state")
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (setup.model.dim,):
            raise ScenarioError(f"plant.initial_state: expected {setup.model.dim} values, got {x0.size}")
        setup.x0 = x0
    return setup


def linear_chain_model(a, g, disturbance=None, limits=None) -> UncertainSFModel:
    """``x_i' = a_i x_i + g_i x_{i+1} + d_i`` with constant coefficients."""
    a = np.asarray(a, dtype=float)
    g = np.asarray(g, dtype=float)
    dist = np.zeros_like(a) if disturbance is None else np.asarray(disturbance, dtype=float)
    n = len(a)

    def f(x, t):
        return (a * x[..., :n])[..., None]

    def gfun(x, t):
        return np.broadcast_to(g[:, None], x.shape[:-1] + (n, 1))

    gamma = (lambda t: dist[:, None]) if np.any(dist) else None
    return UncertainSFModel(n=n, f=f, g=gfun, gamma=gamma, limits=limits, name="linear_chain")


def build_reference(cfg: dict, m: int):
    rc = _get(cfg, "reference", required=True)
    kind = rc.get("type", "quintic")
    try:
        if kind == "quintic":
            ref = quintic_reference(rc["q0"], rc["qf"], rc["duration_s"], rc.get("start_s", 0.0))
        elif kind == "quintic_schedule":
            ref = QuinticSchedule(rc["waypoints"], rc["segment_s"], rc.get("start_s", 0.0))
        elif kind == "constant":
            val = np.atleast_1d(np.asarray(rc.get("value", 0.0), dtype=float))
            ref = lambda t, v=val: (v, np.zeros_like(v), np.zeros_like(v))
        else:
            raise ScenarioError(f"reference.type: unknown reference {kind!r}")
    except KeyError as exc:
        raise ScenarioError(f"reference.{exc.args[0]}: missing required field") from exc
    r0 = np.atleast_1d(ref(0.0)[0])
    if r0.size != m:
        raise ScenarioError(f"reference: dimension {r0.size} does not match plant input width {m}")
    return ref


# ---------------------------------------------------------------- controllers


GAIN_FIELDS = ("k", "gamma", "sigma", "eps")


def build_gains(cfg: dict, n: int, m: int) -> SubsystemGains:
    gc = _get(cfg, "controller.gains", {}) or {}
    defaults = {"k": 1.0, "gamma": 1.0, "sigma": 0.0, "eps": 1.0}
    vals = {}
    for name in GAIN_FIELDS:
        try:
            vals[name] = np.array(gc.get(name, defaults[name]), dtype=float)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"controller.gains.{name}: {exc}") from exc
    try:
        return SubsystemGains.build(n, m, **vals)
    except ValueError as exc:
        raise ScenarioError(f"controller.gains: {exc}") from exc


def _g_hat(cfg: dict, setup: PlantSetup, variant: str):
    if variant == "model_based" or _get(cfg, "controller.use_nominal_g", False):
        return setup.g_hat_nominal
    gh = _get(cfg, "controller.g_hat")
    if gh is None:
        return None
    return np.asarray(gh, dtype=float).reshape(setup.model.n, -1)


def _rho0(cfg, n, m):
    r = _get(cfg, "controller.rho0", 0.0)
    from .rac import _as_block

    return _as_block(r, n, m)


def build_rac(cfg: dict, setup: PlantSetup, variant: str, h: float) -> RACController:
    n, m = setup.model.n, setup.model.m
    gains = build_gains(cfg, n, m)
    f_hat = setup.f_hat if variant == "model_based" else None
    return RACController(gains, h, setup.model.limits, model_terms=f_hat,
                         g_hat=_g_hat(cfg, setup, variant), rho0=_rho0(cfg, n, m))


class ObservedController:
    """Feeds a controller noisy position plus observer-estimated velocity."""

    def __init__(self, inner, setup: PlantSetup, obs_cfg: dict, h: float):
        self.inner = inner
        self.setup = setup
        self.h = h
        self.noise_std = float(obs_cfg.get("noise_std", 0.0))
        self.l1 = float(obs_cfg.get("l1", 50.0))
        self.l2 = float(obs_cfg.get("l2", 625.0))
        self.inertia = np.asarray(obs_cfg.get("inertia_hint", setup.inertia), dtype=float)
        self.m = setup.model.m
        self.reset(np.random.default_rng(0))

    @property
    def policy(self):
        return self.inner.policy

    @property
    def fallback_active(self):
        return getattr(self.inner, "fallback_active", True)

    def switch_to_fallback(self):
        self.inner.switch_to_fallback()

    def reset(self, rng):
        self.rng = rng
        self.inner.reset(rng)
        self.obs = None
        self.last_u = np.zeros(self.m)

    def compute(self, t, x, ref):
        m = self.m
        q_meas = x[:m] + (self.noise_std * self.rng.standard_normal(m) if self.noise_std > 0 else 0.0)
        if self.obs is None:
            self.obs = ObserverState(q_hat=q_meas.copy(), v_hat=np.zeros(m), l1=self.l1, l2=self.l2)
        x_est = np.array(x, dtype=float)
        x_est[:m] = self.obs.q_hat
        x_est[m : 2 * m] = self.obs.v_hat
        u_raw, errors = self.inner.compute(t, x_est, ref)
        lim = self.setup.model.limits
        u = np.clip(u_raw, lim.u_min, lim.u_max) if lim is not None else u_raw
        effort = self.setup.effort(x, u) if self.setup.effort is not None else u
        self.obs = velocity_observer_step(q_meas, effort, self.obs, self.inertia, self.h)
        self._x_est = x_est
        return u_raw, errors

    def extras(self):
        out = dict(self.inner.extras()) if hasattr(self.inner, "extras") else {}
        for j in range(self.m):
            sfx = "" if self.m == 1 else f"_{j + 1}"
            out[f"q_hat{sfx}"] = float(self._x_est[j])
            out[f"v_hat{sfx}"] = float(self._x_est[self.m + j])
        return out


def policy_features(x, ref, lookahead_s: float = 0.0):
    """``[error, reference, reference_rate, measured]`` for the tracked output.

    The policy was fitted against the output ``lookahead_s`` ahead, so the
    reference is extrapolated by that much from its derivatives.
    """
    y = float(np.asarray(x)[0])
    r = float(np.atleast_1d(ref[0])[0])
    rd = float(np.atleast_1d(ref[1])[0]) if len(ref) > 1 else 0.0
    rdd = float(np.atleast_1d(ref[2])[0]) if len(ref) > 2 else 0.0
    L = lookahead_s
    r_ahead = r + L * rd + 0.5 * L * L * rdd
    rd_ahead = rd + L * rdd
    return np.array([y - r_ahead, r_ahead, rd_ahead, y])


class DNNWithFallback:
    """Neural primary policy; RAC takes over for good once the supervisor says so.

    While the network is active the RAC cascade is still evaluated (without
    adapting) so the trace always reports subsystem errors.
    """

    def __init__(self, net: PolicyNet, fallback: RACController, lookahead_s: float = 0.0):
        self.net = net
        self.fallback = fallback
        self.lookahead_s = lookahead_s
        self.fallback_active = False

    @property
    def policy(self):
        return "rac" if self.fallback_active else "dnn"

    def reset(self, rng):
        self.fallback.reset(rng)
        self.fallback_active = False

    def switch_to_fallback(self):
        self.fallback_active = True

    def compute(self, t, x, ref):
        if self.fallback_active:
            return self.fallback.compute(t, x, ref)
        _, st = self.fallback.peek(t, x, ref)
        u = np.atleast_1d(forward(self.net, policy_features(x, ref, self.lookahead_s)))
        return u, st.errors


class ReferenceLogger:
    """Adds reference columns to the trace."""

    def __init__(self, inner, reference, m):
        self.inner, self.reference, self.m = inner, reference, m
        self._r = np.zeros(m)

    policy = property(lambda self: self.inner.policy)
    fallback_active = property(lambda self: getattr(self.inner, "fallback_active", True))

    def switch_to_fallback(self):
        self.inner.switch_to_fallback()

    def reset(self, rng):
        self.inner.reset(rng)

    def compute(self, t, x, ref):
        self._r = np.atleast_1d(ref[0])
        return self.inner.compute(t, x, ref)

    def extras(self):
        out = {"ref" if self.m == 1 else f"ref_{j + 1}": float(self._r[j]) for j in range(self.m)}
        if hasattr(self.inner, "extras"):
            out.update(self.inner.extras())
        return out


def build_supervisor(cfg: dict) -> Optional[Supervisor]:
    sc = _get(cfg, "safety")
    if not sc:
        return None
    try:
        env = PPCEnvelope(float(sc["o_shoot"]), float(sc["o_bound"]), float(sc.get("o_star_per_s", 0.0)))
        return Supervisor(env, float(sc.get("theta_switch", 0.8)))
    except KeyError as exc:
        raise ScenarioError(f"safety.{exc.args[0]}: missing required field") from exc
    except ValueError as exc:
        raise ScenarioError(f"safety: {exc}") from exc


# ------------------------------------------------------------------ training


def train_policy(cfg: dict, setup: Optional[PlantSetup] = None):
    """Generate ramp data on the scenario plant and fit the policy network.

    Returns ``(net, history, dataset)``.
    """
    tc = _get(cfg, "controller.training", {}) or {}
    if setup is None:
        # nominal data: no disturbances or faults unless asked for
        plant_cfg = dict(cfg.get("plant", {}))
        if not tc.get("keep_disturbances", False):
            for key in ("disturbance_nm", "payload_torque_nm", "faults"):
                plant_cfg.pop(key, None)
        setup = build_plant({**cfg, "plant": plant_cfg})
    h = float(cfg.get("step_s", 1e-3))
    seed = int(cfg.get("seed", 0))
    ramps = tc.get("ramps") or [{"times_s": [0.0, 10.0, 20.0], "command": [0.0, 1.0, 0.0]}]
    sets = []
    for j, rcfg in enumerate(ramps):
        ramp = RampProfile(tuple(rcfg["times_s"]), tuple(rcfg["command"]), rcfg.get("id", f"ramp{j}"))
        sets.append(generate_dataset(setup.model, ramp, noise_seed=seed + j, h=h,
                                     lookahead_s=float(tc.get("lookahead_s", 0.1)),
                                     noise_std=float(tc.get("noise_std", 0.0)),
                                     dither=float(tc.get("dither", 0.0)),
                                     dither_hold_s=float(tc.get("dither_hold_s", 0.05))))
    data = concat_datasets(sets).subsample(int(tc.get("subsample", 10)))
    hidden = [int(v) for v in tc.get("hidden", [16, 16])]
    net = init_policy([4, *hidden, 1], np.random.default_rng(seed), scale=float(tc.get("init_scale", 1.0)))
    net = normalize_to(net, data)
    net, hist = lm_train(net, data, mu0=float(tc.get("mu0", 1e-2)), mu_factor=float(tc.get("mu_factor", 10.0)),
                         max_iters=int(tc.get("max_iters", 100)))
    return net, hist, data


def build_controller(cfg: dict, setup: PlantSetup, h: float, policy_net: Optional[PolicyNet] = None):
    variant = _get(cfg, "controller.variant", "model_free")
    if variant in ("model_free", "model_based"):
        ctrl = build_rac(cfg, setup, variant, h)
    elif variant == "dnn_with_fallback":
        fb_variant = _get(cfg, "controller.fallback_variant", "model_free")
        fallback = build_rac(cfg, setup, fb_variant, h)
        if policy_net is None:
            pf = _get(cfg, "controller.policy_file")
            policy_net = load_policy(_resolve_path(cfg, pf)) if pf else train_policy(cfg)[0]
        lookahead = float(_get(cfg, "controller.training.lookahead_s", 0.1))
        ctrl = DNNWithFallback(policy_net, fallback, lookahead)
    else:
        raise ScenarioError(f"controller.variant: unknown variant {variant!r}")
    obs_cfg = _get(cfg, "observer", {}) or {}
    if obs_cfg.get("enabled", False):
        ctrl = ObservedController(ctrl, setup, obs_cfg, h)
    return ctrl


# -------------------------------------------------------------------- metrics


@dataclass
class Metrics:
    position_rmse: float
    velocity_rmse: float
    settling_time_s: Optional[float]
    peak_control: float
    envelope_violations: int
    switch_time_s: Optional[float]
    shutdown_time_s: Optional[float] = None

    def row(self) -> dict:
        d = asdict(self)
        for k in ("settling_time_s", "switch_time_s", "shutdown_time_s"):
            if d[k] is None:
                d[k] = "not settled" if k == "settling_time_s" else ""
        return d


def settling_time(t, err, band: float) -> Optional[float]:
    """Time after which ``|err|`` stays within ``band``; ``None`` if it ends outside."""
    mag = np.max(np.abs(np.atleast_2d(np.asarray(err, dtype=float).T).T), axis=-1) if np.ndim(err) > 1 else np.abs(err)
    outside = np.nonzero(mag > band)[0]
    if outside.size == 0:
        return 0.0
    last = int(outside[-1])
    if last == len(mag) - 1:
        return None
    return float(t[last + 1])


def compute_metrics(trace: Trace, band_fraction: float = 0.02) -> Metrics:
    """Pure function of the trace (reference columns included)."""
    e1 = trace.error(1)
    e2 = trace.error(2) if trace.n > 1 else np.zeros_like(e1)
    ref_cols = [v for k, v in trace.extras.items() if k == "ref" or k.startswith("ref_")]
    if ref_cols:
        R = np.column_stack(ref_cols)
        span = float(np.max(np.max(R, axis=0) - np.min(R, axis=0)))
        scale = span if span > 0 else float(np.max(np.abs(R)))
    else:
        scale = 0.0
    if scale == 0.0 and len(trace):
        # regulation to a fixed point: band relative to the initial offset
        scale = float(np.max(np.abs(np.atleast_1d(e1[0]))))
    shut = trace.event_time("shutdown")
    return Metrics(
        position_rmse=rmse(e1),
        velocity_rmse=rmse(e2),
        settling_time_s=settling_time(trace.t, e1, band_fraction * scale),
        peak_control=float(np.max(np.abs(trace.u_sat))) if len(trace) else 0.0,
        envelope_violations=sum(1 for _, name in trace.events if name == "shutdown"),
        switch_time_s=trace.event_time("switch"),
        shutdown_time_s=shut,
    )


# ------------------------------------------------------------------ execution


def run_scenario(cfg: dict, policy_net: Optional[PolicyNet] = None):
    """Run one scenario; returns ``(trace, metrics)``."""
    h = float(cfg.get("step_s", 1e-3))
    duration = float(_get(cfg, "duration_s", required=True))
    try:
        n_steps(duration, h)
    except ValueError as exc:
        raise ScenarioError(f"duration_s: {exc}") from exc
    setup = build_plant(cfg)
    ref = build_reference(cfg, setup.model.m)
    ctrl = ReferenceLogger(build_controller(cfg, setup, h, policy_net), ref, setup.model.m)
    sup = build_supervisor(cfg)
    trace = simulate(setup.model, ctrl, sup, ref, duration, h, seed=int(cfg.get("seed", 0)), x0=setup.x0)
    band = float(_get(cfg, "metrics.settling_band", 0.02))
    return trace, compute_metrics(trace, band)


# ----------------------------------------------------------------- tuning glue


def parse_tunable(name: str, n: int, m: int):
    """``k`` (all subsystems), ``k2`` (subsystem 2) or ``k2_1`` (subsystem 2, input 1)."""
    for fld in sorted(GAIN_FIELDS, key=len, reverse=True):
        if name.startswith(fld):
            rest = name[len(fld):]
            if rest == "":
                return fld, slice(None), slice(None)
            parts = rest.split("_")
            try:
                i = int(parts[0]) - 1
                j = int(parts[1]) - 1 if len(parts) > 1 else None
            except ValueError:
                break
            if not 0 <= i < n or (j is not None and not 0 <= j < m):
                raise ScenarioError(f"tuning.params: {name!r} indexes outside the {n}x{m} chain")
            return fld, i, (slice(None) if j is None else j)
    raise ScenarioError(f"tuning.params: cannot parse tunable {name!r}")


def gains_with_params(cfg: dict, names: Sequence[str], values, n: int, m: int) -> dict:
    """Gain arrays (batched over the leading axis of ``values``)."""
    base = build_gains(cfg, n, m)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    B = values.shape[0]
    out = {f: np.broadcast_to(getattr(base, f), (B, n, m)).copy() for f in GAIN_FIELDS}
    for c, name in enumerate(names):
        fld, i, j = parse_tunable(name, n, m)
        out[fld][:, i, j] = values[:, c].reshape((B,) + (1,) * np.ndim(out[fld][:, i, j][0]))
    return out


def gain_block(gains: dict) -> dict:
    """YAML-ready ``controller.gains`` mapping for one candidate."""
    block = {}
    for f in GAIN_FIELDS:
        a = np.asarray(gains[f])
        block[f] = a[:, 0].tolist() if a.shape[-1] == 1 else a.tolist()
    return block


def rollout_costs(cfg: dict, gain_arrays: dict, weights=(1.0, 0.0)) -> np.ndarray:
    """Tracking cost of a batch of RAC gain sets, rolled out together.

    Equivalent to ``run_scenario`` + ``tracking_cost`` per candidate (RAC
    variants, no observer). Candidates that shut down or blow up get ``inf``.
    """
    variant = _get(cfg, "controller.variant", "model_free")
    if variant not in ("model_free", "model_based"):
        raise ScenarioError("controller.variant: batched tuning needs a RAC variant")
    h = float(cfg.get("step_s", 1e-3))
    K = n_steps(float(_get(cfg, "duration_s", required=True)), h)
    setup = build_plant(cfg)
    model = setup.model
    ref = build_reference(cfg, model.m)
    sup = build_supervisor(cfg)
    n, m = model.n, model.m
    gains = SubsystemGains(**{f: gain_arrays[f] for f in GAIN_FIELDS})
    B = gains.k.shape[0]
    f_hat = setup.f_hat if variant == "model_based" else None
    g_hat = _g_hat(cfg, setup, variant)
    state = ControllerState.initial((B, n, m), _rho0(cfg, n, m))
    x = np.broadcast_to(setup.x0, (B, model.dim)).copy()
    alive = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    sq_pos = np.zeros(B)
    sq_vel = np.zeros(B)
    rows = np.zeros(B)
    lo, hi = (model.limits.u_min, model.limits.u_max) if model.limits is not None else (-np.inf, np.inf)

    with np.errstate(all="ignore"):
        for k in range(K):
            if not alive.any():
                break
            t = k * h
            r = ref(t)
            u_raw, state = _cascade(x, r, gains, state, None, h, t, f_hat, g_hat, check=False)
            err = state.errors
            bad = ~np.all(np.isfinite(err.reshape(B, -1)), axis=1) | ~np.all(np.isfinite(u_raw), axis=1)
            failed |= alive & bad
            alive &= ~bad
            e1 = np.max(np.abs(err[:, 0, :]), axis=1)
            sq_pos += np.where(alive, np.sum(err[:, 0, :] ** 2, axis=1), 0.0)
            sq_vel += np.where(alive, np.sum(err[:, 1, :] ** 2, axis=1), 0.0)
            rows += alive
            if sup is not None:
                shut = alive & ~(e1 < envelope(sup.env, t))
                failed |= shut
                alive &= ~shut
            u = np.clip(np.where(np.isfinite(u_raw), u_raw, 0.0), lo, hi)
            u[~alive] = 0.0
            x = _rk4_unchecked(model, x, u, t, h)
            blown = ~np.all(np.isfinite(x), axis=1)
            failed |= alive & blown
            alive &= ~blown
            x[~alive] = 0.0
            state = ControllerState(rho_hat=np.where(alive[:, None, None], state.rho_hat, 0.0))

    w_p, w_v = weights
    cost = w_p * np.sqrt(sq_pos / np.maximum(rows * m, 1)) + w_v * np.sqrt(sq_vel / np.maximum(rows * m, 1))
    return np.where(failed, np.inf, cost)


def _rk4_unchecked(model, x, u, t, h):
    k1 = model.derivatives(x, u, t)
    k2 = model.derivatives(x + 0.5 * h * k1, u, t + 0.5 * h)
    k3 = model.derivatives(x + 0.5 * h * k2, u, t + 0.5 * h)
    k4 = model.derivatives(x + h * k3, u, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def tune_scenario(cfg: dict, pop_size: int = 20, max_iters: int = 100, seed: int = 0, callback=None):
    """JAYA over the scenario's ``tuning`` block.

    Returns ``(best_candidate, history, tuned_cfg)`` where ``tuned_cfg`` is the
    scenario with the optimized gain block written in.
    """
    tc = _get(cfg, "tuning", required=True)
    names = list(tc["params"])
    lo = np.asarray(tc["lower"], dtype=float)
    hi = np.asarray(tc["upper"], dtype=float)
    if not (len(names) == lo.size == hi.size):
        raise ScenarioError("tuning: params, lower and upper must have equal length")
    weights = tuple(tc.get("weights", (1.0, 0.0)))
    train_cfg = deep_merge(cfg, tc.get("scenario_overrides", {}) or {})
    setup = build_plant(train_cfg)
    n, m = setup.model.n, setup.model.m
    log_scale = bool(tc.get("log_scale", False))

    def to_gains(v):
        return np.exp(v) if log_scale else v

    def cost(pop):
        return rollout_costs(train_cfg, gains_with_params(train_cfg, names, to_gains(pop), n, m), weights)

    box = (np.log(lo), np.log(hi)) if log_scale else (lo, hi)
    best, history = jaya_optimize(cost, box, pop_size, max_iters, seed, vectorized=True, callback=callback)
    tuned = gains_with_params(cfg, names, to_gains(best.gains), n, m)
    tuned = {f: v[0] for f, v in tuned.items()}
    out = copy.deepcopy(cfg)
    out.setdefault("controller", {})["gains"] = gain_block(tuned)
    best = type(best)(gains=to_gains(best.gains), cost=best.cost)
    return best, history, out


# --------------------------------------------------------------------- compare


def compare(scenarios: Sequence[dict], controllers: Sequence[dict]) -> list[dict]:
    """Metrics for every (scenario, controller) cell, in input order.

    ``controllers`` are overrides merged into each scenario, each with a
    ``label``. A failing cell is reported in the ``error`` column.
    """
    rows = []
    for sc in scenarios:
        for ctl in controllers:
            ctl = dict(ctl)
            label = ctl.pop("label", _get(ctl, "controller.variant", "default"))
            cell = deep_merge(sc, ctl)
            row = {"scenario": sc.get("name", ""), "controller": label}
            try:
                _, met = run_scenario(cell)
                row.update(met.row())
                row["error"] = ""
            except (ScenarioError, IntegrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
                row.update({k: "" for k in Metrics.__dataclass_fields__})
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict], path=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
