"""
Uncertain strict-feedback systems, input saturation and fixed-step integration.

A strict-feedback (SF) chain of ``n`` subsystems, each a block of ``m``
states, evolves as

    x_i' = f_i(x, t) + g_i(x, t) x_{i+1} + d_i(x, t) + Gamma_i(t),   i < n
    x_n' = f_n(x, t) + g_n(x, t) u       + d_n(x, t) + Gamma_n(t)

``f`` is the known modeling term, ``g`` the functional gain, ``d`` the
unmodeled dynamics (allowed to depend on the whole state, so non-triangular
terms are representable) and ``Gamma`` a time-varying disturbance. Plants may
carry auxiliary states outside the chain (e.g. the PMSM d-axis current); they
are appended after the chain in the flat state vector.

All arrays may carry leading batch axes so that a population of candidate
controllers can be rolled out at once.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class IntegrationError(FloatingPointError):
    """Non-finite value produced while evaluating or integrating dynamics.

    ``index`` is the 1-based subsystem index that blew up (``None`` when the
    offending quantity is not tied to a subsystem), ``t`` the time in seconds.
    """

    def __init__(self, message: str, index: Optional[int] = None, t: Optional[float] = None):
        self.index = index
        self.t = t
        where = []
        if index is not None:
            where.append(f"subsystem {index}")
        if t is not None:
            where.append(f"t={t:.6g} s")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


@dataclass(frozen=True)
class SaturationLimits:
    """Actuator bounds ``u_min < u_max`` (scalars or per-input arrays)."""

    u_min: float | np.ndarray
    u_max: float | np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.u_min, dtype=float)
        hi = np.asarray(self.u_max, dtype=float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("saturation limits must be finite")
        if not np.all(lo < hi):
            raise ValueError(f"need u_min < u_max, got {self.u_min} and {self.u_max}")

    @classmethod
    def symmetric(cls, bound) -> "SaturationLimits":
        b = np.asarray(bound, dtype=float)
        return cls(-b if b.ndim else -float(b), b if b.ndim else float(b))


def _check_finite_control(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise IntegrationError("non-finite control signal; upstream numeric blow-up")
    return u


def saturate(u, limits: SaturationLimits):
    """Clip ``u`` into ``[u_min, u_max]``; the interior branch is the identity."""
    u = _check_finite_control(u)
    out = np.minimum(np.maximum(u, limits.u_min), limits.u_max)
    return float(out) if out.ndim == 0 else out


def saturation_coefficients(u, limits: SaturationLimits):
    """Return ``(lambda1, lambda2)`` with ``lambda1*u + lambda2 == saturate(u)``.

    Outside the limits ``lambda1 = 1/(|u|+1)`` and ``lambda2`` carries the
    remainder to the active bound; inside, ``(1, 0)``. Values exactly on a
    bound are treated as interior.
    """
    u = _check_finite_control(u)
    lo = np.asarray(limits.u_min, dtype=float)
    hi = np.asarray(limits.u_max, dtype=float)
    shrink = 1.0 / (np.abs(u) + 1.0)
    frac = u / (np.abs(u) + 1.0)
    above = u > hi
    below = u < lo
    lam1 = np.where(above | below, shrink, 1.0)
    lam2 = np.where(above, hi - frac, np.where(below, lo - frac, 0.0))
    if lam1.ndim == 0:
        return float(lam1), float(lam2)
    return lam1, lam2


@dataclass
class UncertainSFModel:
    """Ground-truth SF plant.

    ``f``, ``g`` and ``d`` are stacked per-subsystem evaluators ``(x, t) ->``
    arrays of shape ``(..., n, m)``; ``g`` may instead return ``(..., n, m, m)``
    for matrix gains. ``gamma(t)`` returns ``(n, m)``. ``aux(x, u, t)`` gives the
    derivative of the auxiliary states and ``input_map(u, t)`` models the
    actuator between the commanded and applied input (faults live there).
    """

    n: int
    f: Callable
    g: Callable
    d: Optional[Callable] = None
    gamma: Optional[Callable] = None
    m: int = 1
    n_aux: int = 0
    aux: Optional[Callable] = None
    input_map: Optional[Callable] = None
    limits: Optional[SaturationLimits] = None
    name: str = "sf"
    state_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"SF chain needs n >= 2 subsystems, got {self.n}")
        if self.m < 1:
            raise ValueError("block width m must be >= 1")
        if self.n_aux and self.aux is None:
            raise ValueError("auxiliary states declared without aux dynamics")

    @classmethod
    def from_subsystems(cls, fs, gs, ds=None, gammas=None, **kwargs) -> "UncertainSFModel":
        """Build a scalar chain (``m = 1``) from per-subsystem callables.

        ``fs[i](x, t)``, ``gs[i](x, t)``, ``ds[i](x, t)`` and ``gammas[i](t)``
        receive the full state vector, so non-triangular terms are allowed.
        """
        n = len(fs)
        if len(gs) != n or (ds is not None and len(ds) != n) or (gammas is not None and len(gammas) != n):
            raise ValueError("per-subsystem evaluator lists must share length n")

        def stack(funcs):
            def evaluate(x, t):
                x = np.asarray(x, dtype=float)
                cols = [np.broadcast_to(np.asarray(fn(x, t), dtype=float), x.shape[:-1]) for fn in funcs]
                return np.stack(cols, axis=-1)[..., None]
            return evaluate

        gamma = None
        if gammas is not None:
            def gamma(t):
                return np.array([[float(fn(t))] for fn in gammas])

        return cls(n=n, f=stack(fs), g=stack(gs), d=stack(ds) if ds is not None else None,
                   gamma=gamma, m=1, **kwargs)

    @property
    def n_chain(self) -> int:
        return self.n * self.m

    @property
    def dim(self) -> int:
        return self.n * self.m + self.n_aux

    def chain(self, x) -> np.ndarray:
        """View of the chain part of ``x`` as ``(..., n, m)``."""
        x = np.asarray(x, dtype=float)
        return x[..., : self.n_chain].reshape(x.shape[:-1] + (self.n, self.m))

    def applied_input(self, u, t):
        u = np.asarray(u, dtype=float)
        return self.input_map(u, t) if self.input_map is not None else u

    def derivatives(self, x, u, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(x.shape[:-1] + (self.m,))
        chain = self.chain(x)
        drive_in = np.concatenate([chain[..., 1:, :], self.applied_input(u, t)[..., None, :]], axis=-2)
        gain = np.asarray(self.g(x, t), dtype=float)
        if gain.ndim == chain.ndim + 1:
            drive = np.einsum("...ij,...j->...i", gain, drive_in)
        else:
            drive = gain * drive_in
        dchain = np.asarray(self.f(x, t), dtype=float) + drive
        if self.d is not None:
            dchain = dchain + self.d(x, t)
        if self.gamma is not None:
            dchain = dchain + self.gamma(t)
        dx = dchain.reshape(x.shape[:-1] + (self.n_chain,))
        if self.n_aux:
            dx = np.concatenate([dx, np.asarray(self.aux(x, u, t), dtype=float)], axis=-1)
        return dx


def _first_bad_subsystem(model: UncertainSFModel, dx: np.ndarray) -> Optional[int]:
    bad = ~np.isfinite(dx)
    if not bad.any():
        return None
    cols = np.nonzero(bad.reshape(-1, dx.shape[-1]).any(axis=0))[0]
    col = int(cols[0])
    if col < model.n_chain:
        return col // model.m + 1
    return model.n + 1  # auxiliary states are reported past the chain


def step(model: UncertainSFModel, x, u, t: float, h: float) -> np.ndarray:
    """One classical RK4 step with ``u`` held over ``[t, t+h]``."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state entering integrator", _first_bad_subsystem(model, x), t)

    def rhs(xs, ts):
        dx = model.derivatives(xs, u, ts)
        if not np.all(np.isfinite(dx)):
            raise IntegrationError("non-finite derivative", _first_bad_subsystem(model, dx), ts)
        return dx

    k1 = rhs(x, t)
    k2 = rhs(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = rhs(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = rhs(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def n_steps(duration: float, h: float) -> int:
    """Number of grid steps; ``duration`` must be an integral multiple of ``h``."""
    if not duration > 0 or not h > 0:
        raise ValueError("duration and step must be positive")
    k = int(round(duration / h))
    if k < 1 or abs(k * h - duration) > 1e-9 * max(1.0, duration):
        raise ValueError(f"duration {duration} s is not an integral multiple of h={h} s")
    return k


@dataclass
class Trace:
    """Time-indexed rollout record on a uniform grid ``t_k = k*h``.

    Row ``k`` holds the state at ``t_k`` and the control applied over
    ``[t_k, t_k + h)``. ``events`` are ``(step_index, name)`` pairs; their
    timestamps are ``t[step_index]``.
    """

    h: float
    n: int
    m: int
    t: np.ndarray
    x: np.ndarray
    u_raw: np.ndarray
    u_sat: np.ndarray
    e: np.ndarray
    envelope: np.ndarray
    policy: list
    events: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def shutdown(self) -> bool:
        return any(name == "shutdown" for _, name in self.events)

    def event_time(self, name: str) -> Optional[float]:
        for k, ev in self.events:
            if ev == name:
                return float(self.t[k])
        return None

    def error(self, i: int = 1) -> np.ndarray:
        """Tracking error of subsystem ``i`` (1-based), shape ``(K, m)``."""
        return self.e[:, (i - 1) * self.m : i * self.m]

    def columns(self) -> list[str]:
        def names(prefix, count):
            if count == 1:
                return [prefix]
            return [f"{prefix}_{j + 1}" for j in range(count)]

        cols = ["t"] + [f"x{j + 1}" for j in range(self.x.shape[1])]
        cols += names("u_raw", self.m) + names("u_sat", self.m)
        if self.m == 1:
            cols += [f"e{i + 1}" for i in range(self.n)]
        else:
            cols += [f"e{i + 1}_{j + 1}" for i in range(self.n) for j in range(self.m)]
        cols += ["envelope", "policy", "event"]
        cols += list(self.extras)
        return cols

    def to_csv(self, path=None) -> str:
        """Serialize with round-trip float formatting; returns the CSV text."""
        event_at = {}
        for k, name in self.events:
            event_at[k] = name if k not in event_at else f"{event_at[k]}|{name}"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        extra_cols = [np.asarray(v, dtype=float) for v in self.extras.values()]
        for k in range(len(self.t)):
            row = [repr(float(self.t[k]))]
            row += [repr(float(v)) for v in self.x[k]]
            row += [repr(float(v)) for v in self.u_raw[k]]
            row += [repr(float(v)) for v in self.u_sat[k]]
            row += [repr(float(v)) for v in self.e[k]]
            row += [repr(float(self.envelope[k])), self.policy[k], event_at.get(k, "")]
            row += [repr(float(col[k])) for col in extra_cols]
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text, n: int, m: int = 1) -> "Trace":
        """Inverse of :meth:`to_csv` (needs the chain shape, which is not encoded)."""
        text = path_or_text
        if "\n" not in str(path_or_text):
            with open(path_or_text, newline="") as fh:
                text = fh.read()
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        i_env = header.index("envelope")
        n_u = m
        n_e = n * m
        n_x = i_env - 1 - 2 * n_u - n_e
        num = lambda r, a, b: [float(v) for v in r[a:b]]
        t = np.array([float(r[0]) for r in body])
        x = np.array([num(r, 1, 1 + n_x) for r in body]).reshape(len(body), n_x)
        a = 1 + n_x
        u_raw = np.array([num(r, a, a + n_u) for r in body]).reshape(len(body), n_u)
        u_sat = np.array([num(r, a + n_u, a + 2 * n_u) for r in body]).reshape(len(body), n_u)
        e = np.array([num(r, a + 2 * n_u, i_env) for r in body]).reshape(len(body), n_e)
        envelope = np.array([float(r[i_env]) for r in body])
        policy = [r[i_env + 1] for r in body]
        events = []
        for k, r in enumerate(body):
            if r[i_env + 2]:
                events += [(k, name) for name in r[i_env + 2].split("|")]
        extras = {name: np.array([float(r[j]) for r in body]) for j, name in enumerate(header) if j > i_env + 2}
        h = float(t[1] - t[0]) if len(t) > 1 else float("nan")
        return cls(h=h, n=n, m=m, t=t, x=x, u_raw=u_raw, u_sat=u_sat, e=e,
                   envelope=envelope, policy=policy, events=events, extras=extras)


class _NoSupervisor:
    def envelope_at(self, t):
        return float("nan")

    def update(self, e, t):
        from .safety import Decision

        return Decision.CONTINUE_PRIMARY


def simulate(model: UncertainSFModel, controller, supervisor, reference, duration: float,
             h: float = 1e-3, seed: int = 0, x0=None) -> Trace:
    """Closed-loop rollout with zero-order-hold control.

    ``controller`` must provide ``reset(rng)``, ``compute(t, x, ref)`` returning
    ``(u_raw, errors)`` with ``errors`` shaped ``(n, m)``, a ``policy`` tag and
    optionally ``switch_to_fallback()`` and ``extras()`` (dict of floats logged
    as extra trace columns). ``reference(t)`` returns the reference and its
    derivatives. ``supervisor`` may be ``None``.

    On a Shutdown decision the control of that step is zeroed, the event is
    logged and the trace ends with that row. A RunFallback decision swaps the
    policy from the next step on.
    """
    from .safety import Decision

    K = n_steps(duration, h)
    rng = np.random.default_rng(seed)
    controller.reset(rng)
    sup = supervisor if supervisor is not None else _NoSupervisor()
    x = np.zeros(model.dim) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"initial state must have shape ({model.dim},), got {x.shape}")

    m = model.m
    ts, xs, uraw, usat, es, env, pol = [], [], [], [], [], [], []
    events = []
    extras: dict[str, list] = {}
    for k in range(K):
        t = k * h
        ref = reference(t)
        u_raw, errors = controller.compute(t, x, ref)
        u_raw = np.asarray(u_raw, dtype=float).reshape(m)
        errors = np.asarray(errors, dtype=float).reshape(model.n, m)
        policy = controller.policy
        decision = sup.update(float(np.max(np.abs(errors[0]))), t)
        if decision is Decision.SHUTDOWN:
            u = np.zeros(m)
            events.append((k, "shutdown"))
        else:
            u = saturate(u_raw, model.limits) if model.limits is not None else u_raw.copy()
            u = np.asarray(u, dtype=float).reshape(m)
            if decision is Decision.RUN_FALLBACK and getattr(controller, "fallback_active", True) is False:
                controller.switch_to_fallback()
                events.append((k, "switch"))
        ts.append(t)
        xs.append(x.copy())
        uraw.append(u_raw)
        usat.append(u)
        es.append(errors.reshape(-1))
        env.append(sup.envelope_at(t))
        pol.append(policy)
        if hasattr(controller, "extras"):
            for name, val in controller.extras().items():
                extras.setdefault(name, []).append(float(val))
        if decision is Decision.SHUTDOWN:
            break
        x = step(model, x, u, t, h)

    return Trace(h=h, n=model.n, m=m, t=np.array(ts), x=np.array(xs), u_raw=np.array(uraw),
                 u_sat=np.array(usat), e=np.array(es), envelope=np.array(env), policy=pol,
                 events=events, extras={k: np.array(v) for k, v in extras.items()})
