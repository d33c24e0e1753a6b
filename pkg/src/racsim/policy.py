"""
Feed-forward neural control policy trained with Levenberg-Marquardt.

The network maps (tracking error, reference, reference rate, measured output)
to a control command. Hidden layers use tanh, the output is affine. Inputs
and the output are rescaled with ranges recorded from the training data.

Training data come from open-loop runs in which the command is ramped slowly
up to the actuator limits. Each sample pairs the command applied at ``t``
with the output the plant reached a short look-ahead later, so the fitted
network is an approximate inverse model: asked for a reference, it returns the
command that gets the plant there.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .sfcore import UncertainSFModel, n_steps, step

FEATURES = ("error", "reference", "reference_rate", "measured")


@dataclass
class PolicyNet:
    sizes: tuple
    weights: list
    biases: list
    in_offset: np.ndarray = None
    in_scale: np.ndarray = None
    out_offset: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("network needs at least an input and an output layer")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.sizes) - 1:
            raise ValueError("one weight matrix and bias per layer transition")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if np.shape(W) != (self.sizes[l + 1], self.sizes[l]) or np.shape(b) != (self.sizes[l + 1],):
                raise ValueError(f"layer {l + 1} shapes do not match sizes {self.sizes}")
        if self.in_offset is None:
            self.in_offset = np.zeros(self.sizes[0])
        if self.in_scale is None:
            self.in_scale = np.ones(self.sizes[0])
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.in_offset = np.asarray(self.in_offset, dtype=float)
        self.in_scale = np.asarray(self.in_scale, dtype=float)
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("network weights must be finite")

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_flat(self, w) -> "PolicyNet":
        w = np.asarray(w, dtype=float)
        if w.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong length")
        Ws, bs, i = [], [], 0
        for l in range(len(self.sizes) - 1):
            o, n = self.sizes[l + 1], self.sizes[l]
            Ws.append(w[i : i + o * n].reshape(o, n))
            i += o * n
            bs.append(w[i : i + o].copy())
            i += o
        return replace(self, weights=Ws, biases=bs)


def init_policy(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> PolicyNet:
    """Glorot-uniform weights, zero biases."""
    Ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        lim = scale * np.sqrt(6.0 / (n_in + n_out))
        Ws.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
        bs.append(np.zeros(n_out))
    return PolicyNet(tuple(sizes), Ws, bs)


def _forward_cache(net: PolicyNet, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    a = (X - net.in_offset) / net.in_scale
    acts = [a]
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ W.T + b
        a = s if l == last else np.tanh(s)
        acts.append(a)
    return acts


def forward(net: PolicyNet, x) -> np.ndarray:
    """Network output for one feature vector ``(n_in,)`` or a batch ``(N, n_in)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"expected {net.sizes[0]} input features, got {x.shape[-1]}")
    y = net.out_scale * _forward_cache(net, x)[-1] + net.out_offset
    return y[0] if x.ndim == 1 else y


def lipschitz_bound(net: PolicyNet) -> float:
    """Upper bound on the Lipschitz constant w.r.t. the raw (unscaled) input."""
    L = abs(net.out_scale) / float(np.min(np.abs(net.in_scale)))
    for W in net.weights:
        L *= np.linalg.norm(W, 2)
    return float(L)


def jacobian(net: PolicyNet, X) -> np.ndarray:
    """Backprop Jacobian of the outputs w.r.t. the flat parameters.

    Rows are ordered sample-major then output, matching ``forward(X).ravel()``.
    """
    acts = _forward_cache(net, X)
    N = acts[0].shape[0]
    n_out = net.sizes[-1]
    L = len(net.weights)
    blocks = [None] * L
    # delta[s, o, j]: d output_o / d pre-activation_j of the current layer
    delta = np.broadcast_to(net.out_scale * np.eye(n_out), (N, n_out, n_out)).copy()
    for l in range(L - 1, -1, -1):
        a_prev = acts[l]
        dW = delta[:, :, :, None] * a_prev[:, None, None, :]
        blocks[l] = np.concatenate([dW.reshape(N, n_out, -1), delta], axis=2)
        if l > 0:
            delta = (delta @ net.weights[l]) * (1.0 - acts[l] ** 2)[:, None, :]
    return np.concatenate(blocks, axis=2).reshape(N * n_out, -1)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    profile_id: str = ""
    seed: int = 0
    feature_names: tuple = FEATURES

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(len(self.X), -1)
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.X)

    def ranges(self):
        """``(offset, scale)`` mapping each recorded input range onto [-1, 1]."""
        lo, hi = self.X.min(axis=0), self.X.max(axis=0)
        scale = (hi - lo) / 2.0
        return (hi + lo) / 2.0, np.where(scale > 0, scale, 1.0)

    def subsample(self, every: int) -> "Dataset":
        return replace(self, X=self.X[::every], y=self.y[::every])


def normalize_to(net: PolicyNet, data: Dataset) -> PolicyNet:
    """Copy of ``net`` whose input/output scaling matches the data ranges."""
    off, sc = data.ranges()
    ylo, yhi = data.y.min(), data.y.max()
    out_scale = (yhi - ylo) / 2.0 if yhi > ylo else 1.0
    return replace(net, in_offset=off, in_scale=sc, out_offset=(yhi + ylo) / 2.0, out_scale=out_scale)


def sse(net: PolicyNet, data: Dataset) -> float:
    r = forward(net, data.X).reshape(data.y.shape) - data.y
    return float(np.sum(r * r))


def lm_train(net: PolicyNet, data: Dataset, mu0: float = 1e-3, mu_factor: float = 10.0,
             max_iters: int = 100, mu_max: float = 1e10, tol: float = 0.0):
    """Levenberg-Marquardt on the sum of squared residuals.

    Each iteration solves ``(J^T J + mu I) dw = -J^T r``; a step that lowers
    the SSE is accepted and ``mu`` divided by ``mu_factor``, otherwise ``mu``
    is multiplied. Returns ``(trained_net, history)`` where ``history`` holds
    the initial SSE followed by the SSE after every accepted step.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if not mu0 > 0 or not mu_factor > 1:
        raise ValueError("need mu0 > 0 and mu_factor > 1")
    w = net.flat()
    mu = mu0
    r = forward(net, data.X).reshape(-1) - data.y.reshape(-1)
    cur = float(r @ r)
    history = [cur]
    eye = np.eye(w.size)
    for _ in range(max_iters):
        if cur <= tol:
            break
        J = jacobian(net, data.X)
        grad = J.T @ r
        if not np.any(grad):
            break
        A = J.T @ J
        accepted = False
        while not accepted and mu <= mu_max:
            dw = -np.linalg.solve(A + mu * eye, grad)
            trial = net.with_flat(w + dw)
            r_new = forward(trial, data.X).reshape(-1) - data.y.reshape(-1)
            new = float(r_new @ r_new)
            if np.isfinite(new) and new < cur:
                net, w, r, cur = trial, w + dw, r_new, new
                mu = mu / mu_factor
                history.append(cur)
                accepted = True
            else:
                mu *= mu_factor
        if not accepted:
            break
    return net, np.array(history)


# ---------------------------------------------------------------------- data


@dataclass(frozen=True)
class RampProfile:
    """Piecewise-linear open-loop command schedule."""

    times_s: tuple
    command: tuple
    profile_id: str = "ramp"

    def __post_init__(self):
        if len(self.times_s) != len(self.command) or len(self.times_s) < 2:
            raise ValueError("ramp profile needs >= 2 matching knots")
        if np.any(np.diff(np.asarray(self.times_s, dtype=float)) <= 0):
            raise ValueError("ramp knot times must be strictly increasing")

    @property
    def duration(self) -> float:
        return float(self.times_s[-1] - self.times_s[0])

    def __call__(self, t: float) -> float:
        return float(np.interp(t, self.times_s, self.command))


def generate_dataset(plant: UncertainSFModel, ramp: RampProfile, noise_seed: int = 0, h: float = 1e-3,
                     lookahead_s: float = 0.1, noise_std: float = 0.0, dither: float = 0.0,
                     dither_hold_s: float = 0.05) -> Dataset:
    """Open-loop ramp rollout logged as ``(features, command)`` pairs.

    The reference of row ``k`` is the output reached ``lookahead_s`` later, so
    the logged command is the one that produced it. One row per grid step.
    """
    if plant.limits is not None:
        knots = np.asarray(ramp.command, dtype=float)
        if np.any(knots - dither < plant.limits.u_min) or np.any(knots + dither > plant.limits.u_max):
            raise ValueError("ramp (plus dither) leaves the actuator limits")
    K = n_steps(ramp.duration, h)
    L = int(round(lookahead_s / h))
    rng = np.random.default_rng(noise_seed)
    hold = max(1, int(round(dither_hold_s / h)))
    n_hold = (K + L) // hold + 1
    dith = dither * rng.uniform(-1.0, 1.0, size=n_hold) if dither > 0 else np.zeros(n_hold)
    noise = noise_std * rng.standard_normal(K) if noise_std > 0 else np.zeros(K)

    t0 = float(ramp.times_s[0])
    x = np.zeros(plant.dim)
    y = np.empty(K + L + 1)
    ydot = np.empty(K + L + 1)
    cmds = np.empty(K + L)
    for k in range(K + L):
        t = t0 + k * h
        cmd = ramp(t) + dith[k // hold]
        cmds[k] = cmd
        dx = plant.derivatives(x, np.array([cmd]), t)
        y[k], ydot[k] = x[0], dx[0]
        x = step(plant, x, np.array([cmd]), t, h)
    y[K + L] = x[0]

    meas = y[:K] + noise
    ref = y[L : L + K]
    ref_rate = ydot[L : L + K]
    X = np.column_stack([meas - ref, ref, ref_rate, meas])
    return Dataset(X=X, y=cmds[:K], profile_id=ramp.profile_id, seed=noise_seed)


def concat_datasets(sets: Sequence[Dataset]) -> Dataset:
    return Dataset(X=np.vstack([s.X for s in sets]), y=np.concatenate([s.y for s in sets]),
                   profile_id="+".join(s.profile_id for s in sets), seed=sets[0].seed)


# ------------------------------------------------------------- serialization


def save_policy(net: PolicyNet, path=None) -> str:
    """Flat text: a header line per block, then row-major values."""
    out = io.StringIO()
    fmt = lambda arr: " ".join(repr(float(v)) for v in np.ravel(arr))
    out.write("racsim-policy 1\n")
    out.write("sizes " + " ".join(str(s) for s in net.sizes) + "\n")
    out.write(f"in_offset {len(net.in_offset)}\n{fmt(net.in_offset)}\n")
    out.write(f"in_scale {len(net.in_scale)}\n{fmt(net.in_scale)}\n")
    out.write(f"out_affine 2\n{repr(float(net.out_offset))} {repr(float(net.out_scale))}\n")
    for l, (W, b) in enumerate(zip(net.weights, net.biases), start=1):
        out.write(f"W{l} {W.shape[0]} {W.shape[1]}\n")
        for row in W:
            out.write(fmt(row) + "\n")
        out.write(f"b{l} {b.size}\n{fmt(b)}\n")
    text = out.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def load_policy(path_or_text) -> PolicyNet:
    text = path_or_text
    if not str(path_or_text).startswith("racsim-policy"):
        with open(path_or_text) as fh:
            text = fh.read()
    lines = iter(text.splitlines())
    if next(lines).split() != ["racsim-policy", "1"]:
        raise ValueError("not a racsim policy file")
    sizes = tuple(int(s) for s in next(lines).split()[1:])
    vec = lambda: np.array([float(v) for v in next(lines).split()])
    next(lines)
    in_offset = vec()
    next(lines)
    in_scale = vec()
    next(lines)
    out_offset, out_scale = vec()
    Ws, bs = [], []
    for _ in range(len(sizes) - 1):
        _, rows, cols = next(lines).split()
        Ws.append(np.array([vec() for _ in range(int(rows))]).reshape(int(rows), int(cols)))
        next(lines)
        bs.append(vec())
    return PolicyNet(sizes, Ws, bs, in_offset, in_scale, float(out_offset), float(out_scale))
