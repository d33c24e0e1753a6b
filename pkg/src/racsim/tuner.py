"""
JAYA population optimizer for controller gains.

JAYA has no algorithm-specific parameters: every candidate moves toward the
current best and away from the current worst,

    x'_j = x_j + r1_j (best_j - |x_j|) - r2_j (worst_j - |x_j|),

and the move is kept only if it lowers the cost. Besides the cost and the
search box, the only knobs are population size, iteration count and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class InfeasibleBoxError(RuntimeError):
    """Every initial candidate evaluated to an infinite cost."""


@dataclass(frozen=True)
class Candidate:
    gains: np.ndarray
    cost: float


def _box_arrays(box):
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ValueError("box must be a pair of equal-length 1-D bounds")
    if not np.all(lo <= hi):
        raise ValueError("box lower bounds must not exceed upper bounds")
    return lo, hi


def jaya_update(x, best, worst, rng: Optional[np.random.Generator] = None, box=None, r1=None, r2=None):
    """Move ``x`` toward ``best`` and away from ``worst``; result clipped to ``box``.

    ``x`` may be a single vector or a population ``(P, D)``. ``r1``/``r2``
    default to fresh ``U(0, 1)`` draws per coordinate.
    """
    x = np.asarray(x, dtype=float)
    best = np.asarray(best, dtype=float)
    worst = np.asarray(worst, dtype=float)
    if x.shape[-1] != best.shape[-1] or x.shape[-1] != worst.shape[-1]:
        raise ValueError("candidate, best and worst must share dimension")
    if r1 is None or r2 is None:
        if rng is None:
            raise ValueError("need an rng or explicit r1, r2")
        r1 = rng.random(x.shape)
        r2 = rng.random(x.shape)
    ax = np.abs(x)
    out = x + r1 * (best - ax) - r2 * (worst - ax)
    if box is not None:
        lo, hi = _box_arrays(box)
        out = np.clip(out, lo, hi)
    return out


def _evaluate(cost_fn, pop, vectorized):
    if vectorized:
        costs = np.asarray(cost_fn(pop), dtype=float).reshape(len(pop))
    else:
        costs = np.array([float(cost_fn(p)) for p in pop])
    # NaN costs are failed rollouts
    return np.where(np.isnan(costs), np.inf, costs)


def jaya_optimize(cost_fn: Callable, box, pop_size: int = 20, max_iters: int = 100, seed: int = 0,
                  vectorized: bool = False, callback: Optional[Callable] = None):
    """Minimise ``cost_fn`` over ``box = (lower, upper)``.

    With ``vectorized=True`` the cost function receives the whole population
    ``(P, D)`` and returns ``P`` costs, which lets rollouts run as a batch.
    Returns ``(best_candidate, history)`` where ``history[k]`` is the best
    cost after ``k`` iterations (index 0 is the initial population).
    """
    if pop_size < 2:
        raise ValueError("population size must be >= 2")
    if max_iters < 0:
        raise ValueError("iteration count must be >= 0")
    lo, hi = _box_arrays(box)
    rng = np.random.default_rng(seed)
    pop = lo + rng.random((pop_size, lo.size)) * (hi - lo)
    costs = _evaluate(cost_fn, pop, vectorized)
    if not np.any(np.isfinite(costs)):
        raise InfeasibleBoxError("infeasible box: every initial candidate has infinite cost")

    history = [float(costs.min())]
    for it in range(max_iters):
        best = pop[np.argmin(costs)]
        worst = pop[np.argmax(costs)]
        trial = jaya_update(pop, best, worst, rng, box=(lo, hi))
        trial_costs = _evaluate(cost_fn, trial, vectorized)
        accept = trial_costs < costs
        pop = np.where(accept[:, None], trial, pop)
        costs = np.where(accept, trial_costs, costs)
        history.append(float(costs.min()))
        if callback is not None:
            callback(it + 1, history[-1])

    i = int(np.argmin(costs))
    return Candidate(gains=pop[i].copy(), cost=float(costs[i])), np.array(history)


def rmse(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def tracking_cost_arrays(e_pos, e_vel, shutdown, weights=(1.0, 0.0)):
    """Weighted RMSE of position and velocity errors along the time axis (0).

    Arrays may carry trailing batch axes; ``shutdown`` flags give ``+inf``.
    """
    w_p, w_v = weights
    e_pos = np.asarray(e_pos, dtype=float)
    e_vel = np.asarray(e_vel, dtype=float)
    cost = w_p * np.sqrt(np.mean(e_pos**2, axis=0)) + w_v * np.sqrt(np.mean(e_vel**2, axis=0))
    cost = np.where(np.asarray(shutdown, dtype=bool), np.inf, cost)
    return float(cost) if np.ndim(cost) == 0 else cost


def tracking_cost(trace, weights=(1.0, 0.0)) -> float:
    """``w_p * RMSE(e1) + w_v * RMSE(e2)``; ``+inf`` if the rollout shut down."""
    if len(trace) == 0:
        raise ValueError("cannot score an empty trace")
    if trace.shutdown:
        return math.inf
    e1 = trace.error(1)
    e2 = trace.error(2) if trace.n > 1 else np.zeros_like(e1)
    # joint RMSE pools all components of a vector subsystem
    return float(weights[0] * rmse(e1) + weights[1] * rmse(e2))
