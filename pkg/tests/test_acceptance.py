"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import re
import time

import numpy as np
import pytest

from racsim import harness as H
from racsim import observers as O
from racsim import policy as NN
from racsim.cli import main
from racsim.safety import Decision, PPCEnvelope, Supervisor, envelope
from racsim.sfcore import SaturationLimits, saturate, saturation_coefficients, simulate
from racsim.tuner import jaya_optimize, rmse


def test_criterion_01_saturation_decomposition(criterion):
    with criterion(1, "saturation decomposition over 1e6 samples") as c:
        limits = SaturationLimits(-1.5, 2.0)
        u = np.random.default_rng(0).uniform(-10.0, 10.0, 1_000_000)
        t0 = time.perf_counter()
        lam1, lam2 = saturation_coefficients(u, limits)
        err = np.max(np.abs(lam1 * u + lam2 - saturate(u, limits)))
        elapsed = time.perf_counter() - t0
        inside = np.mean((u >= -1.5) & (u <= 2.0))
        c.detail = f"max err {err:.2e}, {elapsed:.3f} s, interior fraction {inside:.3f}"
        assert 0.05 < inside < 0.95
        assert err <= 1e-12
        assert elapsed < 1.0


def test_criterion_02_envelope(criterion):
    with criterion(2, "prescribed-performance envelope") as c:
        env = PPCEnvelope(o_shoot=1.0, o_bound=0.2, o_star=2.0)
        end = 10.0 / env.o_star
        grid = np.linspace(0.0, end, 10_000)
        vals = np.array([envelope(env, t) for t in grid])
        gap = abs(envelope(env, end) - env.o_bound)
        c.detail = f"o(0)={vals[0]}, |o(10/o*)-o_bound|={gap:.2e}, min step {np.min(-np.diff(vals)):.2e}"
        assert vals[0] == env.o_shoot
        assert gap <= 1e-4 * (env.o_shoot - env.o_bound)
        assert np.all(np.diff(vals) < 0)


class ScriptedController:
    """Replays a fixed error sequence through the rollout loop."""

    policy = "primary"

    def __init__(self, errors):
        self.errors = errors
        self.k = 0
        self.fallback_active = False

    def reset(self, rng):
        self.k = 0
        self.fallback_active = False

    def switch_to_fallback(self):
        self.fallback_active = True

    def compute(self, t, x, ref):
        e = self.errors[self.k]
        self.k += 1
        return np.zeros(1), np.array([[e], [0.0]])


def test_criterion_03_supervisor_automaton(criterion):
    with criterion(3, "supervisor decision sequences over 1000 traces") as c:
        rng = np.random.default_rng(0)
        env = PPCEnvelope(o_shoot=1.0, o_bound=0.2, o_star=1.0)
        code = {Decision.CONTINUE_PRIMARY: "C", Decision.RUN_FALLBACK: "F", Decision.SHUTDOWN: "S"}
        model = H.linear_chain_model([-1.0, -1.0], [1.0, 1.0])
        h, K = 0.01, 100
        seen = set()
        for _ in range(1000):
            t = np.arange(K) * h
            ratio = np.clip(rng.uniform(0.0, 0.9) + np.cumsum(rng.normal(0.0, 0.04, K)), 0.0, 1.3)
            errors = ratio * np.array([envelope(env, tk) for tk in t])

            sup = Supervisor(env, 0.8)
            seq, latched = "", False
            for tk, e in zip(t, errors):
                seq += code[sup.update(e, tk)]
                assert not (latched and not sup.state.latched), "latch reset"
                latched = sup.state.latched
            assert re.fullmatch(r"C*F*S*", seq)
            # the rollout stops at the first shutdown
            assert re.fullmatch(r"C*F*S?", seq[: seq.find("S") + 1] if "S" in seq else seq)
            seen |= set(seq)

            trace = simulate(model, ScriptedController(errors), Supervisor(env, 0.8),
                             lambda tk: (np.zeros(1), np.zeros(1), np.zeros(1)), K * h, h)
            viol = np.nonzero(errors >= np.array([envelope(env, tk) for tk in t]))[0]
            if viol.size:
                assert len(trace) == viol[0] + 1
                assert trace.events[-1] == (viol[0], "shutdown")
            else:
                assert len(trace) == K and not trace.shutdown
            switches = [k for k, name in trace.events if name == "switch"]
            assert len(switches) <= 1
        c.detail = f"decisions observed {''.join(sorted(seen))}"
        assert seen == {"C", "F", "S"}


def test_criterion_04_exponential_decay(criterion):
    with criterion(4, "exponential stability surrogate on the linear benchmark") as c:
        t0 = time.perf_counter()
        trace, _ = H.run_scenario(H.builtin_scenario("linear_benchmark"))
        elapsed = time.perf_counter() - t0
        norm = np.linalg.norm(trace.e, axis=1)
        win = norm > 1e-9 * norm[0]
        slope, icpt = np.polyfit(trace.t[win], np.log(norm[win]), 1)
        resid = np.log(norm[win]) - (slope * trace.t[win] + icpt)
        r2 = 1.0 - np.sum(resid**2) / np.sum((np.log(norm[win]) - np.mean(np.log(norm[win]))) ** 2)
        c.detail = f"slope {slope:.3f}/s, R^2 {r2:.4f}, {elapsed:.2f} s"
        assert slope < 0
        assert r2 >= 0.99
        assert elapsed < 5.0


@pytest.mark.slow
def test_criterion_05_emla_tuned_tracking(criterion):
    with criterion(5, "tuned model-based EMLA tracking under 65-76 kN") as c:
        t0 = time.perf_counter()
        cfg = H.builtin_scenario("emla_nominal")
        best, _, tuned = H.tune_scenario(cfg, pop_size=20, max_iters=100, seed=0)
        trace, met = H.run_scenario(tuned)
        elapsed = time.perf_counter() - t0
        e = np.abs(trace.error(1)).ravel()
        hold = trace.t >= 3.5
        ss = float(np.max(e[hold]))
        c.detail = f"steady-state |e| {ss * 1e3:.3g} mm, rmse {met.position_rmse:.3g} m, {elapsed:.1f} s"
        assert ss < 2e-3
        assert not trace.shutdown and met.envelope_violations == 0
        assert np.all(e < trace.envelope)
        assert elapsed < 60.0


@pytest.mark.slow
def test_criterion_06_fault_tolerance(criterion):
    with criterion(6, "manipulator with 30% actuator degradation at 15 s") as c:
        cfg = H.builtin_scenario("manipulator_fault")
        healthy = H.deep_merge(cfg, {})
        healthy["plant"].pop("faults")
        tr_f, met_f = H.run_scenario(cfg)
        tr_h, _ = H.run_scenario(healthy)
        post = tr_f.t >= 15.0
        r_f = rmse(tr_f.e[post][:, :2])
        r_h = rmse(tr_h.e[tr_h.t >= 15.0][:, :2])
        c.detail = f"post-fault rmse {r_f:.3g} rad vs healthy {r_h:.3g} rad (ratio {r_f / r_h:.2f})"
        assert not tr_f.shutdown and met_f.shutdown_time_s is None
        assert r_f <= 3.0 * r_h


def sphere(pop):
    return np.sum(pop**2, axis=1)


def test_criterion_07_jaya_sphere(criterion):
    with criterion(7, "JAYA on the 4-D sphere over 100 seeds") as c:
        box = (np.full(4, -5.0), np.full(4, 5.0))
        solved = monotone = 0
        for seed in range(100):
            best, hist = jaya_optimize(sphere, box, pop_size=20, max_iters=200, seed=seed, vectorized=True)
            solved += best.cost < 1e-3
            monotone += bool(np.all(np.diff(hist) <= 0))
        c.detail = f"{solved}/100 below 1e-3, {monotone}/100 non-increasing"
        assert solved >= 95
        assert monotone == 100


def test_criterion_08_lm_training(criterion):
    with criterion(8, "Levenberg-Marquardt training") as c:
        rng = np.random.default_rng(0)
        net = NN.init_policy((2, 8, 1), rng)
        X = rng.normal(size=(20, 2))
        J = NN.jacobian(net, X)
        w = net.flat()
        Jfd = np.empty_like(J)
        for i in range(w.size):
            dw = np.zeros_like(w)
            dw[i] = 1e-6
            Jfd[:, i] = (NN.forward(net.with_flat(w + dw), X).ravel()
                         - NN.forward(net.with_flat(w - dw), X).ravel()) / 2e-6
        rel = np.linalg.norm(J - Jfd) / np.linalg.norm(Jfd)

        Xs = rng.uniform(-1, 1, size=(80, 2))
        ys = np.tanh(Xs[:, 0] - 2 * Xs[:, 1]) + 0.3 * Xs[:, 0] ** 2
        _, hist = NN.lm_train(net, NN.Dataset(Xs, ys), max_iters=50)

        x = np.linspace(-2.0, 2.0, 25)
        lin0 = NN.PolicyNet((1, 1), [np.array([[-0.4]])], [np.array([0.9])])
        _, lin_hist = NN.lm_train(lin0, NN.Dataset(x[:, None], 1.7 * x - 0.25))
        c.detail = f"jacobian rel {rel:.2e}, {len(hist) - 1} accepted steps, linear SSE {lin_hist[-1]:.2e}"
        assert rel < 1e-5
        assert len(hist) > 2 and np.all(np.diff(hist) < 0)
        assert lin_hist[-1] < 1e-12


@pytest.mark.slow
def test_criterion_09_dnn_fallback_switch(criterion):
    with criterion(9, "latched DNN to RAC handover under a traction load") as c:
        cfg = H.builtin_scenario("iwd_dnn_fallback")
        trace, met = H.run_scenario(cfg)
        switches = [k for k, name in trace.events if name == "switch"]
        pol = np.array(trace.policy)
        e = np.abs(trace.error(1)).ravel()
        ts = met.switch_time_s
        c.detail = f"switches {len(switches)}, switch at {ts} s"
        assert len(switches) == 1
        k = switches[0]
        assert np.all(pol[:k] == "dnn") and np.all(pol[k + 1:] == "rac")
        assert not trace.shutdown and len(trace) == H.n_steps(cfg["duration_s"], cfg["step_s"])
        assert 9.5 <= ts <= 11.5
        back = np.nonzero((trace.t > ts) & (e < 0.8 * trace.envelope))[0]
        assert back.size
        reentry = trace.t[back[0]] - ts
        c.detail += f", re-entry after {reentry:.3f} s"
        assert reentry <= 2.0


def test_criterion_10_observer(criterion):
    with criterion(10, "velocity observer decay rate and noise trade-off") as c:
        h, v_true = 1e-3, 0.5

        def run(l1, l2, T, noise, seed):
            rng = np.random.default_rng(seed)
            obs = O.ObserverState(q_hat=0.0, v_hat=0.0, l1=l1, l2=l2)
            err = np.empty(int(round(T / h)))
            for k in range(err.size):
                meas = v_true * k * h + (noise * rng.standard_normal() if noise else 0.0)
                obs = O.velocity_observer_step(meas, 0.0, obs, 1.0, h)
                err[k] = obs.v_hat - v_true
            return err

        l1, l2 = 60.0, 500.0
        predicted = -np.max(O.observer_poles(l1, l2).real)
        err = run(l1, l2, 1.0, 0.0, 0)
        t = np.arange(1, err.size + 1) * h
        win = (t > 0.3) & (t < 1.0)
        rate = -np.polyfit(t[win], np.log(np.abs(err[win])), 1)[0]
        var_lo = np.var(run(20.0, 100.0, 4.0, 1e-4, 3)[-2000:])
        var_hi = np.var(run(200.0, 10_000.0, 4.0, 1e-4, 3)[-2000:])
        c.detail = f"rate {rate:.3f}/s vs {predicted:.3f}/s, variance low {var_lo:.2e} high {var_hi:.2e}"
        assert abs(rate - predicted) / predicted < 0.05
        assert var_hi > var_lo


@pytest.mark.slow
def test_criterion_11_cli_determinism(criterion, tmp_path):
    with criterion(11, "CLI traces byte-identical for a fixed seed") as c:
        checked = []
        for name in ("linear_benchmark", "emla_nominal", "manipulator_fault", "iwd_dnn_fallback"):
            a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
            assert main(["simulate", name, "--seed", "3", "--out", str(a)]) == 0
            assert main(["simulate", name, "--seed", "3", "--out", str(b)]) == 0
            assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
            assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
            checked.append(name)
        c.detail = f"identical traces for {', '.join(checked)}"
