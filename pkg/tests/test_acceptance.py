"""Acceptance gate: every criterion as one test, each printing a
machine-greppable ACCEPTANCE line with its runtime.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale model
(tree DAG, additive mechanism) is trained once per session and shared by
the criteria that need trained networks.
"""
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import pytest

from flowcast.checkpoint import load_checkpoint, save_checkpoint
from flowcast.encoder import init_from_context
from flowcast.evaluation import EvalSettings, run_protocol, training_windows
from flowcast.flow import FlowConfig, decode, encode, log_density
from flowcast.forecaster import (
    counterfactual,
    encode_latents,
    forecast,
    score_trajectory,
)
from flowcast.graph import InterventionSchedule, build_dag, empty_schedule
from flowcast.metrics import MmdConfig, a3_independence_mmd, trajectory_mmd
from flowcast.model import init_model
from flowcast.scm import (
    Family,
    Mechanism,
    SeriesBatch,
    draw_spec,
    make_windows,
    simulate,
    simulate_counterfactual,
)
from flowcast.training import TrainConfig, cfm_loss, train

from .oracles import MechanismCodec, brute_mmd_c6, rel_err

# desk-scale protocol constants (see configs/tree_additive_desk.json)
SERIES_LEN = 2500
TRAIN_FRAC = 0.8
WINDOW_LEN = 120
CONTEXT_LEN = 90
EPOCHS = 30
EVAL_STEPS = 16
DATA_SEED, TRAIN_SEED, EVAL_SEED = 1, 2, 3


@contextmanager
def criterion(num: int, desc: str, budget_s: float):
    t0 = time.time()
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {num} FAIL {desc} ({time.time() - t0:.1f}s)")
        raise
    dt = time.time() - t0
    if dt >= budget_s:
        print(f"\nACCEPTANCE {num} FAIL {desc} "
              f"(runtime {dt:.1f}s over budget {budget_s:.0f}s)")
        raise AssertionError(f"criterion {num} exceeded runtime budget")
    print(f"\nACCEPTANCE {num} PASS {desc} ({dt:.1f}s)")


@dataclass
class Desk:
    spec: object
    model: object
    series: object
    test_series: object
    train_windows: object
    train_seconds: float
    curve: list
    protocol: dict | None = None
    protocol_seconds: float = 0.0


@pytest.fixture(scope="session")
def desk():
    spec = draw_spec(Family.TREE, Mechanism.ADDITIVE, seed=7)
    series = simulate(spec, 1, SERIES_LEN, seed=DATA_SEED)
    windows = training_windows(series, WINDOW_LEN, CONTEXT_LEN, TRAIN_FRAC)
    assert windows.batch_size >= 1500
    boundary = int(SERIES_LEN * TRAIN_FRAC)
    test_series = SeriesBatch(series.values[:, :, boundary:], CONTEXT_LEN,
                              series.start_times + boundary)
    model = init_model(spec.dag, hidden_dim=32, width=64, depth=3,
                       seed=0, flow=FlowConfig(steps=EVAL_STEPS))
    t0 = time.time()
    result = train(model, windows,
                   TrainConfig(epochs=EPOCHS, batch_size=128,
                               seed=TRAIN_SEED, learning_rate=1e-3))
    train_seconds = time.time() - t0
    print(f"\n[desk fixture] trained {EPOCHS} epochs on "
          f"{windows.batch_size} windows in {train_seconds:.0f}s, "
          f"final loss {result.curve[-1][2]:.3f}")
    return Desk(spec, model, series, test_series, windows,
                train_seconds, result.curve)


@pytest.fixture(scope="session")
def protocol(desk):
    settings = EvalSettings(batch=32, realizations=20, runs=10,
                            intervention_offset=30, seed=EVAL_SEED)
    t0 = time.time()
    desk.protocol = run_protocol(desk.model, desk.spec, desk.test_series,
                                 WINDOW_LEN, CONTEXT_LEN, settings)
    desk.protocol_seconds = time.time() - t0
    return desk


@pytest.fixture(scope="session")
def independence_model():
    """Model for the latent-independence criterion, trained on a longer
    series: the latent calibration that the diagnostic measures only
    emerges with enough data."""
    spec = draw_spec(Family.TREE, Mechanism.ADDITIVE, seed=7)
    series = simulate(spec, 1, 6000, seed=DATA_SEED)
    windows = training_windows(series, WINDOW_LEN, CONTEXT_LEN, TRAIN_FRAC)
    boundary = int(6000 * TRAIN_FRAC)
    test_series = SeriesBatch(series.values[:, :, boundary:], CONTEXT_LEN,
                              series.start_times + boundary)
    model = init_model(spec.dag, hidden_dim=32, width=64, depth=3,
                       seed=0, flow=FlowConfig(steps=EVAL_STEPS))
    t0 = time.time()
    train(model, windows,
          TrainConfig(epochs=20, batch_size=128, seed=TRAIN_SEED,
                      learning_rate=1e-3))
    print(f"\n[independence fixture] trained 20 epochs on "
          f"{windows.batch_size} windows in {time.time() - t0:.0f}s")
    return spec, model, test_series


def _sample_conditions(desk, rng, n):
    """Realistic conditioning rows drawn from test-window states."""
    starts = rng.choice(desk.test_series.total_len - WINDOW_LEN + 1,
                        size=min(64, n), replace=False)
    wins = make_windows(desk.test_series, sorted(int(s) for s in starts),
                        WINDOW_LEN, CONTEXT_LEN)
    states = init_from_context(desk.model.rnn, desk.spec.dag, wins)
    conds = []
    for _ in range(n):
        b = rng.integers(wins.batch_size)
        i = rng.integers(desk.spec.dag.node_count)
        own = states[b, i]
        parents = desk.spec.dag.parents[i]
        pool = states[b, list(parents)].mean(axis=0) if parents \
            else np.zeros_like(own)
        conds.append(np.concatenate([own, pool]))
    return np.asarray(conds)


def test_criterion_1_flow_inversion(desk):
    with criterion(1, "flow inversion, RK4/64 vs /128 order check", 60):
        rng = np.random.default_rng(100)
        n = 1000
        xs = rng.uniform(-3.0, 3.0, size=n)
        conds = _sample_conditions(desk, rng, n)
        nodes = rng.integers(desk.spec.dag.node_count, size=n)

        def inversion_error(steps):
            cfg = FlowConfig(steps=steps)
            err = 0.0
            for i in range(desk.spec.dag.node_count):
                rows = nodes == i
                if not rows.any():
                    continue
                net = desk.model.nets[i]
                z = encode(net, cfg, xs[rows], conds[rows])
                back = decode(net, cfg, z, conds[rows])
                err = max(err, float(np.max(np.abs(back - xs[rows]))))
            return err

        e64 = inversion_error(64)
        e128 = inversion_error(128)
        print(f"  inversion error: RK4/64 {e64:.3e}, RK4/128 {e128:.3e}")
        assert e64 <= 1e-4
        assert e128 <= e64 / 10.0


def test_criterion_2_gradient_correctness():
    with criterion(2, "cfm gradient vs central finite differences", 60):
        dag = build_dag(2, [(0, 1)])
        model = init_model(dag, hidden_dim=4, width=8, depth=2, seed=0)
        rng = np.random.default_rng(17)
        batch = SeriesBatch(rng.normal(size=(3, 2, 12)), 8)
        draws = (rng.uniform(size=(2, 4, 1, 3)),
                 rng.standard_normal((2, 4, 1, 3)))
        _, grads = cfm_loss(model, batch, None, draws=draws)
        params = model.parameters()
        flat = [(name, i) for name, arr in params.items()
                for i in range(arr.size)]
        worst = 0.0
        for pick in rng.choice(len(flat), size=50, replace=False):
            name, idx = flat[pick]
            arr = params[name].reshape(-1)
            keep = arr[idx]
            step = 1e-5
            arr[idx] = keep + step
            up, _ = cfm_loss(model, batch, None, draws=draws, want_grads=False)
            arr[idx] = keep - step
            down, _ = cfm_loss(model, batch, None, draws=draws,
                               want_grads=False)
            arr[idx] = keep
            fd = (up - down) / (2 * step)
            worst = max(worst, rel_err(grads[name].reshape(-1)[idx], fd,
                                       floor=1e-4))
        print(f"  worst relative gradient error over 50 params: {worst:.2e}")
        assert worst <= 1e-4


def test_criterion_3_log_density_validity(desk):
    with criterion(3, "log-density: affine closed form + quadrature mass", 120):
        # affine flow: v = a*x gives log p(x) = log q(x e^a) + a
        from flowcast.autodiff import MlpParams
        from flowcast.flow import VelocityNet

        a = 0.6
        w = np.zeros((3 + 2 * 32, 1))
        w[0, 0] = a
        net = VelocityNet(MlpParams([w], [np.zeros((1, 1))], "identity"), 32)
        cfg64 = FlowConfig(steps=64)
        cond0 = np.zeros((1, 64))
        for x in (-1.7, 0.0, 0.4, 2.2):
            logp, z = log_density(net, cfg64, x, cond0)
            want = -0.5 * (x * math.e**a) ** 2 - 0.5 * math.log(2 * math.pi) + a
            assert abs(logp - want) < 1e-5

        # quadrature: the implied density integrates to one
        rng = np.random.default_rng(31)
        grid = np.linspace(-10.0, 10.0, 1601)
        worst = 0.0
        for k in range(10):
            from flowcast.flow import make_velocity_net

            net_k = make_velocity_net(32, rng, width=64, depth=3,
                                      final_scale=1.0)
            cond = np.broadcast_to(rng.normal(size=(1, 64)), (1601, 64))
            logp, _ = log_density(net_k, FlowConfig(steps=32), grid, cond)
            mass = np.trapezoid(np.exp(logp), grid)
            worst = max(worst, abs(mass - 1.0))
        print(f"  worst |mass - 1| over 10 nets: {worst:.2e}")
        assert worst <= 1e-3


def test_criterion_4_counterfactual_bookkeeping(desk):
    with criterion(4, "oracle-flow counterfactual equals SCM ground truth", 120):
        spec = desk.spec
        rng = np.random.default_rng(41)
        starts = rng.choice(desk.test_series.total_len - WINDOW_LEN + 1,
                            size=2, replace=False)
        windows = make_windows(desk.test_series,
                               sorted(int(s) for s in starts),
                               WINDOW_LEN, CONTEXT_LEN)
        codec = MechanismCodec(spec)
        worst = 0.0
        for _ in range(100):
            n_entries = int(rng.integers(1, 40))
            entries = {}
            for _ in range(n_entries):
                node = int(rng.integers(spec.dag.node_count))
                t = int(rng.integers(CONTEXT_LEN, WINDOW_LEN))
                entries[(node, t)] = float(rng.normal(0.0, 2.0))
            sched = InterventionSchedule(CONTEXT_LEN, WINDOW_LEN, entries)
            got = counterfactual(desk.model, windows, windows, sched,
                                 codec=codec)
            want = simulate_counterfactual(spec, windows, windows, sched)
            worst = max(worst, float(np.max(np.abs(
                got.values - want.future_values()))))
        print(f"  worst |rollout - SCM oracle| over 100 schedules: {worst:.2e}")
        assert worst <= 1e-10


def test_criterion_5_rmse_bands(protocol):
    desk = protocol
    with criterion(5, "desk-scale RMSE bands (obs/int/cf) + trend", 1800):
        res = desk.protocol
        obs = float(np.mean(res["observational"].rmse_runs))
        intv = float(np.mean(res["interventional"].rmse_runs))
        cf = float(np.mean(res["counterfactual"].rmse_runs))
        total_runtime = desk.train_seconds + desk.protocol_seconds
        print(f"  rmse obs {obs:.3f} (<=0.80) int {intv:.3f} (<=0.90) "
              f"cf {cf:.3f} (<=0.90)")
        print(f"  trend int>=obs: {intv >= obs}, cf>=obs: {cf >= obs}")
        print(f"  train {desk.train_seconds:.0f}s + protocol "
              f"{desk.protocol_seconds:.0f}s = {total_runtime:.0f}s (<1800s)")
        assert obs <= 0.80
        assert intv <= 0.90
        assert cf <= 0.90
        assert total_runtime < 1800
        # training loss trend: smoothed loss decreases from first to last epoch
        ema, alpha = None, 2.0 / 51.0
        by_epoch = {}
        for _, epoch, value in desk.curve:
            ema = value if ema is None else (1 - alpha) * ema + alpha * value
            by_epoch[epoch] = ema
        assert by_epoch[EPOCHS - 1] < by_epoch[0]
        # Trend clause as stated. At this scale the ground-truth floors are
        # obs 0.47 / int 0.38 / cf 0.0 (clamping an additive root can only
        # remove descendant entropy, and cf reuses the factual noise), so a
        # faithful model cannot satisfy it; see the decisions ledger.
        assert intv >= obs and cf >= obs, (
            "trend Int/CF >= Obs does not hold: ground-truth floors order "
            "the regimes the other way at desk scale (see decisions ledger)"
        )


def test_criterion_6_mmd_bands(protocol):
    desk = protocol
    with criterion(6, "desk-scale trajectory MMD bands", 1800):
        res = desk.protocol
        obs = float(np.mean(res["observational"].mmd_runs))
        intv = float(np.mean(res["interventional"].mmd_runs))
        print(f"  mmd obs {obs:.4f} (<=0.15) int {intv:.4f} (<=0.20)")
        assert obs <= 0.15
        assert intv <= 0.20


def test_criterion_7_latent_independence(independence_model):
    spec, model, test_series = independence_model
    with criterion(7, "latent independence MMD vs baseline", 300):
        rng = np.random.default_rng(71)
        starts = rng.choice(test_series.total_len - WINDOW_LEN + 1,
                            size=50, replace=False)
        windows = make_windows(test_series, sorted(int(s) for s in starts),
                               WINDOW_LEN, CONTEXT_LEN)
        pairs = encode_latents(model, windows)
        # test in blocks of 128 pairs (the protocol's standard batch
        # size); the unbiased null statistic is signed, so its magnitude
        # sets the baseline scale
        block, n_blocks = 128, 8
        models_, base_abs, control = [], [], []
        for i, (z, cond) in enumerate(pairs):
            for k in range(n_blocks):
                sl = slice(k * block, (k + 1) * block)
                m, b = a3_independence_mmd(z[sl], cond[sl],
                                           seed=1000 + 17 * i + k)
                mc, _ = a3_independence_mmd(cond[sl, 0], cond[sl],
                                            seed=1000 + 17 * i + k)
                models_.append(m)
                base_abs.append(abs(b))
                control.append(mc)
        ratio = float(np.mean(models_) / np.mean(base_abs))
        control_ratio = float(np.mean(control) / np.mean(base_abs))
        print(f"  model mean {np.mean(models_):.4g}, baseline scale "
              f"{np.mean(base_abs):.4g}, ratio {ratio:.2f} (<=3); "
              f"dependence-injection ratio {control_ratio:.1f} (>5)")
        assert ratio <= 3.0
        assert control_ratio > 5.0


def test_criterion_8_anomaly_detection(desk):
    with criterion(8, "level-shift anomaly detection via log-density", 300):
        spec = desk.spec
        fresh = simulate(spec, 1, 1800, seed=11)
        rng = np.random.default_rng(81)
        starts = rng.permutation(fresh.total_len - WINDOW_LEN + 1)[:1500]
        chunks = [sorted(int(s) for s in starts[k : k + 500])
                  for k in (0, 500, 1000)]
        calib = make_windows(fresh, chunks[0], WINDOW_LEN, CONTEXT_LEN)
        normal = make_windows(fresh, chunks[1], WINDOW_LEN, CONTEXT_LEN)
        anom = make_windows(fresh, chunks[2], WINDOW_LEN, CONTEXT_LEN)

        shifted = anom.future_values().copy()
        horizon = WINDOW_LEN - CONTEXT_LEN
        for r in range(shifted.shape[0]):
            t_star = rng.integers(5, horizon - 5)
            shifted[r, :, t_star:] += 2.5 * anom.context_std[r][:, None]

        calib_total = score_trajectory(desk.model, calib,
                                       calib.future_values()).total
        thr = float(np.percentile(calib_total, 1.0))
        normal_total = score_trajectory(desk.model, normal,
                                        normal.future_values()).total
        anom_total = score_trajectory(desk.model, anom, shifted).total
        tpr = float(np.mean(anom_total < thr))
        fpr = float(np.mean(normal_total < thr))
        print(f"  threshold {thr:.1f}: detection {tpr:.1%} (>=90%), "
              f"false positives {fpr:.1%} (<=5%) over 500 windows each")
        assert tpr >= 0.90
        assert fpr <= 0.05


def test_criterion_9_structural_invariants(desk):
    with criterion(9, "structural invariants suite", 120):
        spec, model = desk.spec, desk.model
        rng = np.random.default_rng(91)
        windows = make_windows(desk.test_series, [5, 40], WINDOW_LEN,
                               CONTEXT_LEN)
        tau, total = CONTEXT_LEN, WINDOW_LEN

        # clamp exactness under a partial random schedule
        entries = {(int(rng.integers(8)), int(rng.integers(tau, total))):
                   float(rng.normal()) for _ in range(25)}
        sched = InterventionSchedule(tau, total, entries)
        roll = forecast(model, windows, sched, n_samples=2, seed=5)
        for r in roll:
            for (i, t), v in entries.items():
                assert np.all(r.values[:, i, t - tau] == v)
                assert np.all(np.isnan(r.latents[:, i, t - tau]))

        # empty-schedule reduction: bitwise equal to no schedule at all
        a = forecast(model, windows, empty_schedule(tau, total),
                     n_samples=2, seed=6)
        b = forecast(model, windows, None, n_samples=2, seed=6)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.values, rb.values)

        # counterfactual with no action reproduces the factual window
        cf_cfg_model = model.copy()
        cf_cfg_model.flow = FlowConfig(steps=64)
        cf = counterfactual(cf_cfg_model, windows, windows,
                            empty_schedule(tau, total))
        assert np.max(np.abs(cf.values - windows.future_values())) <= 1e-4

        # no lookahead: clamping node j at t leaves non-descendants bitwise
        # unchanged before the influence can arrive (lag-1 paths)
        j, t_star = 1, tau + 4
        base = forecast(model, windows, None, n_samples=1, seed=7)[0]
        bump = InterventionSchedule(
            tau, total, {(j, t_star): float(base.values[0, j, 4] + 1.0)}
        )
        pert = forecast(model, windows, bump, n_samples=1, seed=7)[0]
        from collections import deque

        dist = {j: 0}
        queue = deque([j])
        while queue:
            node = queue.popleft()
            for child in spec.dag.children(node):
                if child not in dist:
                    dist[child] = dist[node] + 1
                    queue.append(child)
        for i in range(8):
            for t in range(tau, total):
                reachable = i in dist and (t - t_star) >= dist[i]
                if not reachable:
                    assert np.array_equal(base.values[:, i, t - tau],
                                          pert.values[:, i, t - tau])

        # determinism / byte identity
        s1 = simulate(spec, 2, 200, seed=123)
        s2 = simulate(spec, 2, 200, seed=123)
        assert np.array_equal(s1.values, s2.values)
        r1 = forecast(model, windows, None, n_samples=1, seed=9)[0]
        r2 = forecast(model, windows, None, n_samples=1, seed=9)[0]
        assert np.array_equal(r1.values, r2.values)

        # checkpoint round trip is byte-identical
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as tmp:
            p1 = Path(tmp) / "a.ckpt"
            p2 = Path(tmp) / "b.ckpt"
            save_checkpoint(p1, dict(model.parameters()), {"k": 1}, {"e": 0})
            arrays, cfg, meta = load_checkpoint(p1)
            save_checkpoint(p2, arrays, cfg, meta)
            assert p1.read_bytes() == p2.read_bytes()


def test_criterion_10_mmd_estimator_equivalence():
    with criterion(10, "MMD estimator vs brute-force double loop", 60):
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(2, 8))
            m = int(rng.integers(2, 8))
            d = int(rng.integers(1, 5))
            a = rng.normal(size=(n, d))
            b = rng.normal(size=(m, d))
            sigma = float(rng.uniform(0.3, 3.0))
            got = trajectory_mmd(a, b, MmdConfig(bandwidth=sigma))
            worst = max(worst, abs(got - brute_mmd_c6(a, b, sigma)))
        hand = trajectory_mmd(np.ones((2, 3)), np.ones((2, 3)),
                              MmdConfig(bandwidth=1.0))
        print(f"  worst |prod - brute| over 50 inputs: {worst:.2e}; "
              f"hand case (identical points) = {hand}")
        assert worst <= 1e-12
        assert hand == 0.0
