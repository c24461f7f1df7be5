"""Desk-scale evaluation protocol.

Each run draws a fresh batch of test windows; for every window the model
and the ground-truth simulator produce matched realizations under three
regimes: observational (empty schedule), interventional (root values
shifted forward from the context) and counterfactual (same schedule, with
the observed future as the factual). RMSE pairs realization k of the model
with realization k of the oracle; MMD pools all realizations of a run.

Interventional and counterfactual metrics cover non-intervened nodes only,
since clamped nodes are identical on both sides by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError
from .forecaster import counterfactual, forecast
from .graph import empty_schedule
from .metrics import MmdConfig, rmse, trajectory_mmd
from .model import ForecastModel
from .scm import (
    ScmSpec,
    SeriesBatch,
    build_intervention_by_shift,
    make_windows,
    simulate_counterfactual,
    simulate_interventional,
    split_window_starts,
)

REGIMES = ("observational", "interventional", "counterfactual")


@dataclass
class EvalSettings:
    batch: int = 32
    realizations: int = 20
    runs: int = 10
    intervention_offset: int = 30
    seed: int = 0


@dataclass
class RegimeResult:
    rmse_runs: list[float] = field(default_factory=list)
    mmd_runs: list[float] = field(default_factory=list)

    def summary(self):
        out = {
            "rmse_mean": float(np.mean(self.rmse_runs)),
            "rmse_std": float(np.std(self.rmse_runs)),
        }
        if self.mmd_runs:
            out["mmd_mean"] = float(np.mean(self.mmd_runs))
            out["mmd_std"] = float(np.std(self.mmd_runs))
        return out


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts))
               .generate_state(1)[0])


def run_windows(test_series: SeriesBatch, window_len: int, context_len: int,
                settings: EvalSettings) -> list[SeriesBatch]:
    """One window batch per run, drawn without replacement when possible."""
    length = test_series.total_len
    starts = list(range(0, length - window_len + 1))
    rng = np.random.default_rng(
        np.random.SeedSequence((settings.seed, 0xE7A1))
    )
    need = settings.runs * settings.batch
    if len(starts) >= need:
        picks = rng.permutation(len(starts))[:need]
        chosen = [starts[p] for p in picks]
    else:
        chosen = [starts[p] for p in rng.integers(0, len(starts), size=need)]
    out = []
    for r in range(settings.runs):
        block = chosen[r * settings.batch : (r + 1) * settings.batch]
        out.append(make_windows(test_series, block, window_len, context_len))
    return out


def _standardized_trajectories(values: np.ndarray, stats, nodes) -> np.ndarray:
    """[N, B, K, H] -> [N*B, len(nodes)*H] flattened standardized rows."""
    mean, std = stats
    xs = (values - mean[None, :, :, None]) / std[None, :, :, None]
    xs = xs[:, :, nodes, :]
    n, b = xs.shape[0], xs.shape[1]
    return xs.reshape(n * b, -1)


def aggregate_regime(pred: np.ndarray, oracle: np.ndarray, stats, nodes,
                     with_mmd: bool) -> tuple[float, float | None]:
    """Paired RMSE (mean over realizations) and pooled trajectory MMD for
    one run. pred/oracle are [N, B, K, H] in raw units."""
    if pred.shape != oracle.shape:
        raise AlignmentError(f"pred {pred.shape} vs oracle {oracle.shape}")
    vals = [rmse(pred[n], oracle[n], stats, nodes=nodes)
            for n in range(pred.shape[0])]
    run_rmse = float(np.mean(vals))
    run_mmd = None
    if with_mmd:
        a = _standardized_trajectories(pred, stats, nodes)
        b = _standardized_trajectories(oracle, stats, nodes)
        run_mmd = trajectory_mmd(a, b, MmdConfig())
    return run_rmse, run_mmd


def model_rollouts(model: ForecastModel, windows: SeriesBatch, schedules,
                   n_samples: int, seed: int) -> np.ndarray:
    rollouts = forecast(model, windows, schedules, n_samples=n_samples,
                        seed=seed)
    return np.stack([r.values for r in rollouts])


def oracle_rollouts(spec: ScmSpec, windows: SeriesBatch, schedules,
                    n_samples: int, seed: int) -> np.ndarray:
    outs = []
    for n in range(n_samples):
        sim = simulate_interventional(
            spec, windows, schedules, noise_seed=_derive_seed(seed, n)
        )
        outs.append(sim.future_values())
    return np.stack(outs)


def run_protocol(model: ForecastModel, spec: ScmSpec,
                 test_series: SeriesBatch, window_len: int, context_len: int,
                 settings: EvalSettings,
                 emit=None) -> dict[str, RegimeResult]:
    """Full three-regime protocol; emit(regime, run, pred, oracle, windows)
    is an optional hook for persisting the generated trajectories."""
    batches = run_windows(test_series, window_len, context_len, settings)
    roots = list(spec.roots)
    non_roots = [i for i in range(spec.dag.node_count) if i not in spec.roots]
    results = {regime: RegimeResult() for regime in REGIMES}
    for r, windows in enumerate(batches):
        stats = (windows.context_mean, windows.context_std)
        schedules = [
            build_intervention_by_shift(windows, roots,
                                        settings.intervention_offset, item=b)
            for b in range(windows.batch_size)
        ]

        pred = model_rollouts(model, windows, None, settings.realizations,
                              _derive_seed(settings.seed, r, 1))
        oracle = oracle_rollouts(
            spec, windows,
            empty_schedule(context_len, windows.total_len),
            settings.realizations, _derive_seed(settings.seed, r, 2),
        )
        run_rmse, run_mmd = aggregate_regime(pred, oracle, stats,
                                             list(range(spec.dag.node_count)),
                                             with_mmd=True)
        results["observational"].rmse_runs.append(run_rmse)
        results["observational"].mmd_runs.append(run_mmd)
        if emit:
            emit("observational", r, pred, oracle, windows)

        pred = model_rollouts(model, windows, schedules,
                              settings.realizations,
                              _derive_seed(settings.seed, r, 3))
        oracle = oracle_rollouts(spec, windows, schedules,
                                 settings.realizations,
                                 _derive_seed(settings.seed, r, 4))
        run_rmse, run_mmd = aggregate_regime(pred, oracle, stats, non_roots,
                                             with_mmd=True)
        results["interventional"].rmse_runs.append(run_rmse)
        results["interventional"].mmd_runs.append(run_mmd)
        if emit:
            emit("interventional", r, pred, oracle, windows)

        cf = counterfactual(model, windows, windows, schedules)
        cf_oracle = simulate_counterfactual(spec, windows, windows, schedules)
        pred = cf.values[None]
        oracle = cf_oracle.future_values()[None]
        run_rmse, _ = aggregate_regime(pred, oracle, stats, non_roots,
                                       with_mmd=False)
        results["counterfactual"].rmse_runs.append(run_rmse)
        if emit:
            emit("counterfactual", r, pred, oracle, windows)
    return results



def training_windows(series: SeriesBatch, window_len: int, context_len: int,
                     train_frac: float) -> SeriesBatch:
    starts, _ = split_window_starts(series.total_len, window_len, train_frac)
    return make_windows(series, starts, window_len, context_len)
