"""Autoregressive rollout over the DAG: observational and interventional
forecasting, counterfactual generation, and trajectory log-density scoring.

Within a time step every node is conditioned on states from the previous
step (lag-1 convention), so nodes are processed in topological order but
never read each other's same-step values; scheduled (node, time) entries
are clamped verbatim and bypass the flow entirely.

The per-node encode/decode pair is pluggable through a small codec
interface, which keeps the rollout bookkeeping testable against exact
mechanism flows independent of any learned model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import flow as flowmod
from .encoder import advance_all, init_from_context
from .errors import (
    FactualLengthMismatchError,
    ModelDagMismatchError,
    ScheduleOutOfWindowError,
    ShapeMismatchError,
)
from .graph import InterventionSchedule
from .model import ForecastModel
from .scm import SeriesBatch, safe_std


@dataclass
class StepInfo:
    """Everything a codec may condition on for one node at one step.

    Arrays are already restricted to the rows being generated. prev_raw
    holds every node's raw value at the previous step; t_abs is the
    absolute time of the step being generated (for oracle mechanisms with
    time-dependent drive).
    """

    t_rel: int
    t_abs: np.ndarray
    prev_raw: np.ndarray
    mean: np.ndarray
    std: np.ndarray


class NodeCodec(Protocol):
    def encode(self, node: int, x: np.ndarray, cond: np.ndarray,
               info: StepInfo) -> np.ndarray: ...

    def decode(self, node: int, z: np.ndarray, cond: np.ndarray,
               info: StepInfo) -> np.ndarray: ...


class CnfCodec:
    """Default codec: the model's per-node flows over standardized values."""

    def __init__(self, model: ForecastModel):
        self.model = model

    def encode(self, node, x, cond, info):
        xs = (x - info.mean[:, node]) / safe_std(info.std[:, node])
        return flowmod.encode(self.model.nets[node], self.model.flow, xs, cond)

    def decode(self, node, z, cond, info):
        xs = flowmod.decode(self.model.nets[node], self.model.flow, z, cond)
        return xs * safe_std(info.std[:, node]) + info.mean[:, node]


@dataclass
class Rollout:
    """One sampled trajectory batch: raw values [B, K, horizon].

    latents holds the base sample consumed at each (item, node, step), NaN
    where the schedule clamped the value instead.
    """

    values: np.ndarray
    latents: np.ndarray
    sample_index: int
    schedules: list[InterventionSchedule] = field(default_factory=list)


@dataclass
class CfRollout:
    """Counterfactual trajectories with the abducted factual latents."""

    values: np.ndarray
    latents: np.ndarray
    schedules: list[InterventionSchedule] = field(default_factory=list)


@dataclass
class TrajectoryScore:
    """Log-density of a provided future under the model (standardized units)."""

    per_step: np.ndarray  # [B, K, horizon]
    per_node: np.ndarray  # [B, K]
    total: np.ndarray  # [B]
    latents: np.ndarray  # [B, K, horizon]


def _check_model_context(model: ForecastModel, context: SeriesBatch) -> None:
    if context.node_count != model.dag.node_count:
        raise ModelDagMismatchError(
            f"context has {context.node_count} nodes, model expects "
            f"{model.dag.node_count}"
        )


def _normalize_schedules(schedule, batch: int, tau: int, horizon_hint=None):
    """Return (list of schedules or None, horizon)."""
    if schedule is None:
        if horizon_hint is None or horizon_hint < 1:
            raise ScheduleOutOfWindowError("horizon not determined")
        return None, horizon_hint
    schedules = ([schedule] * batch if isinstance(schedule, InterventionSchedule)
                 else list(schedule))
    if len(schedules) != batch:
        raise ScheduleOutOfWindowError(
            f"{len(schedules)} schedules for batch of {batch}"
        )
    total = schedules[0].total_len
    for s in schedules:
        if s.context_len != tau or s.total_len != total:
            raise ScheduleOutOfWindowError("schedule window does not match context")
    if horizon_hint is not None and horizon_hint != total - tau:
        raise ScheduleOutOfWindowError("horizon conflicts with schedule window")
    return schedules, total - tau


def _clamp_arrays(schedules, batch, k, horizon):
    mask = np.zeros((batch, k, horizon), dtype=bool)
    vals = np.zeros((batch, k, horizon))
    if schedules is not None:
        for b, s in enumerate(schedules):
            m, v = s.clamp_arrays(k)
            mask[b], vals[b] = m, v
    return mask, vals


def _conds(model: ForecastModel, states: np.ndarray) -> list[np.ndarray]:
    """Per-node conditioning vectors [R, 2H] from the state array [R, K, H]."""
    out = []
    for i in range(model.dag.node_count):
        own = states[:, i]
        parents = model.dag.parents[i]
        pool = states[:, list(parents)].mean(axis=1) if parents \
            else np.zeros_like(own)
        out.append(np.concatenate([own, pool], axis=1))
    return out


def _tile(arr: np.ndarray, n: int) -> np.ndarray:
    return np.concatenate([arr] * n, axis=0) if n > 1 else arr.copy()


def forecast(model: ForecastModel, context: SeriesBatch, schedule=None,
             n_samples: int = 1, seed: int = 0, horizon: int | None = None,
             codec: NodeCodec | None = None,
             latents: np.ndarray | None = None) -> list[Rollout]:
    """Observational/interventional rollout (one call, schedule optional).

    Per sample: recurrent states are initialized from the context; at each
    step nodes are visited in topological order, scheduled entries clamped,
    all others decoded from a fresh standard-normal latent; states then
    advance on the step's values. An empty schedule is plain observational
    forecasting. latents (shape [n_samples, B, K, horizon], or [B, K,
    horizon] when n_samples == 1) overrides the base draws.
    """
    _check_model_context(model, context)
    tau = context.context_len
    b, k = context.batch_size, context.node_count
    hint = horizon if horizon is not None else (context.horizon or None)
    schedules, horizon = _normalize_schedules(schedule, b, tau, hint)
    mask, clamp_vals = _clamp_arrays(schedules, b, k, horizon)
    codec = codec if codec is not None else CnfCodec(model)

    if latents is None:
        blocks = [
            np.random.default_rng(np.random.SeedSequence((int(seed), 0xF0, n)))
            .standard_normal((b, k, horizon))
            for n in range(n_samples)
        ]
        z_all = np.stack(blocks)
    else:
        z_all = np.asarray(latents, dtype=float)
        if z_all.ndim == 3 and n_samples == 1:
            z_all = z_all[None]
        if z_all.shape != (n_samples, b, k, horizon):
            raise ShapeMismatchError(
                f"latents {z_all.shape} != {(n_samples, b, k, horizon)}"
            )

    r = n_samples * b
    states = _tile(init_from_context(model.rnn, model.dag, context), n_samples)
    mean = _tile(context.context_mean, n_samples)
    std = _tile(context.context_std, n_samples)
    start = _tile(context.start_times, n_samples)
    prev_raw = _tile(context.values[:, :, tau - 1], n_samples)
    mask_r = _tile(mask, n_samples)
    clamp_r = _tile(clamp_vals, n_samples)
    z_r = z_all.reshape(r, k, horizon)

    values = np.empty((r, k, horizon))
    latents_out = np.full((r, k, horizon), np.nan)
    for t in range(horizon):
        conds = _conds(model, states)
        new_raw = np.empty((r, k))
        t_abs = start + tau + t
        for i in model.dag.topo_order:
            clamped = mask_r[:, i, t]
            if clamped.any():
                new_raw[clamped, i] = clamp_r[clamped, i, t]
            open_rows = ~clamped
            if open_rows.any():
                info = StepInfo(
                    t_rel=tau + t,
                    t_abs=t_abs[open_rows],
                    prev_raw=prev_raw[open_rows],
                    mean=mean[open_rows],
                    std=std[open_rows],
                )
                z_i = z_r[open_rows, i, t]
                new_raw[open_rows, i] = codec.decode(
                    i, z_i, conds[i][open_rows], info
                )
                latents_out[open_rows, i, t] = z_i
        values[:, :, t] = new_raw
        new_std = (new_raw - mean) / safe_std(std)
        states = advance_all(model.rnn, model.dag, states, new_std)
        prev_raw = new_raw

    values = values.reshape(n_samples, b, k, horizon)
    latents_out = latents_out.reshape(n_samples, b, k, horizon)
    sched_list = schedules if schedules is not None else []
    return [
        Rollout(values[n], latents_out[n], n, list(sched_list))
        for n in range(n_samples)
    ]


def counterfactual(model: ForecastModel, context: SeriesBatch,
                   factual: SeriesBatch, schedule,
                   codec: NodeCodec | None = None) -> CfRollout:
    """Abduction-action-prediction over the forecast window.

    Factual states follow the observed trajectory and are used only to
    encode factual values into latents; counterfactual states start from
    the same context and advance on the generated values. Scheduled entries
    are clamped and consume no latent.
    """
    _check_model_context(model, context)
    tau = context.context_len
    b, k = context.batch_size, context.node_count
    schedules, horizon = _normalize_schedules(schedule, b, tau, None)
    total = tau + horizon
    if factual.batch_size != b or factual.total_len < total:
        raise FactualLengthMismatchError(
            f"factual [{factual.batch_size},{factual.total_len}] does not "
            f"cover window [{b},{total}]"
        )
    mask, clamp_vals = _clamp_arrays(schedules, b, k, horizon)
    codec = codec if codec is not None else CnfCodec(model)

    mean, std = context.context_mean, context.context_std
    states_f = init_from_context(model.rnn, model.dag, context)
    states_cf = states_f.copy()
    prev_f = factual.values[:, :, tau - 1].copy()
    prev_cf = prev_f.copy()

    values = np.empty((b, k, horizon))
    latents = np.full((b, k, horizon), np.nan)
    for t in range(horizon):
        conds_f = _conds(model, states_f)
        conds_cf = _conds(model, states_cf)
        t_abs = context.start_times + tau + t
        new_raw = np.empty((b, k))
        for i in model.dag.topo_order:
            clamped = mask[:, i, t]
            if clamped.any():
                new_raw[clamped, i] = clamp_vals[clamped, i, t]
            open_rows = ~clamped
            if open_rows.any():
                info_f = StepInfo(tau + t, t_abs[open_rows], prev_f[open_rows],
                                  mean[open_rows], std[open_rows])
                info_cf = StepInfo(tau + t, t_abs[open_rows], prev_cf[open_rows],
                                   mean[open_rows], std[open_rows])
                x_f = factual.values[open_rows, i, tau + t]
                z_f = codec.encode(i, x_f, conds_f[i][open_rows], info_f)
                new_raw[open_rows, i] = codec.decode(
                    i, z_f, conds_cf[i][open_rows], info_cf
                )
                latents[open_rows, i, t] = z_f
        values[:, :, t] = new_raw
        fact_t = factual.values[:, :, tau + t]
        states_f = advance_all(model.rnn, model.dag, states_f,
                               (fact_t - mean) / safe_std(std))
        states_cf = advance_all(model.rnn, model.dag, states_cf,
                                (values[:, :, t] - mean) / safe_std(std))
        prev_f = fact_t.copy()
        prev_cf = values[:, :, t].copy()
    return CfRollout(values, latents, list(schedules))


def score_trajectory(model: ForecastModel, context: SeriesBatch,
                     future) -> TrajectoryScore:
    """Log-density of a given future under the model: per node and step,
    base log-density of the latent plus the integrated divergence, summed.

    States advance along the provided future values, mirroring the factual
    side of counterfactual generation. future is [B, K, horizon] raw values
    or a SeriesBatch whose forecast window is used.
    """
    _check_model_context(model, context)
    tau = context.context_len
    if isinstance(future, SeriesBatch):
        future = future.future_values()
    future = np.asarray(future, dtype=float)
    b, k = context.batch_size, context.node_count
    if future.ndim != 3 or future.shape[:2] != (b, k):
        raise ShapeMismatchError(f"future shape {future.shape}")
    horizon = future.shape[2]

    mean, std = context.context_mean, context.context_std
    xs = (future - mean[..., None]) / safe_std(std)[..., None]
    states = init_from_context(model.rnn, model.dag, context)
    per_step = np.empty((b, k, horizon))
    latents = np.empty((b, k, horizon))
    for t in range(horizon):
        conds = _conds(model, states)
        for i in model.dag.topo_order:
            logp, z = flowmod.log_density(
                model.nets[i], model.flow, xs[:, i, t], conds[i]
            )
            per_step[:, i, t] = logp
            latents[:, i, t] = z
        states = advance_all(model.rnn, model.dag, states, xs[:, :, t])
    per_node = per_step.sum(axis=2)
    return TrajectoryScore(per_step, per_node, per_node.sum(axis=1), latents)


def encode_latents(model: ForecastModel, windows: SeriesBatch):
    """Per-node (latent, conditioning) pairs from teacher-forced encoding.

    Encodes every forecast-window value of every window under its factual
    state, pooling over (window, step). Returns a list with one
    (z [n], cond [n, 2H]) pair per node, the raw material for the latent
    independence diagnostic.
    """
    _check_model_context(model, windows)
    tau = windows.context_len
    b, k = windows.batch_size, windows.node_count
    horizon = windows.horizon
    mean, std = windows.context_mean, windows.context_std
    xs = (windows.future_values() - mean[..., None]) / safe_std(std)[..., None]
    states = init_from_context(model.rnn, model.dag, windows)
    zs = np.empty((b, k, horizon))
    conds_out = np.empty((b, k, horizon, 2 * model.hidden_dim))
    for t in range(horizon):
        conds = _conds(model, states)
        for i in model.dag.topo_order:
            zs[:, i, t] = flowmod.encode(
                model.nets[i], model.flow, xs[:, i, t], conds[i]
            )
            conds_out[:, i, t] = conds[i]
        states = advance_all(model.rnn, model.dag, states, xs[:, :, t])
    return [
        (zs[:, i].reshape(-1), conds_out[:, i].reshape(-1, 2 * model.hidden_dim))
        for i in range(k)
    ]


def anomaly_threshold(scores: np.ndarray, percentile: float = 1.0) -> float:
    """Score threshold at the given lower percentile of normal windows."""
    return float(np.percentile(np.asarray(scores, dtype=float), percentile))


def prediction_bands(rollouts: list[Rollout], levels=(0.5, 0.9)):
    """Empirical central bands across rollouts: level -> (lo, hi) arrays."""
    stack = np.stack([r.values for r in rollouts])
    out = {}
    for level in levels:
        half = 100.0 * (1.0 - level) / 2.0
        out[level] = (
            np.percentile(stack, half, axis=0),
            np.percentile(stack, 100.0 - half, axis=0),
        )
    return out
