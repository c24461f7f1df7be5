"""Synthetic structural causal models over the four benchmark graph families.

Serves two roles: generating datasets for training, and acting as the
ground-truth oracle for interventional and counterfactual trajectories.
Four families (tree, diamond, fc_layer, chain) each come in an additive and
a nonlinear non-additive (nlna) mechanism. Root nodes follow a sinusoidal
AR process; every other node is driven by its own past, its parents' past
(lag 1) and fresh standard-normal noise.

All simulators are pure functions of (spec, seed): identical inputs give
bitwise-identical output.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AbductionUnsolvableError,
    FactualLengthMismatchError,
    NumericOverflowError,
    OffsetTooSmallError,
    ScheduleOutOfWindowError,
    ShapeMismatchError,
)
from .graph import CausalDag, InterventionSchedule, build_dag

OVERFLOW_GUARD = 1.0e6

DEFAULT_CONTEXT_LEN = 90
DEFAULT_WINDOW_LEN = 120

SELF_COEFF_SET = (0.3, 0.5, 0.7)
PARENT_COEFF_SET = (-0.4, -0.2, 0.2, 0.4)


class Family(enum.Enum):
    TREE = "tree"
    DIAMOND = "diamond"
    FC_LAYER = "fc_layer"
    CHAIN = "chain"


class Mechanism(enum.Enum):
    ADDITIVE = "additive"
    NLNA = "nlna"


def tree_dag() -> CausalDag:
    """8-node rooted tree: 0 -> {1,2}, 1 -> {3,4}, 2 -> {5,6}, 3 -> 7."""
    return build_dag(8, [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6), (3, 7)])


def diamond_dag() -> CausalDag:
    """10 nodes: three stacked diamond motifs sharing their junctions."""
    edges = [
        (0, 1), (0, 2), (1, 3), (2, 3),
        (3, 4), (3, 5), (4, 6), (5, 6),
        (6, 7), (6, 8), (7, 9), (8, 9),
    ]
    return build_dag(10, edges)


def fc_layer_dag() -> CausalDag:
    """10 nodes in fully connected layers of sizes 3, 3, 3, 1."""
    layers = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9]]
    edges = [
        (p, c)
        for a, b in zip(layers[:-1], layers[1:])
        for p in a
        for c in b
    ]
    return build_dag(10, edges)


def chain_dag(node_count: int = 50) -> CausalDag:
    """Chain 0 -> 1 -> ... with skip connections two steps ahead."""
    edges = [(i, i + 1) for i in range(node_count - 1)]
    edges += [(i, i + 2) for i in range(node_count - 2)]
    return build_dag(node_count, edges)


_FAMILY_DAGS = {
    Family.TREE: tree_dag,
    Family.DIAMOND: diamond_dag,
    Family.FC_LAYER: fc_layer_dag,
    Family.CHAIN: chain_dag,
}


def family_dag(family: Family) -> CausalDag:
    return _FAMILY_DAGS[family]()


@dataclass
class ScmSpec:
    """Fully specified synthetic SCM: graph, mechanism family, coefficients.

    self_coeffs[i] multiplies node i's own lag-1 value; parent_coeffs maps
    each edge (p, c) to its weight. root_phases holds one phase per node
    but only root nodes (no parents) ever read theirs.
    """

    dag: CausalDag
    family: Family
    mechanism: Mechanism
    self_coeffs: np.ndarray
    parent_coeffs: dict[tuple[int, int], float]
    root_amp: float = 4.0
    root_period: float = 20.0
    root_phases: np.ndarray | None = None
    _parent_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = self.dag.node_count
        self.self_coeffs = np.asarray(self.self_coeffs, dtype=float)
        if self.self_coeffs.shape != (k,):
            raise ShapeMismatchError("self_coeffs must have one entry per node")
        if self.root_phases is None:
            self.root_phases = np.zeros(k)
        self.root_phases = np.asarray(self.root_phases, dtype=float)
        if not np.all(np.isfinite(self.self_coeffs)):
            raise ValueError("non-finite self coefficient")
        w = np.zeros((k, k))
        for (p, c), beta in self.parent_coeffs.items():
            if p not in self.dag.parents[c]:
                raise ValueError(f"coefficient for non-edge ({p}, {c})")
            w[c, p] = beta
        for c in range(k):
            for p in self.dag.parents[c]:
                if w[c, p] == 0.0 and (p, c) not in self.parent_coeffs:
                    raise ValueError(f"missing coefficient for edge ({p}, {c})")
        self._parent_matrix = w

    @property
    def roots(self) -> tuple[int, ...]:
        return self.dag.roots

    def parent_sums(self, prev: np.ndarray) -> np.ndarray:
        """Weighted lag-1 parent sums for a [B, K] slice of previous values."""
        return prev @ self._parent_matrix.T


def draw_spec(family: Family, mechanism: Mechanism, seed: int,
              dag: CausalDag | None = None, root_amp: float = 4.0,
              root_period: float = 20.0) -> ScmSpec:
    """Draw coefficients for one trial.

    Self coefficients come from {0.3, 0.5, 0.7} and edge coefficients from
    {+-0.2, +-0.4}, uniformly per trial; root phases are uniform on
    [0, 2*pi). Self coefficients below 1 keep the lag-1 linear system
    stable (its eigenvalues are exactly the self coefficients), and the
    simulator's overflow guard backstops the nonlinear families.
    """
    dag = dag if dag is not None else family_dag(family)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0EF)))
    self_coeffs = rng.choice(SELF_COEFF_SET, size=dag.node_count)
    parent_coeffs = {
        (p, c): float(rng.choice(PARENT_COEFF_SET)) for p, c in dag.edges
    }
    phases = rng.uniform(0.0, 2.0 * math.pi, size=dag.node_count)
    return ScmSpec(
        dag=dag,
        family=family,
        mechanism=mechanism,
        self_coeffs=self_coeffs,
        parent_coeffs=parent_coeffs,
        root_amp=root_amp,
        root_period=root_period,
        root_phases=phases,
    )


# ---------------------------------------------------------------------------
# series container


@dataclass
class SeriesBatch:
    """Batch of multivariate windows with a context/forecast split.

    values has shape [batch, node, time]; the first context_len steps form
    the conditioning window. Per (batch, node) mean/std over the context are
    computed once at construction and are recomputable from values exactly.
    start_times records each window's absolute offset in its source series,
    which the SCM oracles need to keep the root sinusoid phase aligned.
    """

    values: np.ndarray
    context_len: int
    start_times: np.ndarray | None = None
    context_mean: np.ndarray = field(init=False, repr=False)
    context_std: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeMismatchError(f"values must be [B,K,T], got {self.values.shape}")
        if not 0 < self.context_len < self.values.shape[2]:
            raise ShapeMismatchError(
                f"context_len {self.context_len} outside (0, {self.values.shape[2]})"
            )
        if self.start_times is None:
            self.start_times = np.zeros(self.values.shape[0], dtype=np.int64)
        self.start_times = np.asarray(self.start_times, dtype=np.int64)
        if self.start_times.shape != (self.values.shape[0],):
            raise ShapeMismatchError("start_times must have one entry per batch item")
        ctx = self.values[:, :, : self.context_len]
        self.context_mean = ctx.mean(axis=2)
        self.context_std = ctx.std(axis=2)

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def node_count(self) -> int:
        return self.values.shape[1]

    @property
    def total_len(self) -> int:
        return self.values.shape[2]

    @property
    def horizon(self) -> int:
        return self.total_len - self.context_len

    def context_values(self) -> np.ndarray:
        return self.values[:, :, : self.context_len]

    def future_values(self) -> np.ndarray:
        return self.values[:, :, self.context_len :]

    def item(self, b: int) -> "SeriesBatch":
        return SeriesBatch(
            self.values[b : b + 1].copy(),
            self.context_len,
            self.start_times[b : b + 1].copy(),
        )


def safe_std(std: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Context std with degenerate (constant) windows mapped to 1."""
    return np.where(std > floor, std, 1.0)


def standardize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """(values - mean) / std with mean/std per (batch, node), broadcast over time."""
    return (values - mean[..., None]) / safe_std(std)[..., None]


def destandardize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * safe_std(std)[..., None] + mean[..., None]


# ---------------------------------------------------------------------------
# mechanism step / abduction, vectorized over [B, K] slices

_ABDUCT_TOL = 1e-9


def _root_drive(spec: ScmSpec, t_abs: np.ndarray) -> np.ndarray:
    """Sinusoidal forcing per node for absolute times t_abs [B]: [B, K]."""
    angle = (2.0 * math.pi / spec.root_period) * t_abs[:, None] + spec.root_phases[None, :]
    return spec.root_amp * np.sin(angle)


def _mech_step(spec: ScmSpec, prev: np.ndarray, parent_sum: np.ndarray,
               noise: np.ndarray, t_abs: np.ndarray) -> np.ndarray:
    """One simulation step for all nodes: values at t from values at t-1.

    prev, parent_sum, noise are [B, K]; root columns are overwritten with
    the sinusoidal AR process afterwards.
    """
    beta = spec.self_coeffs[None, :]
    if spec.mechanism is Mechanism.ADDITIVE:
        scale = 0.25 if spec.family is Family.TREE else 1.0
        out = beta * prev + parent_sum + noise * scale
    else:
        if spec.family is Family.TREE:
            out = beta * prev * (np.abs(noise) + 0.5) + parent_sum
        elif spec.family is Family.DIAMOND:
            out = np.exp(beta * prev) / (2.0 + np.abs(noise)) + parent_sum
        else:  # fc_layer and chain share one nlna form
            out = np.sqrt(0.5 * np.abs(parent_sum) + np.abs(noise)) + beta * prev
    roots = list(spec.roots)
    drive = _root_drive(spec, t_abs)
    out[:, roots] = beta[:, roots] * prev[:, roots] + drive[:, roots] + noise[:, roots]
    return out


def _mech_abduct(spec: ScmSpec, x: np.ndarray, prev: np.ndarray,
                 parent_sum: np.ndarray, t_abs: np.ndarray) -> np.ndarray:
    """Recover exogenous noise so that _mech_step reproduces x exactly.

    Additive mechanisms invert directly. The nlna families depend on the
    noise only through its magnitude, so the recovered value is |U|; the
    sign is unidentifiable but also irrelevant to any counterfactual.
    """
    beta = spec.self_coeffs[None, :]
    roots = list(spec.roots)
    children = [i for i in range(spec.dag.node_count) if i not in spec.roots]
    if spec.mechanism is Mechanism.ADDITIVE:
        scale = 4.0 if spec.family is Family.TREE else 1.0
        u = (x - beta * prev - parent_sum) * scale
    else:
        # domain checks apply to non-root columns only; roots follow their
        # own process and are overwritten below
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if spec.family is Family.TREE:
                denom = beta * prev
                if np.any(np.abs(denom[:, children]) < _ABDUCT_TOL):
                    raise AbductionUnsolvableError(
                        "tree nlna: zero self-term, |U| not recoverable"
                    )
                u = (x - parent_sum) / denom - 0.5
            elif spec.family is Family.DIAMOND:
                gap = x - parent_sum
                if np.any(gap[:, children] <= _ABDUCT_TOL):
                    raise AbductionUnsolvableError(
                        "diamond nlna: nonpositive residual, |U| not recoverable"
                    )
                u = np.exp(beta * prev) / gap - 2.0
            else:
                gap = x - beta * prev
                if np.any(gap[:, children] < -_ABDUCT_TOL):
                    raise AbductionUnsolvableError(
                        "layer/chain nlna: negative sqrt argument"
                    )
                u = np.maximum(gap, 0.0) ** 2 - 0.5 * np.abs(parent_sum)
        if np.any(u[:, children] < -_ABDUCT_TOL):
            raise AbductionUnsolvableError("recovered |U| is negative")
        u[:, children] = np.maximum(u[:, children], 0.0)
    drive = _root_drive(spec, t_abs)
    u[:, roots] = x[:, roots] - beta[:, roots] * prev[:, roots] - drive[:, roots]
    return u


def _draw_noises(seed: int, batch: int, node_count: int, steps: int) -> np.ndarray:
    """Per-item substreams derived from the seed; [B, K, steps]."""
    root = np.random.SeedSequence(int(seed))
    streams = root.spawn(batch)
    out = np.empty((batch, node_count, steps))
    for b, ss in enumerate(streams):
        out[b] = np.random.default_rng(ss).standard_normal((node_count, steps))
    return out


def _propagate(spec: ScmSpec, values: np.ndarray, t_start: int,
               noises: np.ndarray, start_times: np.ndarray,
               clamp_mask: np.ndarray | None = None,
               clamp_values: np.ndarray | None = None) -> None:
    """Roll the mechanism forward in place from t_start.

    values is [B, K, T]; noises is [B, K, T] aligned with absolute window
    positions; clamp arrays (if given) are [B, K, T] and force scheduled
    entries verbatim. History before t=0 is taken as zero.
    """
    batch, k, total = values.shape
    zeros = np.zeros((batch, k))
    for t in range(t_start, total):
        prev = values[:, :, t - 1] if t > 0 else zeros
        ps = spec.parent_sums(prev)
        t_abs = start_times + t
        step = _mech_step(spec, prev, ps, noises[:, :, t], t_abs)
        if clamp_mask is not None:
            step = np.where(clamp_mask[:, :, t], clamp_values[:, :, t], step)
        if np.max(np.abs(step)) > OVERFLOW_GUARD:
            raise NumericOverflowError(
                f"series exceeded {OVERFLOW_GUARD:g} at t={t}; coefficients unstable"
            )
        values[:, :, t] = step


def simulate(spec: ScmSpec, batch: int, total_len: int, seed: int,
             context_len: int | None = None, start_time: int = 0,
             return_noise: bool = False):
    """Simulate fresh series from zero history.

    Returns a SeriesBatch (and the noise array when return_noise is set).
    context_len defaults to the standard window protocol, capped below the
    series length.
    """
    if total_len < 2:
        raise ShapeMismatchError("total_len must be at least 2")
    if context_len is None:
        context_len = min(DEFAULT_CONTEXT_LEN, total_len - 1)
    k = spec.dag.node_count
    noises = _draw_noises(seed, batch, k, total_len)
    values = np.zeros((batch, k, total_len))
    start_times = np.full(batch, int(start_time), dtype=np.int64)
    _propagate(spec, values, 0, noises, start_times)
    out = SeriesBatch(values, context_len, start_times)
    return (out, noises) if return_noise else out


def _normalize_schedules(schedule, batch: int, context_len: int):
    """Accept one schedule (shared) or one per batch item; return [B,K,T] arrays."""
    if isinstance(schedule, InterventionSchedule):
        schedules = [schedule] * batch
    else:
        schedules = list(schedule)
        if len(schedules) != batch:
            raise ScheduleOutOfWindowError(
                f"{len(schedules)} schedules for batch of {batch}"
            )
    total = schedules[0].total_len
    for s in schedules:
        if s.context_len != context_len or s.total_len != total:
            raise ScheduleOutOfWindowError("schedule window does not match context")
    return schedules, total


def continue_observational(spec: ScmSpec, context: SeriesBatch, noise_seed: int,
                           total_len: int | None = None,
                           noises: np.ndarray | None = None) -> SeriesBatch:
    """Roll the true mechanism forward from the context with fresh noise."""
    tau = context.context_len
    total = total_len if total_len is not None else context.total_len
    if total <= tau:
        raise ShapeMismatchError("nothing to simulate beyond the context")
    batch, k = context.batch_size, context.node_count
    values = np.zeros((batch, k, total))
    values[:, :, :tau] = context.values[:, :, :tau]
    full_noise = np.zeros((batch, k, total))
    drawn = noises if noises is not None else _draw_noises(noise_seed, batch, k, total - tau)
    if drawn.shape != (batch, k, total - tau):
        raise ShapeMismatchError("noises must cover exactly the forecast window")
    full_noise[:, :, tau:] = drawn
    _propagate(spec, values, tau, full_noise, context.start_times)
    return SeriesBatch(values, tau, context.start_times.copy())


def simulate_interventional(spec: ScmSpec, context: SeriesBatch, schedule,
                            noise_seed: int,
                            noises: np.ndarray | None = None) -> SeriesBatch:
    """Ground-truth interventional rollout: clamp scheduled entries, sample
    fresh exogenous noise everywhere else, propagate the true mechanism.

    schedule may be a single InterventionSchedule applied to every batch
    item or a sequence with one schedule per item.
    """
    tau = context.context_len
    schedules, total = _normalize_schedules(schedule, context.batch_size, tau)
    batch, k = context.batch_size, context.node_count
    mask = np.zeros((batch, k, total), dtype=bool)
    vals = np.zeros((batch, k, total))
    for b, s in enumerate(schedules):
        m, v = s.clamp_arrays(k)
        mask[b, :, tau:] = m
        vals[b, :, tau:] = v
    values = np.zeros((batch, k, total))
    values[:, :, :tau] = context.values[:, :, :tau]
    full_noise = np.zeros((batch, k, total))
    drawn = noises if noises is not None else _draw_noises(noise_seed, batch, k, total - tau)
    if drawn.shape != (batch, k, total - tau):
        raise ShapeMismatchError("noises must cover exactly the forecast window")
    full_noise[:, :, tau:] = drawn
    _propagate(spec, values, tau, full_noise, context.start_times, mask, vals)
    return SeriesBatch(values, tau, context.start_times.copy())


def abduct_noises(spec: ScmSpec, factual: SeriesBatch,
                  total_len: int | None = None) -> np.ndarray:
    """Recover exogenous noise over the forecast window of a factual batch."""
    tau = factual.context_len
    total = total_len if total_len is not None else factual.total_len
    batch, k = factual.batch_size, factual.node_count
    out = np.zeros((batch, k, total - tau))
    for t in range(tau, total):
        prev = factual.values[:, :, t - 1]
        ps = spec.parent_sums(prev)
        t_abs = factual.start_times + t
        out[:, :, t - tau] = _mech_abduct(
            spec, factual.values[:, :, t], prev, ps, t_abs
        )
    return out


def simulate_counterfactual(spec: ScmSpec, context: SeriesBatch,
                            factual: SeriesBatch, schedule) -> SeriesBatch:
    """Ground-truth counterfactual: abduct noise from the factual trajectory,
    clamp scheduled entries, re-propagate with the recovered noise."""
    tau = context.context_len
    schedules, total = _normalize_schedules(schedule, context.batch_size, tau)
    if factual.total_len < total or factual.batch_size != context.batch_size:
        raise FactualLengthMismatchError(
            f"factual [{factual.batch_size},{factual.total_len}] does not cover "
            f"window [{context.batch_size},{total}]"
        )
    noises = abduct_noises(spec, factual, total)
    return simulate_interventional(spec, context, schedules, 0, noises=noises)


def build_intervention_by_shift(context: SeriesBatch, roots, source_offset: int,
                                item: int = 0) -> InterventionSchedule:
    """Clamp each listed root over the forecast window to its own values
    from source_offset steps earlier (which must lie inside the context)."""
    tau = context.context_len
    total = context.total_len
    horizon = total - tau
    if source_offset < horizon:
        raise OffsetTooSmallError(
            f"offset {source_offset} smaller than horizon {horizon}"
        )
    if source_offset > tau:
        raise ScheduleOutOfWindowError(
            f"offset {source_offset} reaches before the window start"
        )
    entries = {
        (int(i), t): float(context.values[item, i, t - source_offset])
        for i in roots
        for t in range(tau, total)
    }
    return InterventionSchedule(context_len=tau, total_len=total, entries=entries)


# ---------------------------------------------------------------------------
# windowing

def split_window_starts(series_len: int, window_len: int,
                        train_frac: float = 0.8) -> tuple[list[int], list[int]]:
    """Stride-1 window starts, split so each window lies fully inside its
    time segment. Windows that straddle the boundary are dropped."""
    boundary = int(series_len * train_frac)
    train = list(range(0, boundary - window_len + 1))
    test = list(range(boundary, series_len - window_len + 1))
    return train, test


def make_windows(series: SeriesBatch, starts, window_len: int,
                 context_len: int, item: int = 0) -> SeriesBatch:
    """Extract stride-free windows from one long series into a batch."""
    starts = list(starts)
    values = np.stack(
        [series.values[item, :, s : s + window_len] for s in starts], axis=0
    )
    start_times = series.start_times[item] + np.asarray(starts, dtype=np.int64)
    return SeriesBatch(values, context_len, start_times)
