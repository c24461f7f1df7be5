"""Conditional flow matching training over the forecast window.

The recurrent states are teacher-forced from observed values; each
(node, step) term regresses the velocity field onto the derivative of a
straight-line path between the observed value and a fresh Gaussian sample.
Gradients flow through the velocity nets and back through the whole
recurrent roll, context included.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, forward_mlp
from .encoder import step_taped
from .errors import (
    DivergingLossError,
    EmptyForecastWindowError,
    SOutOfRangeError,
    ShapeMismatchError,
)
from .model import ForecastModel
from .scm import SeriesBatch, standardize


@dataclass
class TrainConfig:
    sigma_min: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    s_samples_per_point: int = 1
    ema_window: int = 50
    diverge_factor: float = 10.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if self.s_samples_per_point < 1:
            raise ValueError("s_samples_per_point must be >= 1")


def reference_path(x, z, s, sigma_min: float = 0.0):
    """Linear interpolant between data x (s=0) and noise z (s=1).

    Returns (phi, dphi/ds). With sigma_min = 0 this is the strict straight
    line phi = (1-s) x + s z with derivative z - x; a positive sigma_min
    keeps that fraction of the noise at the data end.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise SOutOfRangeError("flow time s must lie in [0, 1]")
    phi = (1.0 - s) * x + (s + sigma_min * (1.0 - s)) * z
    dphi = (1.0 - sigma_min) * z - x
    return phi, dphi


def _roll_states_taped(model: ForecastModel, tape: Tape,
                       pvars: dict[str, Var], xs: np.ndarray,
                       targets: range) -> dict[int, Var]:
    """Teacher-forced recurrent roll on the tape.

    xs is the standardized [B, K, T] batch. Returns, for each target step
    t0, a [B, K*H] Var of the states after consuming x at t0 - 1.
    """
    batch, k, total = xs.shape
    hdim = model.hidden_dim
    saved: dict[int, Var] = {}
    if model.shared_rnn:
        cell = {key: pvars[f"rnn.{key}"] for key in model.rnn.arrays()}
        xs_leaf = tape.leaf(xs.reshape(batch * k, total))
        h = tape.leaf(np.zeros((batch * k, hdim)))
        for t in range(total - 1):
            x_t = tape.slice_cols(xs_leaf, t, t + 1)
            h = step_taped(tape, cell, h, x_t)
            if t + 1 in targets:
                saved[t + 1] = tape.reshape(h, batch, k * hdim)
    else:
        cells = [
            {key: pvars[f"rnn{i}.{key}"] for key in model.rnn[i].arrays()}
            for i in range(k)
        ]
        xs_leaves = [tape.leaf(xs[:, i, :]) for i in range(k)]
        hs = [tape.leaf(np.zeros((batch, hdim))) for _ in range(k)]
        for t in range(total - 1):
            hs = [
                step_taped(tape, cells[i], hs[i],
                           tape.slice_cols(xs_leaves[i], t, t + 1))
                for i in range(k)
            ]
            if t + 1 in targets:
                saved[t + 1] = tape.concat(hs)
    return saved


def cfm_loss(model: ForecastModel, batch: SeriesBatch, rng: np.random.Generator,
             sigma_min: float = 0.0, s_samples: int = 1,
             want_grads: bool = True, draws=None):
    """Flow matching loss over the batch's forecast window.

    Returns (value, grads) where grads maps parameter names to arrays (or
    None when want_grads is False). The (s, z) pairs are drawn from rng,
    independently per (batch item, node, step, sample); draws=(s, z) with
    arrays of shape [K, horizon, s_samples, B] overrides them for tests.
    """
    if model.covariate_dim != 0:
        raise ShapeMismatchError("training with covariates is not wired up")
    tau, total = batch.context_len, batch.total_len
    horizon = total - tau
    if horizon < 1:
        raise EmptyForecastWindowError("batch has no forecast window")
    if batch.node_count != model.dag.node_count:
        raise ShapeMismatchError("batch node count does not match the model")
    b, k = batch.batch_size, batch.node_count
    hdim = model.hidden_dim
    xs = standardize(batch.values, batch.context_mean, batch.context_std)

    if draws is None:
        s_draw = rng.uniform(size=(k, horizon, s_samples, b))
        z_draw = rng.standard_normal(size=(k, horizon, s_samples, b))
    else:
        s_draw = np.asarray(draws[0], dtype=float)
        z_draw = np.asarray(draws[1], dtype=float)
        if s_draw.shape != (k, horizon, s_samples, b) or s_draw.shape != z_draw.shape:
            raise ShapeMismatchError("draws must be [K, horizon, s_samples, B]")

    tape = Tape()
    pvars = {name: tape.leaf(arr) for name, arr in model.parameters().items()}
    targets = range(tau, total)
    saved = _roll_states_taped(model, tape, pvars, xs, targets)

    zero_pool = None
    loss_sum = None
    for i in range(k):
        own_slices = {
            t0: tape.slice_cols(saved[t0], i * hdim, (i + 1) * hdim)
            for t0 in targets
        }
        parents = model.dag.parents[i]
        if parents:
            pool_slices = {}
            for t0 in targets:
                acc = None
                for p in parents:
                    sl = tape.slice_cols(saved[t0], p * hdim, (p + 1) * hdim)
                    acc = sl if acc is None else tape.add(acc, sl)
                pool_slices[t0] = tape.scalar_mul(acc, 1.0 / len(parents))
        else:
            pool_slices = None

        order = [(t0, m) for t0 in targets for m in range(s_samples)]
        own = tape.concat_rows([own_slices[t0] for t0, _ in order])
        if pool_slices is None:
            if zero_pool is None or zero_pool.value.shape[0] != own.value.shape[0]:
                zero_pool = tape.leaf(np.zeros((own.value.shape[0], hdim)))
            pool = zero_pool
        else:
            pool = tape.concat_rows([pool_slices[t0] for t0, _ in order])

        x_rows = np.broadcast_to(
            xs[:, i, tau:].T[:, None, :], (horizon, s_samples, b)
        ).reshape(-1)
        s_rows = s_draw[i].reshape(-1)
        z_rows = z_draw[i].reshape(-1)
        phi, dphi = reference_path(x_rows, z_rows, s_rows, sigma_min)

        head = np.stack(
            [phi, s_rows, np.sin(2.0 * math.pi * s_rows)], axis=1
        )
        inputs = tape.concat([tape.leaf(head), own, pool])
        node_pvars = [
            (pvars[f"node{i}.w{layer}"], pvars[f"node{i}.b{layer}"])
            for layer in range(len(model.nets[i].mlp.weights))
        ]
        v = forward_mlp(model.nets[i].mlp, inputs, tape=tape,
                        param_vars=node_pvars)
        diff = tape.sub(v, tape.leaf(dphi.reshape(-1, 1)))
        term = tape.sum_squares(diff)
        loss_sum = term if loss_sum is None else tape.add(loss_sum, term)

    loss = tape.scalar_mul(loss_sum, 1.0 / (b * k * horizon * s_samples))
    value = float(loss.value[0, 0])
    if not want_grads:
        return value, None
    raw = tape.backward(loss)
    grads = {
        name: raw.get(var, np.zeros_like(var.value))
        for name, var in pvars.items()
    }
    return value, grads


# ---------------------------------------------------------------------------
# optimizer and loop


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out


def adam_init(model: ForecastModel) -> AdamState:
    params = model.parameters()
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              opt: AdamState, cfg: TrainConfig) -> None:
    opt.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** opt.t
    bias2 = 1.0 - b2 ** opt.t
    for name, arr in params.items():
        g = grads[name]
        opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        mhat = opt.m[name] / bias1
        vhat = opt.v[name] / bias2
        arr -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


@dataclass
class TrainResult:
    model: ForecastModel
    curve: list[tuple[int, int, float]] = field(default_factory=list)
    opt: AdamState | None = None


def train(model: ForecastModel, windows: SeriesBatch, cfg: TrainConfig,
          on_epoch=None, start_epoch: int = 0,
          opt: AdamState | None = None) -> TrainResult:
    """Optimize the model in place over stride-1 training windows.

    Each epoch reshuffles and re-draws (s, z) from a generator derived from
    (seed, epoch), so a run resumed from an epoch checkpoint reproduces the
    uninterrupted run exactly. on_epoch(epoch, model, opt, curve) fires
    after every epoch.
    """
    params = model.parameters()
    opt = opt if opt is not None else adam_init(model)
    curve: list[tuple[int, int, float]] = []
    n = windows.batch_size
    alpha = 2.0 / (cfg.ema_window + 1.0)
    ema = None
    ema_min = math.inf
    global_step = 0
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 0x5EED, epoch))
        )
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            sub = SeriesBatch(
                windows.values[idx], windows.context_len,
                windows.start_times[idx],
            )
            value, grads = cfm_loss(
                model, sub, rng, sigma_min=cfg.sigma_min,
                s_samples=cfg.s_samples_per_point,
            )
            adam_step(params, grads, opt, cfg)
            curve.append((global_step, epoch, value))
            global_step += 1
            ema = value if ema is None else (1.0 - alpha) * ema + alpha * value
            ema_min = min(ema_min, ema)
            if ema > cfg.diverge_factor * ema_min and global_step > cfg.ema_window:
                raise DivergingLossError(
                    f"loss EMA {ema:.4g} exceeds {cfg.diverge_factor}x its "
                    f"minimum {ema_min:.4g}"
                )
        if on_epoch is not None:
            on_epoch(epoch, model, opt, curve)
    return TrainResult(model, curve, opt)
