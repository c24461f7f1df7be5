"""One conditional continuous normalizing flow per node.

A small MLP parameterizes a scalar velocity field v(x, s; cond) over flow
time s in [0, 1]. Encoding integrates the field forward from the data point
(s=0) to a latent (s=1); decoding integrates the same field backward from a
latent. The log-density of a point adds the integrated x-derivative of the
field to the base log-density of its latent.

Fixed-step Euler or classic RK4 integration; all integrals share the grid,
so decode is the numerical inverse of encode up to integrator order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import MlpParams, forward_mlp, init_mlp, mlp_input_grad
from .encoder import HiddenState
from .errors import (
    NonFiniteTrajectoryError,
    NonFiniteValueError,
    ShapeMismatchError,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    integrator: str = "rk4"
    steps: int = 64
    divergence: str = "autodiff"  # or "central"
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.divergence not in ("autodiff", "central"):
            raise ValueError(f"unknown divergence mode {self.divergence!r}")
        if self.divergence == "central" and not self.fd_step > 0:
            raise ValueError("central difference needs fd_step > 0")


@dataclass
class VelocityNet:
    """Velocity field for one node.

    Input layout: [x, s, sin(2*pi*s), own state (hidden_dim), mean-pooled
    parent states (hidden_dim)]; output is the scalar velocity. Mean pooling
    keeps the input width fixed across nodes of any in-degree and makes the
    conditioning invariant to parent ordering.
    """

    mlp: MlpParams
    hidden_dim: int

    @property
    def input_dim(self) -> int:
        return 3 + 2 * self.hidden_dim


def make_velocity_net(hidden_dim: int, rng: np.random.Generator,
                      width: int = 64, depth: int = 3,
                      final_scale: float = 0.1) -> VelocityNet:
    sizes = [3 + 2 * hidden_dim] + [width] * (depth - 1) + [1]
    return VelocityNet(init_mlp(sizes, rng, "tanh", final_scale), hidden_dim)


def conditioning_vector(hidden: HiddenState) -> np.ndarray:
    """Flatten a HiddenState into [n, 2*hidden_dim]: own plus parent pool."""
    own = np.atleast_2d(np.asarray(hidden.own, dtype=float))
    if hidden.parents:
        pool = np.mean([np.atleast_2d(np.asarray(p, dtype=float))
                        for p in hidden.parents.values()], axis=0)
    else:
        pool = np.zeros_like(own)
    return np.concatenate([own, pool], axis=1)


def _resolve_cond(hidden, n: int, hidden_dim: int) -> np.ndarray:
    cond = conditioning_vector(hidden) if isinstance(hidden, HiddenState) \
        else np.atleast_2d(np.asarray(hidden, dtype=float))
    if cond.shape[1] != 2 * hidden_dim:
        raise ShapeMismatchError(
            f"conditioning width {cond.shape[1]} != {2 * hidden_dim}"
        )
    if cond.shape[0] == 1 and n > 1:
        cond = np.broadcast_to(cond, (n, cond.shape[1]))
    if cond.shape[0] != n:
        raise ShapeMismatchError(f"{cond.shape[0]} conditioning rows for {n} points")
    return cond


def velocity_inputs(x: np.ndarray, s: float, cond: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    cols = np.empty((n, 3 + cond.shape[1]))
    cols[:, 0] = x
    cols[:, 1] = s
    cols[:, 2] = math.sin(2.0 * math.pi * s)
    cols[:, 3:] = cond
    return cols


def velocity(net: VelocityNet, x: np.ndarray, s: float,
             cond: np.ndarray) -> np.ndarray:
    return forward_mlp(net.mlp, velocity_inputs(x, s, cond))[:, 0]


def velocity_dvdx(net: VelocityNet, x: np.ndarray, s: float, cond: np.ndarray,
                  cfg: FlowConfig) -> np.ndarray:
    """Scalar x-derivative of the field per row (the 1-D divergence)."""
    if cfg.divergence == "autodiff":
        return mlp_input_grad(net.mlp, velocity_inputs(x, s, cond), col=0)[:, 0]
    h = cfg.fd_step
    vp = velocity(net, x + h, s, cond)
    vm = velocity(net, x - h, s, cond)
    return (vp - vm) / (2.0 * h)


def _check_traj(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteTrajectoryError("flow trajectory left the finite range")


def integrate(f, x0: np.ndarray, s0: float, s1: float, cfg: FlowConfig) -> np.ndarray:
    """Fixed-step integration of dx/ds = f(x, s) from s0 to s1."""
    x = np.array(x0, dtype=float)
    h = (s1 - s0) / cfg.steps
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(cfg.steps):
                s = s0 + k * h
                if cfg.integrator == "euler":
                    x = x + h * f(x, s)
                else:
                    k1 = f(x, s)
                    k2 = f(x + 0.5 * h * k1, s + 0.5 * h)
                    k3 = f(x + 0.5 * h * k2, s + 0.5 * h)
                    k4 = f(x + h * k3, s + h)
                    x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                _check_traj(x)
    except NonFiniteValueError as exc:
        raise NonFiniteTrajectoryError(str(exc)) from exc
    return x


def _wrap(x):
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    return arr, np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)


def encode(net: VelocityNet, cfg: FlowConfig, x, hidden):
    """Push a data value (s=0) to its latent (s=1) under the conditioning."""
    arr, scalar = _wrap(x)
    cond = _resolve_cond(hidden, arr.shape[0], net.hidden_dim)
    z = integrate(lambda v, s: velocity(net, v, s, cond), arr, 0.0, 1.0, cfg)
    return float(z[0]) if scalar else z


def decode(net: VelocityNet, cfg: FlowConfig, z, hidden):
    """Pull a latent (s=1) back to a data value (s=0): the inverse map."""
    arr, scalar = _wrap(z)
    cond = _resolve_cond(hidden, arr.shape[0], net.hidden_dim)
    x = integrate(lambda v, s: velocity(net, v, s, cond), arr, 1.0, 0.0, cfg)
    return float(x[0]) if scalar else x


def log_density(net: VelocityNet, cfg: FlowConfig, x, hidden):
    """(log-density, latent) of data values under the conditioned flow.

    log p(x) = log q(z) + integral over s of dv/dx along the encoding
    trajectory, with q the standard normal base. The divergence rides along
    the same integrator grid as the state (augmented RK4/Euler).
    """
    arr, scalar = _wrap(x)
    cond = _resolve_cond(hidden, arr.shape[0], net.hidden_dim)

    def f_aug(state, s):
        v = velocity(net, state[0], s, cond)
        d = velocity_dvdx(net, state[0], s, cond, cfg)
        return np.stack([v, d])

    state0 = np.stack([arr, np.zeros_like(arr)])
    h = 1.0 / cfg.steps
    state = state0
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(cfg.steps):
                s = k * h
                if cfg.integrator == "euler":
                    state = state + h * f_aug(state, s)
                else:
                    k1 = f_aug(state, s)
                    k2 = f_aug(state + 0.5 * h * k1, s + 0.5 * h)
                    k3 = f_aug(state + 0.5 * h * k2, s + 0.5 * h)
                    k4 = f_aug(state + h * k3, s + h)
                    state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                _check_traj(state)
    except NonFiniteValueError as exc:
        raise NonFiniteTrajectoryError(str(exc)) from exc
    z, div = state[0], state[1]
    logp = -0.5 * z * z - 0.5 * LOG_2PI + div
    if scalar:
        return float(logp[0]), float(z[0])
    return logp, z
