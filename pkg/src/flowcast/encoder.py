"""Per-node recurrent summaries of history.

A gated recurrent cell rolls over each node's (standardized) values; the
flow for node i at step t is then conditioned on the node's own state and
its parents' states at t-1. One shared cell is the default; a list of
per-node cells is accepted everywhere for the per_node_rnn variant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var, _sigmoid, as_matrix
from .errors import (
    EmptyContextError,
    MissingNodeValueError,
    NonFiniteValueError,
    ShapeMismatchError,
)
from .graph import CausalDag
from .scm import SeriesBatch, standardize


@dataclass
class GruParams:
    """Gate weights for one gated recurrent cell.

    Update rule: r and u are sigmoid gates, the candidate c is a tanh of the
    reset-gated state, and the new state is (1-u)*h + u*c. Zero parameters
    therefore keep a zero state at zero, and saturating the update gate
    replaces the state with the candidate outright.
    """

    wxr: np.ndarray
    whr: np.ndarray
    br: np.ndarray
    wxu: np.ndarray
    whu: np.ndarray
    bu: np.ndarray
    wxc: np.ndarray
    whc: np.ndarray
    bc: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.wxr.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.whr.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "wxr": self.wxr, "whr": self.whr, "br": self.br,
            "wxu": self.wxu, "whu": self.whu, "bu": self.bu,
            "wxc": self.wxc, "whc": self.whc, "bc": self.bc,
        }


def init_gru(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> GruParams:
    def w(fan_in, fan_out):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, scale, size=(fan_in, fan_out))

    def b():
        return np.zeros((1, hidden_dim))

    return GruParams(
        wxr=w(input_dim, hidden_dim), whr=w(hidden_dim, hidden_dim), br=b(),
        wxu=w(input_dim, hidden_dim), whu=w(hidden_dim, hidden_dim), bu=b(),
        wxc=w(input_dim, hidden_dim), whc=w(hidden_dim, hidden_dim), bc=b(),
    )


def step(params: GruParams, state: np.ndarray, x, covariates=None) -> np.ndarray:
    """One cell update. state is [n, H]; x is [n] values (or scalar)."""
    h = as_matrix(state)
    xin = as_matrix(x)
    if covariates is not None:
        xin = np.concatenate([xin, as_matrix(covariates)], axis=1)
    if xin.shape[1] != params.input_dim:
        raise ShapeMismatchError(
            f"cell input dim {xin.shape[1]} != {params.input_dim}"
        )
    if not np.all(np.isfinite(xin)):
        raise NonFiniteValueError("non-finite cell input")
    r = _sigmoid(xin @ params.wxr + h @ params.whr + params.br)
    u = _sigmoid(xin @ params.wxu + h @ params.whu + params.bu)
    c = np.tanh(xin @ params.wxc + (r * h) @ params.whc + params.bc)
    return (1.0 - u) * h + u * c


def step_taped(tape: Tape, pvars: dict[str, Var], h: Var, x: Var) -> Var:
    """Taped twin of step(); pvars holds the nine parameter Vars."""
    r = tape.sigmoid(tape.add(tape.add(
        tape.matmul(x, pvars["wxr"]), tape.matmul(h, pvars["whr"])), pvars["br"]))
    u = tape.sigmoid(tape.add(tape.add(
        tape.matmul(x, pvars["wxu"]), tape.matmul(h, pvars["whu"])), pvars["bu"]))
    c = tape.tanh(tape.add(tape.add(
        tape.matmul(x, pvars["wxc"]), tape.matmul(tape.mul(r, h), pvars["whc"])),
        pvars["bc"]))
    one_minus_u = tape.scalar_add(tape.scalar_mul(u, -1.0), 1.0)
    return tape.add(tape.mul(one_minus_u, h), tape.mul(u, c))


@dataclass
class HiddenState:
    """Conditioning tuple for one node: own state plus parents' states."""

    own: np.ndarray
    parents: dict[int, np.ndarray]


def _cells(params, node_count: int):
    if isinstance(params, GruParams):
        return None  # shared
    cells = list(params)
    if len(cells) != node_count:
        raise ShapeMismatchError("need one cell per node in per-node mode")
    return cells


def step_all(params, states: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Advance every node's own state once. states [B,K,H], xs [B,K]."""
    batch, k, hdim = states.shape
    if xs.shape != (batch, k):
        raise MissingNodeValueError(f"expected one value per node, got {xs.shape}")
    cells = _cells(params, k)
    if cells is None:
        flat = step(params, states.reshape(batch * k, hdim), xs.reshape(batch * k))
        return flat.reshape(batch, k, hdim)
    out = np.empty_like(states)
    for i in range(k):
        out[:, i] = step(cells[i], states[:, i], xs[:, i])
    return out


def init_from_context(params, dag: CausalDag, context: SeriesBatch) -> np.ndarray:
    """Roll the cell over the standardized context; returns states [B,K,H].

    The returned array is the per-node own state at the end of the context
    window, i.e. the conditioning input for the first forecast step.
    """
    if context.context_len < 1:
        raise EmptyContextError("context window is empty")
    if context.node_count != dag.node_count:
        raise ShapeMismatchError("context node count does not match the DAG")
    hdim = (params.hidden_dim if isinstance(params, GruParams)
            else params[0].hidden_dim)
    xs = standardize(context.context_values(), context.context_mean,
                     context.context_std)
    states = np.zeros((context.batch_size, dag.node_count, hdim))
    for t in range(context.context_len):
        states = step_all(params, states, xs[:, :, t])
    return states


def advance_all(params, dag: CausalDag, states: np.ndarray,
                new_values: np.ndarray) -> np.ndarray:
    """Advance all own states with the step's (standardized) values.

    Purely functional: returns fresh state arrays, never mutates. Parent
    entries of each node's HiddenState are assembled on demand from the
    returned array, so they always reflect this same step.
    """
    if new_values.shape != states.shape[:2]:
        raise MissingNodeValueError(
            f"values {new_values.shape} vs states {states.shape[:2]}"
        )
    return step_all(params, states, new_values)


def hidden_state(dag: CausalDag, states: np.ndarray, node: int) -> HiddenState:
    """Assemble H for one node from the [B,K,H] state array."""
    return HiddenState(
        own=states[:, node],
        parents={p: states[:, p] for p in dag.parents[node]},
    )
