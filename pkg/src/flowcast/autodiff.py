"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Just enough machinery for small feed-forward velocity networks and a gated
recurrent cell: a Tape records primitive ops on matrices, backward() replays
it once in reverse. Storage and BLAS come from numpy; gradients are
hand-rolled so the whole engine stays auditable.

Every op checks output finiteness (NaN/Inf raises NonFiniteValueError) and
accumulates in double precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteValueError, NonScalarLossError, ShapeMismatchError


def as_matrix(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 matrix (rows x cols)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected 2-D array, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"non-finite value produced by {op}")


class Var:
    """One tape node: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "parents", "_backward", "index")

    def __init__(self, value, parents=(), backward=None, index=-1):
        self.value = value
        self.parents = parents
        self._backward = backward
        self.index = index

    @property
    def shape(self):
        return self.value.shape


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Append-only record of primitive ops, replayed backward for gradients."""

    def __init__(self):
        self.nodes: list[Var] = []

    def _record(self, value, parents, backward, op: str) -> Var:
        _check_finite(value, op)
        var = Var(value, parents, backward, index=len(self.nodes))
        self.nodes.append(var)
        return var

    def leaf(self, value) -> Var:
        return self._record(as_matrix(value), (), None, "leaf")

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatchError(
                f"matmul {a.value.shape} @ {b.value.shape}"
            )
        value = a.value @ b.value

        def backward(grad, push):
            push(a, grad @ b.value.T)
            push(b, a.value.T @ grad)

        return self._record(value, (a, b), backward, "matmul")

    def _binary_shapes(self, a: Var, b: Var, op: str):
        if a.value.shape == b.value.shape:
            return
        # only row-broadcast of b (bias-style [1, d]) is supported
        if b.value.shape == (1, a.value.shape[1]):
            return
        raise ShapeMismatchError(f"{op} {a.value.shape} vs {b.value.shape}")

    def add(self, a: Var, b: Var) -> Var:
        self._binary_shapes(a, b, "add")
        value = a.value + b.value

        def backward(grad, push):
            push(a, grad)
            if b.value.shape == grad.shape:
                push(b, grad)
            else:
                push(b, grad.sum(axis=0, keepdims=True))

        return self._record(value, (a, b), backward, "add")

    def mul(self, a: Var, b: Var) -> Var:
        """Elementwise product; needed by the recurrent cell's gating."""
        self._binary_shapes(a, b, "mul")
        value = a.value * b.value

        def backward(grad, push):
            push(a, grad * b.value)
            gb = grad * a.value
            if b.value.shape == grad.shape:
                push(b, gb)
            else:
                push(b, gb.sum(axis=0, keepdims=True))

        return self._record(value, (a, b), backward, "mul")

    def scalar_mul(self, a: Var, c: float) -> Var:
        c = float(c)
        value = a.value * c

        def backward(grad, push):
            push(a, grad * c)

        return self._record(value, (a,), backward, "scalar_mul")

    def scalar_add(self, a: Var, c: float) -> Var:
        c = float(c)
        value = a.value + c

        def backward(grad, push):
            push(a, grad)

        return self._record(value, (a,), backward, "scalar_add")

    def sub(self, a: Var, b: Var) -> Var:
        return self.add(a, self.scalar_mul(b, -1.0))

    def tanh(self, a: Var) -> Var:
        value = np.tanh(a.value)

        def backward(grad, push):
            push(a, grad * (1.0 - value * value))

        return self._record(value, (a,), backward, "tanh")

    def sigmoid(self, a: Var) -> Var:
        value = _sigmoid(a.value)

        def backward(grad, push):
            push(a, grad * value * (1.0 - value))

        return self._record(value, (a,), backward, "sigmoid")

    def softplus(self, a: Var) -> Var:
        value = np.logaddexp(0.0, a.value)

        def backward(grad, push):
            push(a, grad * _sigmoid(a.value))

        return self._record(value, (a,), backward, "softplus")

    def concat(self, parts: list[Var]) -> Var:
        rows = parts[0].value.shape[0]
        for p in parts:
            if p.value.shape[0] != rows:
                raise ShapeMismatchError("concat row mismatch")
        value = np.concatenate([p.value for p in parts], axis=1)
        widths = [p.value.shape[1] for p in parts]

        def backward(grad, push):
            start = 0
            for p, w in zip(parts, widths):
                push(p, grad[:, start : start + w])
                start += w

        return self._record(value, tuple(parts), backward, "concat")

    def concat_rows(self, parts: list[Var]) -> Var:
        cols = parts[0].value.shape[1]
        for p in parts:
            if p.value.shape[1] != cols:
                raise ShapeMismatchError("concat_rows column mismatch")
        value = np.concatenate([p.value for p in parts], axis=0)
        heights = [p.value.shape[0] for p in parts]

        def backward(grad, push):
            start = 0
            for p, h in zip(parts, heights):
                push(p, grad[start : start + h, :])
                start += h

        return self._record(value, tuple(parts), backward, "concat_rows")

    def slice_cols(self, a: Var, start: int, stop: int) -> Var:
        if not 0 <= start < stop <= a.value.shape[1]:
            raise ShapeMismatchError(
                f"slice [{start}:{stop}] of {a.value.shape}"
            )
        value = a.value[:, start:stop].copy()

        def backward(grad, push):
            full = np.zeros_like(a.value)
            full[:, start:stop] = grad
            push(a, full)

        return self._record(value, (a,), backward, "slice")

    def reshape(self, a: Var, rows: int, cols: int) -> Var:
        if rows * cols != a.value.size:
            raise ShapeMismatchError(f"reshape {a.value.shape} -> ({rows},{cols})")
        value = a.value.reshape(rows, cols)
        old = a.value.shape

        def backward(grad, push):
            push(a, grad.reshape(old))

        return self._record(value, (a,), backward, "reshape")

    def total(self, a: Var) -> Var:
        """Sum of all entries, as a 1x1 matrix."""
        value = np.array([[a.value.sum()]])

        def backward(grad, push):
            push(a, np.full_like(a.value, grad[0, 0]))

        return self._record(value, (a,), backward, "total")

    def sum_squares(self, a: Var) -> Var:
        value = np.array([[np.dot(a.value.ravel(), a.value.ravel())]])

        def backward(grad, push):
            push(a, 2.0 * grad[0, 0] * a.value)

        return self._record(value, (a,), backward, "sum_squares")

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every tape node.

        The tape itself is left untouched, so repeated calls give identical
        results.
        """
        if loss.value.shape != (1, 1):
            raise NonScalarLossError(f"loss has shape {loss.value.shape}")
        grads: dict[Var, np.ndarray] = {loss: np.ones((1, 1))}

        def push(var: Var, grad: np.ndarray) -> None:
            acc = grads.get(var)
            grads[var] = grad if acc is None else acc + grad

        for var in reversed(self.nodes[: loss.index + 1]):
            grad = grads.get(var)
            if grad is None or var._backward is None:
                continue
            var._backward(grad, push)
            if var is not loss:
                del grads[var]  # interior grads are complete once visited
        return grads


# ---------------------------------------------------------------------------
# small MLP on top of the kernel


@dataclass
class MlpParams:
    """Fully connected layers: hidden activations, linear final layer.

    activation applies to all layers except the last; "identity" makes the
    whole network affine, which the closed-form flow tests rely on.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


_ACTIVATIONS = {
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "identity": lambda x: x,
}


def init_mlp(sizes: list[int], rng: np.random.Generator,
             activation: str = "tanh", final_scale: float = 1.0) -> MlpParams:
    """Glorot-normal init; final layer scaled down so the net starts small."""
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(0.0, scale, size=(fan_in, fan_out))
        if k == len(sizes) - 2:
            w *= final_scale
        weights.append(w)
        biases.append(np.zeros((1, fan_out)))
    return MlpParams(weights, biases, activation)


def forward_mlp(params: MlpParams, x, tape: Tape | None = None,
                param_vars: list[tuple[Var, Var]] | None = None):
    """Run the MLP. Plain numpy by default; records to tape when given one.

    param_vars pairs (weight, bias) Vars already on the tape; when omitted
    under tracing, fresh leaves are created (gradients then unreachable to
    the caller, which is fine for derivative-of-input uses).
    """
    if tape is None:
        h = as_matrix(x)
        act = _ACTIVATIONS[params.activation]
        n_layers = len(params.weights)
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            if h.shape[1] != w.shape[0]:
                raise ShapeMismatchError(
                    f"layer {k}: input {h.shape} vs weight {w.shape}"
                )
            h = h @ w + b
            if k < n_layers - 1:
                h = act(h)
        _check_finite(h, "forward_mlp")
        return h

    if param_vars is None:
        param_vars = [
            (tape.leaf(w), tape.leaf(b))
            for w, b in zip(params.weights, params.biases)
        ]
    h = x if isinstance(x, Var) else tape.leaf(x)
    n_layers = len(param_vars)
    act = {
        "tanh": tape.tanh,
        "sigmoid": tape.sigmoid,
        "softplus": tape.softplus,
        "identity": lambda v: v,
    }[params.activation]
    for k, (w, b) in enumerate(param_vars):
        h = tape.add(tape.matmul(h, w), b)
        if k < n_layers - 1:
            h = act(h)
    return h


def mlp_input_grad(params: MlpParams, x: np.ndarray, col: int = 0) -> np.ndarray:
    """d(output)/d(input column) per row, via one taped backward pass.

    Rows are independent, so the gradient of the summed output recovers the
    per-row scalar derivative. Output layer must be a single column.
    """
    tape = Tape()
    x_var = tape.leaf(x)
    out = forward_mlp(params, x_var, tape=tape)
    if out.value.shape[1] != 1:
        raise ShapeMismatchError("mlp_input_grad needs a scalar-output net")
    grads = tape.backward(tape.total(out))
    return grads[x_var][:, col : col + 1]
