"""Model container: one recurrent cell (shared or per node) plus one
velocity network per node, with a flat parameter view for the optimizer
and checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import GruParams, init_gru
from .errors import ShapeMismatchError
from .flow import FlowConfig, VelocityNet, make_velocity_net
from .graph import CausalDag


@dataclass
class ForecastModel:
    dag: CausalDag
    hidden_dim: int
    rnn: GruParams | list[GruParams]
    nets: list[VelocityNet]
    flow: FlowConfig = field(default_factory=FlowConfig)
    covariate_dim: int = 0

    @property
    def shared_rnn(self) -> bool:
        return isinstance(self.rnn, GruParams)

    def rnn_cells(self) -> list[tuple[str, GruParams]]:
        if self.shared_rnn:
            return [("rnn", self.rnn)]
        return [(f"rnn{i}", cell) for i, cell in enumerate(self.rnn)]

    def parameters(self) -> dict[str, np.ndarray]:
        """Ordered name -> array view of every trainable parameter."""
        out: dict[str, np.ndarray] = {}
        for prefix, cell in self.rnn_cells():
            for key, arr in cell.arrays().items():
                out[f"{prefix}.{key}"] = arr
        for i, net in enumerate(self.nets):
            for layer, (w, b) in enumerate(zip(net.mlp.weights, net.mlp.biases)):
                out[f"node{i}.w{layer}"] = w
                out[f"node{i}.b{layer}"] = b
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def set_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into the existing parameter arrays (shapes must match)."""
        mine = self.parameters()
        if set(mine) != set(arrays):
            raise ShapeMismatchError("parameter name sets differ")
        for name, arr in mine.items():
            new = np.asarray(arrays[name], dtype=float)
            if new.shape != arr.shape:
                raise ShapeMismatchError(
                    f"{name}: shape {new.shape} != {arr.shape}"
                )
            arr[...] = new

    def copy(self) -> "ForecastModel":
        rnn = (GruParams(**{k: v.copy() for k, v in self.rnn.arrays().items()})
               if self.shared_rnn else
               [GruParams(**{k: v.copy() for k, v in c.arrays().items()})
                for c in self.rnn])
        nets = [VelocityNet(n.mlp.copy(), n.hidden_dim) for n in self.nets]
        return ForecastModel(self.dag, self.hidden_dim, rnn, nets,
                             self.flow, self.covariate_dim)


def init_model(dag: CausalDag, hidden_dim: int = 32, width: int = 64,
               depth: int = 3, flow: FlowConfig | None = None, seed: int = 0,
               per_node_rnn: bool = False, covariate_dim: int = 0,
               final_scale: float = 0.1) -> ForecastModel:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x7710)))
    input_dim = 1 + covariate_dim
    if per_node_rnn:
        rnn = [init_gru(input_dim, hidden_dim, rng) for _ in range(dag.node_count)]
    else:
        rnn = init_gru(input_dim, hidden_dim, rng)
    nets = [
        make_velocity_net(hidden_dim, rng, width=width, depth=depth,
                          final_scale=final_scale)
        for _ in range(dag.node_count)
    ]
    return ForecastModel(dag, hidden_dim, rnn, nets,
                         flow or FlowConfig(), covariate_dim)
