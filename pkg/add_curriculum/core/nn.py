from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from add_curriculum.core import tensor as T
from add_curriculum.core.tensor import ContractError, Tensor

ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}
Params = Dict[str, Tensor]


@dataclass(frozen=True)
class MlpSpec:
    """Dense network description.

    ``widths[0]`` is the data input width and ``widths[-1]`` the output width; the
    sinusoidal embedding of the diffusion time (``time_embedding`` features) is
    appended to the input of the first layer when positive.
    """

    widths: Tuple[int, ...]
    activation: str = "relu"
    time_embedding: int = 0

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ContractError("MlpSpec needs at least one layer (two widths)")
        if any(w <= 0 for w in widths):
            raise ContractError(f"layer widths must be positive: {widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.time_embedding < 0 or self.time_embedding % 2:
            raise ContractError("time embedding width must be even and non-negative")

    @property
    def layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def fan_in(self, layer: int) -> int:
        return self.widths[layer] + (self.time_embedding if layer == 0 else 0)


def init_params(spec: MlpSpec, rng: np.random.Generator) -> Params:
    params: Params = {}
    for layer in range(spec.layers):
        fan_in, fan_out = spec.fan_in(layer), spec.widths[layer + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"w{layer}"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"w{layer}")
        params[f"b{layer}"] = Tensor(np.zeros(fan_out), name=f"b{layer}")
    return params


def zero_params(spec: MlpSpec) -> Params:
    params: Params = {}
    for layer in range(spec.layers):
        params[f"w{layer}"] = Tensor(np.zeros((spec.fan_in(layer), spec.widths[layer + 1])))
        params[f"b{layer}"] = Tensor(np.zeros(spec.widths[layer + 1]))
    return params


def sinusoidal_embedding(t: Union[int, float, Sequence[float], np.ndarray], width: int, rows: int) -> np.ndarray:
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    times = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (rows, 1))
    angles = times * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def mlp_forward(
    spec: MlpSpec,
    params: Params,
    inputs: Union[Tensor, np.ndarray],
    t: Optional[Union[int, Sequence[int], np.ndarray]] = None,
) -> Tensor:
    x = T.as_tensor(inputs)
    if x.data.ndim != 2 or x.shape[1] != spec.input_width:
        raise ContractError(f"layer 0 expects input width {spec.input_width}, got shape {x.shape}")
    if spec.time_embedding:
        if t is None:
            raise ContractError("layer 0 needs the diffusion time for its embedding")
        x = T.concat([x, sinusoidal_embedding(t, spec.time_embedding, x.shape[0])], axis=1)
    activation = ACTIVATIONS[spec.activation]
    for layer in range(spec.layers):
        weight, bias = params[f"w{layer}"], params[f"b{layer}"]
        if weight.shape != (spec.fan_in(layer), spec.widths[layer + 1]):
            raise ContractError(f"layer {layer} weight has shape {weight.shape}")
        x = T.matmul(x, weight) + bias
        if layer < spec.layers - 1:
            x = activation(x)
    return x


def copy_params(params: Params) -> Params:
    return {key: Tensor(np.array(value.data), name=key) for key, value in params.items()}
