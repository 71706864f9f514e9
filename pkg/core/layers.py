"""
Shared neural building blocks: Glorot initialisation and tanh perceptrons.

Parameters are stored in a flat dict keyed by hierarchical ids
("<prefix>/layer<i>/weight", "<prefix>/layer<i>/bias").
"""
from typing import Dict, List, Sequence

import numpy as np

from core.autodiff import Graph, Node, Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_perceptron(
    rng: np.random.Generator,
    prefix: str,
    sizes: Sequence[int],
) -> Dict[str, Tensor]:
    """
    Create weights for a perceptron with layer widths `sizes` (input first, output last).

    Args:
        rng: seeded generator
        prefix: parameter id prefix, e.g. "user_net"
        sizes: [in, hidden..., out]

    Returns:
        parameter id -> Tensor (Glorot-uniform weights, zero biases)
    """
    params: Dict[str, Tensor] = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}/layer{i}/weight"] = Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True)
        params[f"{prefix}/layer{i}/bias"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return params


def perceptron_shapes(prefix: str, sizes: Sequence[int]) -> Dict[str, tuple]:
    shapes = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}/layer{i}/weight"] = (fan_in, fan_out)
        shapes[f"{prefix}/layer{i}/bias"] = (fan_out,)
    return shapes


def perceptron(g: Graph, prefix: str, x: Node, num_layers: int) -> Node:
    """tanh between layers, linear output."""
    h = x
    for i in range(num_layers):
        h = g.add(g.matmul(h, g.param(f"{prefix}/layer{i}/weight")), g.param(f"{prefix}/layer{i}/bias"))
        if i < num_layers - 1:
            h = g.tanh(h)
    return h


def layer_sizes(in_dim: int, hidden: Sequence[int], out_dim: int) -> List[int]:
    return [in_dim, *hidden, out_dim]
