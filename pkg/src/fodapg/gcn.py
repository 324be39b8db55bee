"""Graph convolution over the self-loop renormalized adjacency.

Each layer computes act(A_hat @ H @ W). The adjacency is a constant; only
the per-layer weights learn. Width goes node_dim -> d_l at the first layer
and stays d_l after that.
"""

from __future__ import annotations

import numpy as np

from . import ndcore as nd
from .corpus import philox
from .errors import ConfigError, ShapeError

_ACTS = {"relu": nd.relu, "tanh": nd.tanh}


def layer_names(layers: int, prefix: str = "gcn.") -> list:
    return [f"{prefix}l{i}.W" for i in range(layers)]


def init_gcn_params(store: nd.ParamStore, node_dim: int, d_l: int, layers: int,
                    seed: int, prefix: str = "gcn.") -> list:
    """Add per-layer weights (fan-in scaled gaussians); returns their names."""
    if layers < 1:
        raise ConfigError("gcn needs at least one layer")
    rng = philox("gcn-init", seed)
    names = layer_names(layers, prefix)
    d_in = node_dim
    for name in names:
        store.add(name, rng.normal(size=(d_in, d_l)) / np.sqrt(d_in))
        d_in = d_l
    return names


def gcn_forward(h0, a_hat, store: nd.ParamStore, layers: int, activation: str,
                prefix: str = "gcn.") -> nd.Tensor:
    """Run the stack; h0 and a_hat may be arrays or Tensors."""
    if activation not in _ACTS:
        raise ConfigError(f"unknown activation {activation!r}")
    act = _ACTS[activation]
    h = h0 if isinstance(h0, nd.Tensor) else nd.const(h0, name="gcn.h0")
    a = a_hat if isinstance(a_hat, nd.Tensor) else nd.const(a_hat, name="gcn.a_hat")
    if a.v.shape[0] != a.v.shape[1] or a.v.shape[0] != h.v.shape[0]:
        raise ShapeError(f"adjacency {a.v.shape} vs features {h.v.shape}")
    for name in layer_names(layers, prefix):
        h = act(nd.matmul(nd.matmul(a, h), store.get(name)))
    return h
