"""Four-layer GCN with mean-pool readout and a linear risk head.

Forward and backward passes are written out by hand.  Both operate on a
batch of graphs stacked block-diagonally (see ``graph.block_diagonal``);
the single-graph ``forward``/``backward`` are a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import NumericError, ValidationError
from .graph import NormalizedAdjacency

N_LAYERS = 4
DEFAULT_HIDDEN = 128


@dataclass
class ModelParams:
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    head_weight: np.ndarray
    head_bias: float

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) != N_LAYERS + 1:
            raise ValidationError(f"expected {N_LAYERS + 1} layer dims, got {dims}")
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ValidationError(f"expected {N_LAYERS} weight matrices and bias vectors")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l], dims[l + 1]) or b.shape != (dims[l + 1],):
                raise ValidationError(
                    f"layer {l + 1}: shapes {w.shape}/{b.shape} do not chain with dims {dims}")
        if self.head_weight.shape != (dims[-1],):
            raise ValidationError(f"head weight shape {self.head_weight.shape} != ({dims[-1]},)")
        self.head_bias = float(self.head_bias)

    def arrays(self) -> List[np.ndarray]:
        """Trainable tensors in a fixed order (head bias as a 0-d array)."""
        return [*self.weights, *self.biases, self.head_weight, np.asarray(self.head_bias)]

    @classmethod
    def from_arrays(cls, layer_dims, arrays: Sequence[np.ndarray]) -> "ModelParams":
        w = [np.array(a, dtype=np.float64) for a in arrays[:N_LAYERS]]
        b = [np.array(a, dtype=np.float64) for a in arrays[N_LAYERS:2 * N_LAYERS]]
        return cls(list(layer_dims), w, b, np.array(arrays[-2], dtype=np.float64),
                   float(arrays[-1]))

    def decay_mask(self) -> List[bool]:
        """Which of ``arrays()`` receive weight decay (weights, not biases)."""
        return [True] * N_LAYERS + [False] * N_LAYERS + [True, False]


def _check_dims(layer_dims):
    dims = [int(d) for d in layer_dims]
    if len(dims) != N_LAYERS + 1:
        raise ValidationError(f"need {N_LAYERS + 1} layer dims (input + {N_LAYERS} layers), got {dims}")
    if any(d < 1 for d in dims):
        raise ValidationError(f"layer dims must be positive, got {dims}")
    return dims


def default_dims(input_dim: int, hidden: int = DEFAULT_HIDDEN) -> List[int]:
    return [input_dim] + [hidden] * N_LAYERS


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(layer_dims, seed: int) -> ModelParams:
    dims = _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights = [glorot(rng, dims[l], dims[l + 1], (dims[l], dims[l + 1])) for l in range(N_LAYERS)]
    biases = [np.zeros(dims[l + 1]) for l in range(N_LAYERS)]
    head = glorot(rng, dims[-1], 1, (dims[-1],))
    return ModelParams(dims, weights, biases, head, 0.0)


def gcn_layer_forward(adj: NormalizedAdjacency, h: np.ndarray, w: np.ndarray,
                      b: np.ndarray) -> np.ndarray:
    """``max(0, A_hat @ h @ w + b)``."""
    if h.ndim != 2 or h.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValidationError(f"shape mismatch: h {h.shape}, w {w.shape}, b {b.shape}")
    return np.maximum(adj.matmul(h) @ w + b, 0.0)


def mean_pool(h: np.ndarray) -> np.ndarray:
    if h.shape[0] == 0:
        raise ValidationError("cannot mean-pool zero nodes")
    return h.mean(axis=0)


def segment_mean(h: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    counts = np.diff(offsets)
    if np.any(counts < 1):
        raise ValidationError("cannot mean-pool a graph with zero nodes")
    return np.add.reduceat(h, offsets[:-1], axis=0) / counts[:, None]


@dataclass
class ForwardCache:
    offsets: np.ndarray
    propagated: List[np.ndarray]      # A_hat @ H^(l-1), per layer
    preacts: List[np.ndarray]         # A_hat @ H^(l-1) @ W + b
    activations: List[np.ndarray]     # H^0 .. H^4
    pooled: np.ndarray                # (batch, h4)
    risks: np.ndarray                 # (batch,)


def forward_batch(adj: NormalizedAdjacency, offsets: np.ndarray, x: np.ndarray,
                  params: ModelParams):
    """Risks for every graph in a block-diagonal batch.

    ``offsets[k]:offsets[k+1]`` are the node rows of graph ``k``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (adj.n_nodes, params.layer_dims[0]):
        raise ValidationError(
            f"features {x.shape} do not match graph nodes {adj.n_nodes} "
            f"x input dim {params.layer_dims[0]}")
    if offsets[0] != 0 or offsets[-1] != adj.n_nodes:
        raise ValidationError("segment offsets do not cover the graph")
    h = x
    acts, props, pre = [x], [], []
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            p = adj.matmul(h)
            z = p @ w + b
            h = np.maximum(z, 0.0)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activation in graph layer {l + 1}")
        props.append(p)
        pre.append(z)
        acts.append(h)
    pooled = segment_mean(h, offsets)
    risks = pooled @ params.head_weight + params.head_bias
    if not np.all(np.isfinite(risks)):
        raise NumericError("non-finite risk in head layer")
    return risks, ForwardCache(np.asarray(offsets), props, pre, acts, pooled, risks)


def backward_batch(cache: ForwardCache, adj: NormalizedAdjacency, params: ModelParams,
                   d_risks) -> ModelParams:
    """Gradients of ``sum_k d_risks[k] * risk_k`` w.r.t. every parameter.

    Returned in a ``ModelParams`` container with the same shapes.
    """
    d_risks = np.asarray(d_risks, dtype=np.float64).reshape(-1)
    if d_risks.shape[0] != cache.pooled.shape[0] or len(cache.preacts) != N_LAYERS:
        raise ValidationError("gradient/cache size mismatch")
    if cache.pooled.shape[1] != params.head_weight.shape[0]:
        raise ValidationError("cache does not belong to these parameters")

    g_head_w = cache.pooled.T @ d_risks
    g_head_b = float(d_risks.sum())
    counts = np.diff(cache.offsets)
    d_pooled = np.outer(d_risks / counts, params.head_weight)
    d_h = np.repeat(d_pooled, counts, axis=0)

    g_w: List[np.ndarray] = [None] * N_LAYERS
    g_b: List[np.ndarray] = [None] * N_LAYERS
    for l in reversed(range(N_LAYERS)):
        # ReLU subgradient is 0 at exactly 0
        g = d_h * (cache.preacts[l] > 0.0)
        g_w[l] = cache.propagated[l].T @ g
        g_b[l] = g.sum(axis=0)
        if l > 0:
            # A_hat is symmetric, so A_hat^T @ (.) is another A_hat product
            d_h = adj.matmul(g @ params.weights[l].T)
    return ModelParams(list(params.layer_dims), g_w, g_b, g_head_w, g_head_b)


def forward(adj: NormalizedAdjacency, x: np.ndarray, params: ModelParams):
    """Risk score of a single graph and the cache needed by ``backward``."""
    risks, cache = forward_batch(adj, np.array([0, adj.n_nodes]), x, params)
    return float(risks[0]), cache


def backward(cache: ForwardCache, adj: NormalizedAdjacency, x: np.ndarray,
             params: ModelParams, d_risk: float) -> ModelParams:
    if cache.activations[0].shape != np.shape(x):
        raise ValidationError("cache was computed for different features")
    return backward_batch(cache, adj, params, [d_risk])
