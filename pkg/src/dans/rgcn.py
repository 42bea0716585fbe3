"""Entity encoder: stacked relational graph convolutions.

Each layer computes, per entity, the relu of a self-term plus the sum over
directed relations of the mean of neighbor embeddings times that
relation's weight matrix.  The neighborhood structure is static during
training, so it is compiled once into an :class:`AggregationPlan` (a
sparse mean-pooling matrix plus per-relation row groups) and the whole
mix runs as one fused differentiable op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .data import TripletStore
from .errors import ShapeError


@dataclass
class AggregationPlan:
    """Compiled neighborhood structure of a train graph.

    ``matrix`` maps entity embeddings to per-(entity, directed relation)
    neighbor means; ``groups`` lists, for every directed relation with at
    least one edge, the slice of mean rows and the target entity rows they
    feed.
    """

    matrix: sp.csr_matrix                      # (n_pairs, n_entities)
    groups: list[tuple[int, slice, np.ndarray]]
    n_pairs: int
    n_entities: int
    n_directed: int


def build_plan(store: TripletStore) -> AggregationPlan:
    rel, target, source = store.adjacency_arrays()
    n_entities = store.n_entities
    n_directed = 2 * store.n_relations
    if len(rel) == 0:
        matrix = sp.csr_matrix((0, n_entities), dtype=np.float32)
        return AggregationPlan(matrix, [], 0, n_entities, n_directed)

    key = rel * n_entities + target
    starts = np.concatenate(([0], np.flatnonzero(np.diff(key)) + 1))
    counts = np.diff(np.concatenate((starts, [len(key)])))
    pair_of_edge = np.repeat(np.arange(len(starts)), counts)
    weights = (1.0 / counts[pair_of_edge]).astype(np.float32)
    matrix = sp.csr_matrix((weights, (pair_of_edge, source)),
                           shape=(len(starts), n_entities))

    pair_rel = rel[starts]
    pair_target = target[starts]
    groups = []
    rel_starts = np.concatenate(([0], np.flatnonzero(np.diff(pair_rel)) + 1,
                                 [len(pair_rel)]))
    for a, b in zip(rel_starts[:-1], rel_starts[1:]):
        groups.append((int(pair_rel[a]), slice(int(a), int(b)),
                       pair_target[a:b].copy()))
    return AggregationPlan(matrix, groups, len(starts), n_entities, n_directed)


@dataclass
class RgcnParams:
    """Per-layer relation and self-loop weights plus free input embeddings."""

    input_embeddings: ad.Tensor          # (n_entities, dims[0])
    rel_weights: list[ad.Tensor]         # per layer: (2*n_relations, d_in, d_out)
    self_weights: list[ad.Tensor]        # per layer: (d_in, d_out)
    layer_dims: list[int]

    @property
    def n_layers(self) -> int:
        return len(self.rel_weights)

    def named_tensors(self) -> list[tuple[str, ad.Tensor]]:
        named = [("encoder.input_embeddings", self.input_embeddings)]
        for l, (w, s) in enumerate(zip(self.rel_weights, self.self_weights)):
            named.append((f"encoder.layer{l}.rel_weight", w))
            named.append((f"encoder.layer{l}.self_weight", s))
        return named


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_rgcn_params(store: TripletStore, layer_dims: list[int],
                     rng: np.random.Generator) -> RgcnParams:
    if len(layer_dims) < 1 or any(d <= 0 for d in layer_dims):
        raise ShapeError("rgcn_dims", layer_dims)
    inputs = ad.Tensor(uniform_init(rng, (store.n_entities, layer_dims[0]),
                                    layer_dims[0]), requires_grad=True)
    rel_weights, self_weights = [], []
    n_directed = 2 * store.n_relations
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        rel_weights.append(ad.Tensor(
            uniform_init(rng, (n_directed, d_in, d_out), d_in), requires_grad=True))
        self_weights.append(ad.Tensor(
            uniform_init(rng, (d_in, d_out), d_in), requires_grad=True))
    return RgcnParams(inputs, rel_weights, self_weights, list(layer_dims))


def relational_mix(prev: ad.Tensor, weights: ad.Tensor,
                   plan: AggregationPlan) -> ad.Tensor:
    """Sum over directed relations of neighbor means times relation weights."""
    if weights.shape[0] != plan.n_directed or prev.shape[1] != weights.shape[1]:
        raise ShapeError("relational_mix", prev.shape, weights.shape)
    d_out = weights.shape[2]
    means = plan.matrix @ prev.array
    out = np.zeros((plan.n_entities, d_out),
                   dtype=np.result_type(prev.array.dtype, weights.array.dtype))
    for r, rows, targets in plan.groups:
        out[targets] += means[rows] @ weights.array[r]

    def bwd(g, needs):
        d_prev = d_weights = None
        if needs[1]:
            d_weights = np.zeros_like(weights.array)
            for r, rows, targets in plan.groups:
                d_weights[r] = means[rows].T @ g[targets]
        if needs[0]:
            d_means = np.empty_like(means)
            for r, rows, targets in plan.groups:
                d_means[rows] = g[targets] @ weights.array[r].T
            d_prev = plan.matrix.T @ d_means
        return d_prev, d_weights

    return ad.custom_op("relational_mix", (prev, weights), out, bwd)


def layer_forward(prev: ad.Tensor, layer: int, plan: AggregationPlan,
                  params: RgcnParams) -> ad.Tensor:
    if prev.shape[1] != params.layer_dims[layer]:
        raise ShapeError("rgcn_layer", prev.shape,
                         (plan.n_entities, params.layer_dims[layer]))
    mixed = relational_mix(prev, params.rel_weights[layer], plan)
    self_part = ad.matmul(prev, params.self_weights[layer])
    return ad.relu(ad.add(mixed, self_part))


def encode_all(plan: AggregationPlan, params: RgcnParams) -> ad.Tensor:
    """Full-graph forward through every layer; differentiable end to end."""
    h = params.input_embeddings
    for layer in range(params.n_layers):
        h = layer_forward(h, layer, plan, params)
    return h
