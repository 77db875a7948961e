"""
Graph attention over fully-connected node sets.

A graph is a node matrix plus its affinity edges E = V V^T. The edges are
kept for inspection; attention logits come only from the learned query and
key maps. Every op accepts either one graph (N, D) or a padded batch of graphs
(B, N, D) with a (B, N) node mask.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import numpy as np

from model import diffcore as dc
from model.diffcore import BatchNormState, Value
from model.errors import ShapeMismatch
from utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass
class RelGraph:
    nodes: Value
    edges: np.ndarray
    mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.nodes.shape[-2]


def build_graph(V: Union[Value, np.ndarray], mask: Optional[np.ndarray] = None) -> RelGraph:
    """
    Wraps node features into a fully-connected graph with affinity edges.

    Args:
        V: (N, D) or (B, N, D) node features.
        mask: Optional (B, N) boolean mask of real nodes for a padded batch.

    Raises:
        NonFinite: If any node feature is NaN or Inf.
    """
    nodes = dc.as_value(V)
    if nodes.data.ndim not in (2, 3) or nodes.shape[-2] < 1:
        raise ShapeMismatch(f"graph nodes must be (N, D) or (B, N, D) with N >= 1, got {nodes.shape}")
    dc.check_finite(nodes.data, "build_graph")
    edges = np.matmul(nodes.data, np.swapaxes(nodes.data, -1, -2))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != nodes.shape[:-1]:
            raise ShapeMismatch(f"node mask {mask.shape} does not match nodes {nodes.shape}")
    return RelGraph(nodes=nodes, edges=edges, mask=mask)


class GatParams:
    """
    Learnables of one multi-head graph attention layer.

    Per-head query/key/value maps are stored stacked as (H, D_e, d) tensors so
    that all heads run in one batched product; W_q[h] is head h's map.
    """

    def __init__(self, W_q: Value, W_k: Value, W_v: Value, W_o: Value,
                 bn: Optional[BatchNormState]):
        heads, dim, head_dim = W_q.shape
        if dim % heads != 0 or head_dim != dim // heads:
            raise ShapeMismatch(f"head count {heads} does not divide width {dim}")
        for w in (W_k, W_v):
            if w.shape != W_q.shape:
                raise ShapeMismatch(f"per-head maps disagree: {w.shape} vs {W_q.shape}")
        if W_o.shape != (dim, dim):
            raise ShapeMismatch(f"output map must be ({dim}, {dim}), got {W_o.shape}")
        self.W_q, self.W_k, self.W_v, self.W_o = W_q, W_k, W_v, W_o
        self.bn = bn

    @property
    def heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def dim(self) -> int:
        return self.W_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[2]

    @classmethod
    def create(cls, dim: int, heads: int, rng: np.random.Generator,
               use_batchnorm: bool = True, bn_momentum: float = 0.1,
               bn_epsilon: float = 1e-5, name: str = "gat") -> "GatParams":
        if heads < 1 or dim % heads != 0:
            raise ShapeMismatch(f"head count {heads} must divide width {dim}")
        head_dim = dim // heads
        bound = 1.0 / math.sqrt(dim)

        def draw(shape, tag):
            return dc.parameter(rng.uniform(-bound, bound, size=shape), name=f"{name}.{tag}")

        bn = BatchNormState.create(dim, bn_momentum, bn_epsilon, name=f"{name}.bn") if use_batchnorm else None
        return cls(
            W_q=draw((heads, dim, head_dim), "W_q"),
            W_k=draw((heads, dim, head_dim), "W_k"),
            W_v=draw((heads, dim, head_dim), "W_v"),
            W_o=draw((dim, dim), "W_o"),
            bn=bn,
        )

    def named_parameters(self) -> Dict[str, Value]:
        params = {v.name: v for v in (self.W_q, self.W_k, self.W_v, self.W_o)}
        if self.bn is not None:
            params[self.bn.gamma.name] = self.bn.gamma
            params[self.bn.beta.name] = self.bn.beta
        return params

    def named_batchnorms(self) -> Dict[str, BatchNormState]:
        if self.bn is None:
            return {}
        return {self.bn.gamma.name.rsplit(".", 1)[0]: self.bn}


def _as_batch(g: RelGraph):
    nodes = g.nodes
    if nodes.data.ndim == 2:
        return dc.reshape(nodes, (1,) + nodes.shape), (None if g.mask is None else g.mask[None]), True
    return nodes, g.mask, False


def _attention(nodes: Value, mask: Optional[np.ndarray], p: GatParams) -> Value:
    """(B, N, D) nodes -> (B, H, N, N) row-stochastic attention."""
    if nodes.shape[-1] != p.dim:
        logger.error(f"GAT width {p.dim} does not match node width {nodes.shape[-1]}")
        raise ShapeMismatch(f"GAT expects {p.dim}-wide nodes, got {nodes.shape}")
    batch, count, dim = nodes.shape
    expanded = dc.reshape(nodes, (batch, 1, count, dim))
    q = dc.matmul(expanded, p.W_q)
    k = dc.matmul(expanded, p.W_k)
    logits = dc.scaled_dot(q, k, math.sqrt(p.head_dim))
    key_mask = None if mask is None else mask[:, None, None, :]
    return dc.softmax_rows(logits, key_mask)


def attention_coefficients(g: RelGraph, p: GatParams, head: int) -> np.ndarray:
    """
    Attention matrix of one head: alpha[i, j] = softmax_j((W_q v_i) . (W_k v_j) / sqrt(d)).

    Returns:
        (N, N) for a single graph, (B, N, N) for a batch.
    """
    if not 0 <= head < p.heads:
        raise ShapeMismatch(f"head {head} out of range for {p.heads} heads")
    nodes, mask, single = _as_batch(g)
    alpha = _attention(nodes, mask, p).data[:, head]
    return alpha[0] if single else alpha


def gat_forward(g: RelGraph, p: GatParams, mode: str = dc.TRAINING) -> Value:
    """
    One graph attention layer: BN(ReLU(concat_h(sum_j alpha^h_ij W_v^h v_j) W_o)).

    Args:
        g: Single graph or padded batch of graphs.
        p: Layer learnables; p.bn is None when batch normalization is disabled.
        mode: 'training' updates BN running statistics; 'eval' is pure.

    Returns:
        Value with the same shape as g.nodes.
    """
    nodes, mask, single = _as_batch(g)
    batch, count, dim = nodes.shape

    alpha = _attention(nodes, mask, p)
    values = dc.matmul(dc.reshape(nodes, (batch, 1, count, dim)), p.W_v)
    heads = dc.matmul(alpha, values)
    merged = dc.reshape(dc.transpose(heads, (0, 2, 1, 3)), (batch, count, dim))
    out = dc.relu(dc.matmul(merged, p.W_o))
    if p.bn is not None:
        out = dc.batchnorm(out, p.bn, mode, row_mask=mask)
    return dc.reshape(out, (count, dim)) if single else out


class GatModule:
    """A stack of graph attention layers applied in sequence."""

    def __init__(self, layers: List[GatParams]):
        if not layers:
            raise ShapeMismatch("a GAT module needs at least one layer")
        self.layers = layers

    @classmethod
    def create(cls, dim: int, heads: int, depth: int, rng: np.random.Generator,
               use_batchnorm: bool = True, bn_momentum: float = 0.1,
               bn_epsilon: float = 1e-5, name: str = "gat") -> "GatModule":
        return cls([
            GatParams.create(dim, heads, rng, use_batchnorm, bn_momentum, bn_epsilon,
                             name=f"{name}.{i}")
            for i in range(depth)
        ])

    def forward(self, nodes: Value, mode: str, mask: Optional[np.ndarray] = None) -> Value:
        out = nodes
        for layer in self.layers:
            out = gat_forward(build_graph(out, mask), layer, mode)
        return out

    def named_parameters(self) -> Dict[str, Value]:
        params: Dict[str, Value] = {}
        for layer in self.layers:
            params.update(layer.named_parameters())
        return params

    def named_batchnorms(self) -> Dict[str, BatchNormState]:
        states: Dict[str, BatchNormState] = {}
        for layer in self.layers:
            states.update(layer.named_batchnorms())
        return states
