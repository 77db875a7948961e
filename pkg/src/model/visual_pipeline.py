"""
Image side: two-level projection, separate relations (SSR), joint relations (JSR)
and the gated-fusion tree producing the final image representation.
"""

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from model import diffcore as dc
from model.diffcore import BatchNormState, Value
from model.errors import ArityMismatch, ConfigError, ShapeMismatch
from model.relgraph import GatModule
from utils.logger import setup_logger

logger = setup_logger(__name__)

JSR_HEAD_COUNTS = (1, 2, 4)


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Value:
    bound = 1.0 / math.sqrt(fan_in)
    return dc.parameter(rng.uniform(-bound, bound, size=shape), name=name)


class ProjectionParams:
    """Fully-connected maps of the global (W_f, b_f) and regional (W_r, b_r) paths."""

    def __init__(self, W_f: Optional[Value], b_f: Optional[Value],
                 W_r: Optional[Value], b_r: Optional[Value]):
        self.W_f, self.b_f, self.W_r, self.b_r = W_f, b_f, W_r, b_r

    @classmethod
    def create(cls, feature_dim: int, dim: int, rng: np.random.Generator,
               use_global: bool = True, use_regional: bool = True) -> "ProjectionParams":
        W_f = _uniform(rng, feature_dim, (feature_dim, dim), "proj.W_f") if use_global else None
        b_f = dc.parameter(np.zeros(dim), name="proj.b_f") if use_global else None
        W_r = _uniform(rng, feature_dim, (feature_dim, dim), "proj.W_r") if use_regional else None
        b_r = dc.parameter(np.zeros(dim), name="proj.b_r") if use_regional else None
        return cls(W_f, b_f, W_r, b_r)

    def named_parameters(self) -> Dict[str, Value]:
        return {v.name: v for v in (self.W_f, self.b_f, self.W_r, self.b_r) if v is not None}


class FusionLayer:
    """One gated fusion layer: W_1, W_2 project the inputs, U_1, U_2 drive the gate."""

    def __init__(self, W_1: Value, W_2: Value, U_1: Value, U_2: Value):
        self.W_1, self.W_2, self.U_1, self.U_2 = W_1, W_2, U_1, U_2

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, name: str) -> "FusionLayer":
        return cls(*(_uniform(rng, dim, (dim, dim), f"{name}.{tag}") for tag in ("W_1", "W_2", "U_1", "U_2")))

    def named_parameters(self) -> Dict[str, Value]:
        return {v.name: v for v in (self.W_1, self.W_2, self.U_1, self.U_2)}


class FusionParams:
    """K - 1 fusion layers; for K = 4 the pairing is (1, 2), (3, 4), then both results."""

    def __init__(self, layers: List[FusionLayer]):
        self.layers = layers

    @classmethod
    def create(cls, K: int, dim: int, rng: np.random.Generator) -> "FusionParams":
        if K not in JSR_HEAD_COUNTS:
            raise ArityMismatch(f"K must be one of {JSR_HEAD_COUNTS}, got {K}")
        return cls([FusionLayer.create(dim, rng, name=f"fusion.{i}") for i in range(K - 1)])

    def named_parameters(self) -> Dict[str, Value]:
        params: Dict[str, Value] = {}
        for layer in self.layers:
            params.update(layer.named_parameters())
        return params


class JsrParams:
    """K independent GATs over the joint global + regional node set."""

    def __init__(self, gats: List[GatModule]):
        if len(gats) not in JSR_HEAD_COUNTS:
            raise ArityMismatch(f"K must be one of {JSR_HEAD_COUNTS}, got {len(gats)}")
        self.gats = gats

    @property
    def K(self) -> int:
        return len(self.gats)

    @classmethod
    def create(cls, K: int, dim: int, heads: int, depth: int, rng: np.random.Generator,
               use_batchnorm: bool = True, bn_momentum: float = 0.1,
               bn_epsilon: float = 1e-5) -> "JsrParams":
        if K not in JSR_HEAD_COUNTS:
            raise ArityMismatch(f"K must be one of {JSR_HEAD_COUNTS}, got {K}")
        return cls([
            GatModule.create(dim, heads, depth, rng, use_batchnorm, bn_momentum, bn_epsilon,
                             name=f"jsr.{k}")
            for k in range(K)
        ])

    def named_parameters(self) -> Dict[str, Value]:
        params: Dict[str, Value] = {}
        for gat in self.gats:
            params.update(gat.named_parameters())
        return params

    def named_batchnorms(self) -> Dict[str, BatchNormState]:
        states: Dict[str, BatchNormState] = {}
        for gat in self.gats:
            states.update(gat.named_batchnorms())
        return states


# -------------------------------------------------------------------------
# Operations
# -------------------------------------------------------------------------

def project_features(fs, p: ProjectionParams) -> Tuple[Optional[Value], Optional[Value]]:
    """
    Embeds both feature levels into the shared D_e space: V_F = F W_f + b_f, V_R = R W_r + b_r.

    Args:
        fs: Anything with F and R arrays, single (n, D_o) / (k, D_o) or batched.
        p: Projection learnables; a disabled path yields None.
    """
    V_F = dc.linear(dc.as_value(fs.F), p.W_f, p.b_f) if p.W_f is not None else None
    V_R = dc.linear(dc.as_value(fs.R), p.W_r, p.b_r) if p.W_r is not None else None
    return V_F, V_R


def ssr_forward(V_F: Value, V_R: Value, gat_F: GatModule, gat_R: GatModule,
                mode: str) -> Tuple[Value, Value]:
    """Separate relations: independent GAT passes over the global and regional graphs."""
    return gat_F.forward(V_F, mode), gat_R.forward(V_R, mode)


def jsr_forward(V_F: Value, V_R: Value, jp: JsrParams, mode: str) -> List[Value]:
    """
    Joint relations: V_U = concat of both node sets; one mean-pooled output per GAT_k.
    """
    if V_F.shape[-1] != V_R.shape[-1] or V_F.data.ndim != V_R.data.ndim:
        raise ShapeMismatch(f"cannot join node sets {V_F.shape} and {V_R.shape}")
    V_U = dc.concat_nodes([V_F, V_R])
    return [dc.mean_pool_nodes(gat.forward(V_U, mode)) for gat in jp.gats]


def gated_fuse(a: Value, b: Value, layer: FusionLayer) -> Value:
    """
    t = sigmoid(V1 U_1 + V2 U_2) with V1 = a W_1, V2 = b W_2; returns t * V1 + (1 - t) * V2.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"gated fusion inputs differ: {a.shape} vs {b.shape}")
    v1 = dc.linear(a, layer.W_1)
    v2 = dc.linear(b, layer.W_2)
    gate = dc.sigmoid(dc.linear(v1, layer.U_1) + dc.linear(v2, layer.U_2))
    return gate * v1 + (1.0 - gate) * v2


def fuse_tree(V_C: List[Value], fp: FusionParams) -> Value:
    """K = 1: identity; K = 2: one fusion; K = 4: F_3(F_1(v1, v2), F_2(v3, v4))."""
    K = len(V_C)
    if len(fp.layers) != K - 1 or K not in JSR_HEAD_COUNTS:
        logger.error(f"Fusion tree with {len(fp.layers)} layers cannot merge {K} vectors")
        raise ArityMismatch(f"{K} vectors need {K - 1} fusion layers, got {len(fp.layers)}")
    if K == 1:
        return V_C[0]
    if K == 2:
        return gated_fuse(V_C[0], V_C[1], fp.layers[0])
    left = gated_fuse(V_C[0], V_C[1], fp.layers[0])
    right = gated_fuse(V_C[2], V_C[3], fp.layers[1])
    return gated_fuse(left, right, fp.layers[2])


class VisualEncoder:
    """
    Wires projection, SSR, JSR and fusion according to the path/module toggles.

    Reduced wirings:
        one path, no SSR      mean of projected nodes
        one path, SSR         mean of GAT output
        two paths, no JSR     gated fusion of the two path means
        two paths, JSR        fusion tree over the K joint outputs (SSR optional)
    """

    def __init__(self, projection: ProjectionParams, gat_F: Optional[GatModule],
                 gat_R: Optional[GatModule], jsr: Optional[JsrParams],
                 fusion: Optional[FusionParams], path_fusion: Optional[FusionLayer]):
        self.projection = projection
        self.gat_F = gat_F
        self.gat_R = gat_R
        self.jsr = jsr
        self.fusion = fusion
        self.path_fusion = path_fusion

    @property
    def use_global(self) -> bool:
        return self.projection.W_f is not None

    @property
    def use_regional(self) -> bool:
        return self.projection.W_r is not None

    @classmethod
    def create(cls, cfg, rng: np.random.Generator) -> "VisualEncoder":
        """Builds learnables from a ModelConfig-like object."""
        if not (cfg.use_global_path or cfg.use_regional_path):
            raise ConfigError("at least one visual path must be enabled")
        dual = cfg.use_global_path and cfg.use_regional_path
        if cfg.use_jsr and not dual:
            raise ConfigError("the joint relations module needs both visual paths")

        bn = dict(use_batchnorm=cfg.use_batchnorm, bn_momentum=cfg.bn_momentum,
                  bn_epsilon=cfg.bn_epsilon)
        projection = ProjectionParams.create(cfg.feature_dim, cfg.embed_dim, rng,
                                             cfg.use_global_path, cfg.use_regional_path)
        gat_F = gat_R = None
        if cfg.use_ssr and cfg.use_global_path:
            gat_F = GatModule.create(cfg.embed_dim, cfg.heads, cfg.gat_depth, rng, name="ssr.global", **bn)
        if cfg.use_ssr and cfg.use_regional_path:
            gat_R = GatModule.create(cfg.embed_dim, cfg.heads, cfg.gat_depth, rng, name="ssr.regional", **bn)
        jsr = fusion = path_fusion = None
        if cfg.use_jsr:
            jsr = JsrParams.create(cfg.K, cfg.embed_dim, cfg.heads, cfg.gat_depth, rng, **bn)
            fusion = FusionParams.create(cfg.K, cfg.embed_dim, rng)
        elif dual:
            path_fusion = FusionLayer.create(cfg.embed_dim, rng, name="path_fusion")
        return cls(projection, gat_F, gat_R, jsr, fusion, path_fusion)

    def node_features(self, batch, mode: str) -> Tuple[Optional[Value], Optional[Value]]:
        """Projected, and when SSR is on relation-enhanced, node sets of both paths."""
        V_F, V_R = project_features(batch, self.projection)
        if self.gat_F is not None and self.gat_R is not None:
            return ssr_forward(V_F, V_R, self.gat_F, self.gat_R, mode)
        if V_F is not None and self.gat_F is not None:
            V_F = self.gat_F.forward(V_F, mode)
        if V_R is not None and self.gat_R is not None:
            V_R = self.gat_R.forward(V_R, mode)
        return V_F, V_R

    def encode(self, batch, mode: str) -> Value:
        """Raw (unnormalized) image representations, (B, D_e) for a batch."""
        V_F, V_R = self.node_features(batch, mode)
        if self.jsr is not None:
            return fuse_tree(jsr_forward(V_F, V_R, self.jsr, mode), self.fusion)
        if self.path_fusion is not None:
            return gated_fuse(dc.mean_pool_nodes(V_F), dc.mean_pool_nodes(V_R), self.path_fusion)
        return dc.mean_pool_nodes(V_F if V_F is not None else V_R)

    def named_parameters(self) -> Dict[str, Value]:
        params = self.projection.named_parameters()
        for part in (self.gat_F, self.gat_R, self.jsr, self.fusion, self.path_fusion):
            if part is not None:
                params.update(part.named_parameters())
        return params

    def named_batchnorms(self) -> Dict[str, BatchNormState]:
        states: Dict[str, BatchNormState] = {}
        for part in (self.gat_F, self.gat_R, self.jsr):
            if part is not None:
                states.update(part.named_batchnorms())
        return states
