"""
The full two-branch model: visual encoder, text encoder and their learnables.
"""

from typing import Dict, Sequence

import numpy as np

from model import diffcore as dc
from model.diffcore import BatchNormState, Value
from model.errors import ConfigError, ShapeMismatch
from model.featurestore import FeatureBatch
from model.text_pipeline import TextParams, encode_texts
from model.visual_pipeline import VisualEncoder
from utils.logger import setup_logger

logger = setup_logger(__name__)


class DsranModel:
    """Holds every learnable and exposes the two encoders."""

    def __init__(self, cfg, visual: VisualEncoder, text: TextParams):
        self.cfg = cfg
        self.visual = visual
        self.text = text
        self._params = self._collect_parameters()

    @classmethod
    def create(cls, cfg, seed: int) -> "DsranModel":
        """
        Initializes all learnables from one seed.

        Args:
            cfg: ModelConfig with feature_dim and vocab_size resolved.
            seed: Initialization seed.
        """
        if cfg.feature_dim is None or cfg.vocab_size is None:
            raise ConfigError("feature_dim and vocab_size must be resolved before building the model")
        rng = np.random.default_rng(seed)
        visual = VisualEncoder.create(cfg, rng)
        text = TextParams.create(cfg.vocab_size, cfg.word_dim, cfg.embed_dim, cfg.heads,
                                 cfg.gat_depth, rng, cfg.use_batchnorm, cfg.bn_momentum,
                                 cfg.bn_epsilon)
        model = cls(cfg, visual, text)
        logger.debug(f"Built model with {model.parameter_count()} learnable scalars "
                     f"(K={cfg.K}, H={cfg.heads}, D_e={cfg.embed_dim})")
        return model

    def _collect_parameters(self) -> Dict[str, Value]:
        params: Dict[str, Value] = {}
        for part in (self.visual.named_parameters(), self.text.named_parameters()):
            for name, value in part.items():
                if name in params:
                    raise ShapeMismatch(f"duplicate parameter name '{name}'")
                params[name] = value
        return dict(sorted(params.items()))

    def named_parameters(self) -> Dict[str, Value]:
        return self._params

    def named_batchnorms(self) -> Dict[str, BatchNormState]:
        states = dict(self.visual.named_batchnorms())
        states.update(self.text.named_batchnorms())
        return dict(sorted(states.items()))

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def encode_images(self, batch: FeatureBatch, mode: str) -> Value:
        """(B, D_e) raw image representations."""
        reps = self.visual.encode(batch, mode)
        if self.cfg.inject_gradient_fault:
            reps = dc.faulty_identity(reps)
        return reps

    def encode_captions(self, captions: Sequence[np.ndarray], mode: str) -> Value:
        """(B, D_e) raw caption representations."""
        return encode_texts(captions, self.text, mode)

    # -- State snapshots --

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every learnable plus BN running statistics."""
        state = {name: p.data.copy() for name, p in self._params.items()}
        for name, bn in self.named_batchnorms().items():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ShapeMismatch(f"state does not match model (missing {missing[:3]}, extra {extra[:3]})")
        for name, arr in state.items():
            if arr.shape != expected[name].shape:
                raise ShapeMismatch(f"'{name}': stored shape {arr.shape}, model shape {expected[name].shape}")
        for name, p in self._params.items():
            p.data[...] = state[name]
        for name, bn in self.named_batchnorms().items():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)
