"""
Text side: word embedding lookup -> projection to D_e -> textual graph -> GAT -> mean pooling.

The trainable embedding table stands in for a pretrained word encoder, so the
encoder is order-free: two captions holding the same words encode identically.
"""

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from model import diffcore as dc
from model.diffcore import BatchNormState, Value
from model.errors import BadToken, EmptyCaption
from model.featurestore import caption_length
from model.relgraph import GatModule
from utils.logger import setup_logger

logger = setup_logger(__name__)


class TextParams:
    """Embedding table C, projection W_c / b and the textual GAT."""

    def __init__(self, embedding: Value, W_c: Value, b: Value, gat_T: GatModule):
        self.embedding = embedding
        self.W_c = W_c
        self.b = b
        self.gat_T = gat_T

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @classmethod
    def create(cls, vocab_size: int, word_dim: int, dim: int, heads: int, depth: int,
               rng: np.random.Generator, use_batchnorm: bool = True,
               bn_momentum: float = 0.1, bn_epsilon: float = 1e-5) -> "TextParams":
        bound = 1.0 / math.sqrt(word_dim)
        return cls(
            embedding=dc.parameter(rng.uniform(-1.0, 1.0, size=(vocab_size, word_dim)), name="text.embedding"),
            W_c=dc.parameter(rng.uniform(-bound, bound, size=(word_dim, dim)), name="text.W_c"),
            b=dc.parameter(np.zeros(dim), name="text.b"),
            gat_T=GatModule.create(dim, heads, depth, rng, use_batchnorm, bn_momentum,
                                   bn_epsilon, name="text.gat"),
        )

    def named_parameters(self) -> Dict[str, Value]:
        params = {v.name: v for v in (self.embedding, self.W_c, self.b)}
        params.update(self.gat_T.named_parameters())
        return params

    def named_batchnorms(self) -> Dict[str, BatchNormState]:
        return self.gat_T.named_batchnorms()


def pad_captions(captions: Sequence[np.ndarray], vocab_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Truncates each caption at its first padding id and pads the batch to its longest caption.

    Returns:
        (ids, mask): (B, L_max) int64 ids with padding 0 and the boolean mask of real words.

    Raises:
        EmptyCaption: If a caption has no word before padding.
        BadToken: If an id is negative or >= vocab_size.
    """
    trimmed: List[np.ndarray] = []
    for i, tokens in enumerate(captions):
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        length = caption_length(tokens)
        if length == 0:
            logger.error(f"Caption {i} has no words")
            raise EmptyCaption(f"caption {i} is empty")
        words = tokens[:length]
        if np.any(words < 0) or np.any(words >= vocab_size):
            logger.error(f"Caption {i} holds an id outside [1, {vocab_size})")
            raise BadToken(f"caption {i}: token id outside vocabulary of size {vocab_size}")
        trimmed.append(words)

    longest = max(len(t) for t in trimmed)
    ids = np.zeros((len(trimmed), longest), dtype=np.int64)
    mask = np.zeros((len(trimmed), longest), dtype=bool)
    for i, words in enumerate(trimmed):
        ids[i, :len(words)] = words
        mask[i, :len(words)] = True
    return ids, mask


def encode_texts(captions: Sequence[np.ndarray], tp: TextParams, mode: str) -> Value:
    """Encodes a batch of captions into (B, D_e) raw text representations."""
    ids, mask = pad_captions(captions, tp.vocab_size)
    words = dc.take_rows(tp.embedding, ids)
    projected = dc.linear(words, tp.W_c, tp.b)
    enhanced = tp.gat_T.forward(projected, mode, mask)
    return dc.mean_pool_nodes(enhanced, mask)


def encode_text(tokens: np.ndarray, tp: TextParams, mode: str) -> Value:
    """
    Encodes one caption into T: mean over words of GAT(W_c C + b).

    Args:
        tokens: Word ids; anything from the first padding id on is ignored.
        mode: 'training' or 'eval'. Training mode with a one-word caption has no
              batch statistics and raises DegenerateBatch.
    """
    out = encode_texts([tokens], tp, mode)
    return dc.reshape(out, (out.shape[-1],))
