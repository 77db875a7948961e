"""
Cosine similarity and the hinge triplet ranking loss with hardest in-batch negatives.
"""

from dataclasses import dataclass

import numpy as np

from model import diffcore as dc
from model.diffcore import Value
from model.errors import BatchTooSmall, ShapeMismatch, ZeroVector
from utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass
class EmbeddingBatch:
    """L2-normalized image and text representations; row i of each forms a pair."""

    image_reps: Value
    text_reps: Value

    @classmethod
    def from_raw(cls, images: Value, texts: Value) -> "EmbeddingBatch":
        if images.shape != texts.shape:
            raise ShapeMismatch(f"paired batch shapes differ: {images.shape} vs {texts.shape}")
        return cls(dc.l2_normalize_rows(images), dc.l2_normalize_rows(texts))

    def similarity(self) -> Value:
        return dc.matmul(self.image_reps, dc.swap_last(self.text_reps))


def cosine_similarity_matrix(images: np.ndarray, texts: np.ndarray) -> np.ndarray:
    """
    S[i, j] = cos(image_i, text_j).

    Raises:
        ZeroVector: If any row has zero norm.
        ShapeMismatch: If the widths differ.
    """
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if images.ndim != 2 or texts.ndim != 2 or images.shape[1] != texts.shape[1]:
        raise ShapeMismatch(f"cannot compare {images.shape} with {texts.shape}")
    img_norm = np.linalg.norm(images, axis=1, keepdims=True)
    txt_norm = np.linalg.norm(texts, axis=1, keepdims=True)
    if np.any(img_norm == 0) or np.any(txt_norm == 0):
        logger.error("Zero-norm representation in similarity computation")
        raise ZeroVector("cosine similarity undefined for a zero vector")
    return np.clip((images / img_norm) @ (texts / txt_norm).T, -1.0, 1.0)


def triplet_loss_hardest(S: Value, cfg) -> Value:
    """
    Sum (or mean) over queries of
        [margin + S(i, hardest text) - S(i, i)]_+ + [margin + S(hardest image, i) - S(i, i)]_+

    Args:
        S: (B, B) similarity Value with positives on the diagonal.
        cfg: LossConfig (margin, reduction).

    Raises:
        BatchTooSmall: If B < 2.
    """
    if S.data.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeMismatch(f"loss needs a square similarity matrix, got {S.shape}")
    size = S.shape[0]
    if size < 2:
        logger.error(f"Batch of {size} has no negatives")
        raise BatchTooSmall(f"triplet loss needs at least 2 pairs, got {size}")

    # Hardest negatives are picked on values; gradients flow through the picked entries.
    negatives = S.data.copy()
    np.fill_diagonal(negatives, -np.inf)
    hardest_text = np.argmax(negatives, axis=1)
    hardest_image = np.argmax(negatives, axis=0)

    rows = np.arange(size)
    positive = dc.take(S, (rows, rows))
    cost_text = dc.relu(dc.take(S, (rows, hardest_text)) - positive + cfg.margin)
    cost_image = dc.relu(dc.take(S, (hardest_image, rows)) - positive + cfg.margin)
    total = dc.sum_all(cost_text + cost_image)
    if cfg.reduction == "mean":
        return dc.scale(total, 1.0 / size)
    return total
