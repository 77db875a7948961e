"""
Retrieval evaluation over a similarity matrix: R@K, Rsum, image-to-text
re-ranking, score ensembling, node attention rankings and fold averaging.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from model.errors import BadLambda, ConfigError, EmptyMatrix, NonFinite, ShapeMismatch
from utils.logger import setup_logger

logger = setup_logger(__name__)

I2T = "i2t"
T2I = "t2i"
RECALL_KS = (1, 5, 10)


def _descending(scores: np.ndarray) -> np.ndarray:
    """Row-wise descending order; ties keep the lower index first."""
    return np.argsort(-scores, axis=-1, kind="stable")


@dataclass
class SimilarityMatrix:
    """
    Scores of every image against every text. Text j belongs to image
    j // captions_per_image. An optional i2t_order overrides the row ranking
    produced by the scores (set by re-ranking).
    """

    scores: np.ndarray
    captions_per_image: int = 5
    i2t_order: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ShapeMismatch(f"similarity matrix must be 2-D, got shape {self.scores.shape}")
        n_images, n_texts = self.scores.shape
        if self.captions_per_image < 1 or n_texts != n_images * self.captions_per_image:
            raise ShapeMismatch(
                f"{n_texts} texts do not match {n_images} images x {self.captions_per_image} captions")
        if not np.all(np.isfinite(self.scores)):
            raise NonFinite("similarity matrix contains NaN or Inf")
        if self.i2t_order is not None and self.i2t_order.shape != self.scores.shape:
            raise ShapeMismatch("i2t_order must have the shape of the scores")

    @property
    def n_images(self) -> int:
        return self.scores.shape[0]

    @property
    def n_texts(self) -> int:
        return self.scores.shape[1]

    def i2t_rankings(self) -> np.ndarray:
        """(N_images, N_texts) text indices per image query, best first."""
        if self.i2t_order is not None:
            return self.i2t_order
        return _descending(self.scores)

    def t2i_rankings(self) -> np.ndarray:
        """(N_texts, N_images) image indices per text query, best first."""
        return _descending(self.scores.T)

    def image_of_text(self, text_index: int) -> int:
        return text_index // self.captions_per_image

    def __neg__(self) -> "SimilarityMatrix":
        return SimilarityMatrix(-self.scores, self.captions_per_image)


@dataclass
class RetrievalReport:
    """Recall percentages; i2t is image query -> texts, t2i is text query -> images."""

    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float

    def recalls(self) -> List[float]:
        return [self.i2t_r1, self.i2t_r5, self.i2t_r10, self.t2i_r1, self.t2i_r5, self.t2i_r10]

    @property
    def rsum(self) -> float:
        return rsum(self.recalls())

    def to_dict(self) -> Dict[str, float]:
        return {
            "i2t_r1": self.i2t_r1, "i2t_r5": self.i2t_r5, "i2t_r10": self.i2t_r10,
            "t2i_r1": self.t2i_r1, "t2i_r5": self.t2i_r5, "t2i_r10": self.t2i_r10,
            "rsum": self.rsum,
        }


def rsum(recalls: Sequence[float]) -> float:
    """Sum of the six recall values."""
    if len(recalls) != 6:
        raise ShapeMismatch(f"rsum takes six recall values, got {len(recalls)}")
    return round(math.fsum(recalls), 9)


def recall_at_k(S: SimilarityMatrix, direction: str, K: int) -> float:
    """
    Percentage of queries with a ground-truth item in their top K.

    Args:
        S: Similarity matrix.
        direction: I2T or T2I.
        K: Cut-off, >= 1.

    Raises:
        EmptyMatrix: If S has no rows or columns.
    """
    if S.scores.size == 0:
        raise EmptyMatrix("cannot evaluate an empty similarity matrix")
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")

    if direction == I2T:
        top = S.i2t_rankings()[:, :K] // S.captions_per_image
        hits = np.any(top == np.arange(S.n_images)[:, None], axis=1)
    elif direction == T2I:
        top = S.t2i_rankings()[:, :K]
        truth = np.arange(S.n_texts) // S.captions_per_image
        hits = np.any(top == truth[:, None], axis=1)
    else:
        raise ConfigError(f"direction must be '{I2T}' or '{T2I}', got '{direction}'")
    return 100.0 * np.count_nonzero(hits) / hits.shape[0]


def evaluate(S: SimilarityMatrix) -> RetrievalReport:
    values = [recall_at_k(S, d, k) for d in (I2T, T2I) for k in RECALL_KS]
    return RetrievalReport(*values)


def rerank_i2t(S: SimilarityMatrix, top_n: int = 15, lam: float = 0.5) -> SimilarityMatrix:
    """
    Re-orders each image query's top-N texts by lam * r1 + (1 - lam) * r2, where
    r1 is the text's rank in the image's row and r2 the image's rank in the text's
    column (both 1-based). Ties fall back to the original score, then text index.

    Returns:
        SimilarityMatrix: Same scores, with the new image-to-text order attached.

    Raises:
        BadLambda: If lam lies outside [0, 1].
    """
    if not 0.0 <= lam <= 1.0:
        logger.error(f"Re-rank weight out of range: {lam}")
        raise BadLambda(f"lambda must lie in [0, 1], got {lam}")
    if top_n < 1:
        raise ConfigError(f"top_n must be >= 1, got {top_n}")
    if S.scores.size == 0:
        raise EmptyMatrix("cannot re-rank an empty similarity matrix")

    order = S.i2t_rankings().copy()
    n = min(top_n, S.n_texts)

    # column_rank[c, i]: 1-based position of image i when text c is the query
    t2i = S.t2i_rankings()
    column_rank = np.empty_like(t2i)
    column_rank[np.arange(S.n_texts)[:, None], t2i] = np.arange(1, S.n_images + 1)

    r1 = np.arange(1, n + 1, dtype=np.float64)
    for i in range(S.n_images):
        candidates = order[i, :n]
        r2 = column_rank[candidates, i].astype(np.float64)
        combined = lam * r1 + (1.0 - lam) * r2
        resorted = np.lexsort((candidates, -S.scores[i, candidates], combined))
        order[i, :n] = candidates[resorted]

    logger.debug(f"Re-ranked {S.n_images} image queries (top_n={n}, lambda={lam})")
    return SimilarityMatrix(S.scores.copy(), S.captions_per_image, i2t_order=order)


def ensemble(S_a: SimilarityMatrix, S_b: SimilarityMatrix) -> SimilarityMatrix:
    """Elementwise mean of two models' scores."""
    if S_a.scores.shape != S_b.scores.shape or S_a.captions_per_image != S_b.captions_per_image:
        logger.error(f"Ensemble inputs differ: {S_a.scores.shape} vs {S_b.scores.shape}")
        raise ShapeMismatch("ensembled matrices must share shape and ground truth")
    return SimilarityMatrix((S_a.scores + S_b.scores) / 2.0, S_a.captions_per_image)


def ensemble_all(matrices: Sequence[SimilarityMatrix]) -> SimilarityMatrix:
    """Equal-weight mean over any number of models."""
    if not matrices:
        raise EmptyMatrix("nothing to ensemble")
    if len(matrices) == 1:
        return matrices[0]
    if len(matrices) == 2:
        return ensemble(matrices[0], matrices[1])
    first = matrices[0]
    for other in matrices[1:]:
        if other.scores.shape != first.scores.shape or other.captions_per_image != first.captions_per_image:
            raise ShapeMismatch("ensembled matrices must share shape and ground truth")
    stacked = np.stack([m.scores for m in matrices])
    return SimilarityMatrix(stacked.mean(axis=0), matrices[0].captions_per_image)


def attention_ranking(image_rep: np.ndarray, node_feats: np.ndarray, top: Optional[int] = None) -> List[int]:
    """
    Node indices ordered by descending dot product with the image representation.

    Raises:
        ShapeMismatch: If widths differ or top is outside [1, N].
    """
    image_rep = np.asarray(image_rep, dtype=np.float64)
    node_feats = np.asarray(node_feats, dtype=np.float64)
    if image_rep.ndim != 1 or node_feats.ndim != 2 or node_feats.shape[1] != image_rep.shape[0]:
        raise ShapeMismatch(f"cannot rank nodes {node_feats.shape} against representation {image_rep.shape}")
    count = node_feats.shape[0]
    top = count if top is None else top
    if not 1 <= top <= count:
        raise ShapeMismatch(f"top must lie in [1, {count}], got {top}")
    return _descending(node_feats @ image_rep)[:top].tolist()


def fold_eval(S: SimilarityMatrix, folds: int, rerank: bool = False, top_n: int = 15,
              lam: float = 0.5) -> RetrievalReport:
    """
    Splits the images into equal consecutive folds, evaluates each fold's
    sub-matrix on its own and averages the recalls.
    """
    if S.scores.size == 0:
        raise EmptyMatrix("cannot evaluate an empty similarity matrix")
    if folds < 1 or S.n_images % folds != 0:
        raise ShapeMismatch(f"{S.n_images} images cannot be split into {folds} equal folds")
    size = S.n_images // folds
    cpi = S.captions_per_image
    reports = []
    for f in range(folds):
        sub = SimilarityMatrix(
            S.scores[f * size:(f + 1) * size, f * size * cpi:(f + 1) * size * cpi], cpi)
        if rerank:
            sub = rerank_i2t(sub, top_n, lam)
        reports.append(evaluate(sub).recalls())
    mean = np.mean(np.asarray(reports), axis=0)
    return RetrievalReport(*[float(v) for v in mean])
