"""
Training loop: distinct-image mini-batches, hardest-negative triplet loss,
Adam with step decay, per-epoch validation and a final checkpoint.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from model import diffcore as dc
from model.checkpoint import save_checkpoint
from model.dsran import DsranModel
from model.errors import BatchTooSmall, EmptyCaption, EmptyInput, IoFailure, NonFiniteLoss
from model.evalkit import RetrievalReport, SimilarityMatrix, evaluate, rerank_i2t
from model.featurestore import FeatureSet, caption_length, stack_features
from model.matcher import EmbeddingBatch, cosine_similarity_matrix, triplet_loss_hardest
from model.optim import Adam, learning_rate_at
from utils.logger import setup_logger

logger = setup_logger(__name__)

CHECKPOINT_FILENAME = "model.ckpt"
TRAIN_LOG_FILENAME = "train_log.json"


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    learning_rate: float
    val_rsum: Optional[float] = None


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else math.nan

    def epochs_to_reach(self, threshold: float) -> Optional[int]:
        """First epoch whose mean loss fell below threshold, or None."""
        for r in self.records:
            if r.loss < threshold:
                return r.epoch
        return None

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "checkpoint": self.checkpoint}


Batch = List[Tuple[FeatureSet, np.ndarray]]


def _nonempty_captions(fs: FeatureSet) -> List[np.ndarray]:
    return [c for c in fs.captions if caption_length(np.asarray(c)) > 0]


def make_batches(data: Sequence[FeatureSet], batch_size: int, rng: np.random.Generator) -> List[Batch]:
    """
    One epoch of batches: every image appears once, paired with one of its
    captions drawn from rng. A trailing batch of one is merged into its predecessor.
    """
    if len(data) < 2:
        raise BatchTooSmall(f"training needs at least 2 images, got {len(data)}")
    order = rng.permutation(len(data))
    pairs: Batch = []
    for idx in order:
        fs = data[int(idx)]
        captions = _nonempty_captions(fs)
        if not captions:
            raise EmptyCaption(f"image {fs.index} has no non-empty caption")
        pairs.append((fs, captions[int(rng.integers(len(captions)))]))

    batches = [pairs[s:s + batch_size] for s in range(0, len(pairs), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def batches_per_epoch(n_items: int, batch_size: int) -> int:
    count = -(-n_items // batch_size)
    if count > 1 and n_items % batch_size == 1:
        count -= 1
    return count


def batch_loss(model: DsranModel, batch: Batch, loss_cfg, mode: str = dc.TRAINING) -> dc.Value:
    """Forward both encoders over a paired batch and return the triplet loss."""
    images = model.encode_images(stack_features([fs for fs, _ in batch]), mode)
    texts = model.encode_captions([c for _, c in batch], mode)
    S = EmbeddingBatch.from_raw(images, texts).similarity()
    return triplet_loss_hardest(S, loss_cfg)


def similarity_for(model: DsranModel, data: Sequence[FeatureSet]) -> SimilarityMatrix:
    """Eval-mode similarity of every image against every caption, item-major."""
    if not data:
        raise EmptyInput("cannot evaluate an empty dataset")
    images = model.encode_images(stack_features(data), dc.EVAL).data
    captions = [c for fs in data for c in fs.captions]
    texts = model.encode_captions(captions, dc.EVAL).data
    return SimilarityMatrix(cosine_similarity_matrix(images, texts), len(data[0].captions))


def evaluate_model(model: DsranModel, data: Sequence[FeatureSet], eval_cfg=None) -> Tuple[SimilarityMatrix, RetrievalReport]:
    """
    Encodes the dataset in eval mode and scores it.

    Returns:
        (similarity matrix, retrieval report); re-ranked when eval_cfg.rerank is set.
    """
    S = similarity_for(model, data)
    if eval_cfg is not None and eval_cfg.rerank:
        S = rerank_i2t(S, eval_cfg.top_n, eval_cfg.rerank_lambda)
    return S, evaluate(S)


def train(data: Sequence[FeatureSet], model: DsranModel, cfg,
          val_data: Optional[Sequence[FeatureSet]] = None,
          out_dir: Optional[Path] = None,
          on_epoch: Optional[Callable[[EpochRecord, int], None]] = None) -> TrainLog:
    """
    Trains `model` in place.

    Args:
        data: Training feature sets.
        model: Model to update.
        cfg: RunConfig; uses its train, loss and eval sections.
        val_data: Validation set for the per-epoch Rsum; None skips validation.
        out_dir: Where the checkpoint and training log go; None writes nothing.
        on_epoch: Called with each finished EpochRecord and the total epoch count.

    Raises:
        NonFiniteLoss: If a batch loss is NaN or Inf.
        IoFailure: If the outputs cannot be written.
    """
    tc = cfg.train
    rng = np.random.default_rng(np.random.SeedSequence(tc.seed).spawn(1)[0])
    optimizer = Adam(model.named_parameters(), tc.beta1, tc.beta2, tc.eps)
    total_steps = batches_per_epoch(len(data), tc.batch_size) * tc.epochs
    log = TrainLog()
    step = 0

    logger.info(f"Training on {len(data)} images for {tc.epochs} epochs "
                f"(batch {tc.batch_size}, lr {tc.learning_rate}, decay after epoch {tc.effective_decay_epoch})")

    for epoch in range(1, tc.epochs + 1):
        losses = []
        lr = learning_rate_at(tc, epoch, step, total_steps)
        for b, batch in enumerate(make_batches(data, tc.batch_size, rng)):
            lr = learning_rate_at(tc, epoch, step, total_steps)
            optimizer.zero_grad()
            loss = batch_loss(model, batch, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                logger.error(f"Non-finite loss {value} at epoch {epoch}, batch {b}")
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, batch {b}; lower the learning rate")
            loss.backward()
            optimizer.step(lr)
            losses.append(value)
            step += 1
            logger.debug(f"epoch {epoch} batch {b}: loss {value:.6f} lr {lr:.3g}")

        record = EpochRecord(epoch=epoch, loss=float(np.mean(losses)), learning_rate=lr)
        if val_data is not None and (epoch % tc.eval_every == 0 or epoch == tc.epochs):
            _, report = evaluate_model(model, val_data, cfg.eval)
            record.val_rsum = report.rsum
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record, tc.epochs)

    if out_dir is not None:
        out_dir = Path(out_dir)
        path = save_checkpoint(out_dir / CHECKPOINT_FILENAME, model, cfg, tc.epochs)
        log.checkpoint = str(path)
        try:
            (out_dir / TRAIN_LOG_FILENAME).write_text(
                json.dumps(log.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise IoFailure(f"cannot write training log to {out_dir}: {e}") from e

    logger.info(f"Training finished: final loss {log.final_loss:.6f}")
    return log
