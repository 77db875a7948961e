import sys
from typing import Optional, TextIO

from model.trainer import EpochRecord


class TrainingStatusBar:
    """
    One-line per-epoch progress display on a text stream (stderr by default,
    stdout is reserved for reports).
    """

    def __init__(self, stream: Optional[TextIO] = None, enabled: bool = True):
        self.stream = stream if stream is not None else sys.stderr
        self.enabled = enabled
        self._best_rsum: Optional[float] = None

    def format_metrics(self, record: EpochRecord, total_epochs: int) -> str:
        width = len(str(total_epochs))
        parts = [
            f"epoch {record.epoch:>{width}}/{total_epochs}",
            f"loss {record.loss:.4f}",
            f"lr {record.learning_rate:.1e}",
        ]
        if record.val_rsum is not None:
            marker = ""
            if self._best_rsum is not None and record.val_rsum < self._best_rsum:
                marker = " (below best)"
            parts.append(f"Rsum {record.val_rsum:.1f}{marker}")
        return "  ".join(parts)

    def update_metrics(self, record: EpochRecord, total_epochs: int) -> None:
        """Writes the status line of a finished epoch."""
        line = self.format_metrics(record, total_epochs)
        if record.val_rsum is not None and (self._best_rsum is None or record.val_rsum > self._best_rsum):
            self._best_rsum = record.val_rsum
        if self.enabled:
            self.stream.write(line + "\n")
            self.stream.flush()
