"""Cross-iteration noise judgment over a FIFO window of classification losses.

The threshold is the floor(r * N)-th smallest loss (1-based) in a full queue
of the N most recent losses; a label whose loss is strictly greater is judged
noisy. Until the queue is full every verdict is deferred.
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

CLEAN = "clean"
NOISY = "noisy"
DEFERRED = "deferred"


class QueueNotFullError(RuntimeError):
    """Threshold requested while the queue is still warming up."""

    pass


class QueueConfigError(ValueError):
    """Invalid queue capacity or acceptance rate."""

    pass


@dataclass(frozen=True)
class Judgment:
    object_id: int
    loss: float
    threshold_used: float | None
    verdict: str

    @property
    def is_noisy(self) -> bool:
        return self.verdict == NOISY


@dataclass(frozen=True)
class QueueEntry:
    object_id: int
    loss: float
    counter: int


def threshold_rank(acceptance_rate: float, capacity: int) -> int:
    """1-based rank floor(r * N); the epsilon absorbs products like 0.7 * 10."""
    return math.floor(acceptance_rate * capacity + 1e-9)


class LossQueue:
    """Fixed-capacity FIFO of (object_id, loss) with a quantile threshold."""

    def __init__(self, capacity: int = 128, acceptance_rate: float = 0.8):
        if capacity < 1:
            raise QueueConfigError(f"Queue capacity must be positive, got {capacity}")
        if not (0.0 < acceptance_rate <= 1.0):
            raise QueueConfigError(f"Acceptance rate must be in (0, 1], got {acceptance_rate}")
        if threshold_rank(acceptance_rate, capacity) < 1:
            raise QueueConfigError(
                f"Acceptance rate {acceptance_rate} selects no entry of a queue of {capacity}"
            )
        self.capacity = capacity
        self.acceptance_rate = acceptance_rate
        self.entries: deque[QueueEntry] = deque(maxlen=capacity)
        self.counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def is_full(self) -> bool:
        return len(self.entries) == self.capacity

    def threshold(self) -> float:
        """floor(r*N)-th smallest loss; equal losses keep insertion order."""
        if not self.is_full:
            raise QueueNotFullError(
                f"Queue holds {len(self.entries)}/{self.capacity} losses"
            )
        ordered = sorted(self.entries, key=lambda e: (e.loss, e.counter))
        return ordered[threshold_rank(self.acceptance_rate, self.capacity) - 1].loss

    def judge(self, object_id: int, loss: float) -> Judgment:
        """Verdict for a loss against the current window; does not modify the queue."""
        if not self.is_full:
            return Judgment(object_id, loss, None, DEFERRED)
        limit = self.threshold()
        verdict = NOISY if loss > limit else CLEAN
        return Judgment(object_id, loss, limit, verdict)

    def push(self, object_id: int, loss: float) -> None:
        if not math.isfinite(loss):
            raise ValueError(f"Loss must be finite, got {loss} for object {object_id}")
        self.entries.append(QueueEntry(object_id, float(loss), self.counter))
        self.counter += 1

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "acceptance_rate": self.acceptance_rate,
            "counter": self.counter,
            "entries": [[e.object_id, e.loss, e.counter] for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossQueue":
        queue = cls(data["capacity"], data["acceptance_rate"])
        for object_id, loss, counter in data["entries"]:
            queue.entries.append(QueueEntry(int(object_id), float(loss), int(counter)))
        queue.counter = int(data["counter"])
        return queue

    def save(self, path: str | Path) -> None:
        """Checkpoint the queue for a resumable run."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        logger.debug(f"Loss queue checkpoint written to {path}")

    @classmethod
    def load(cls, path: str | Path) -> "LossQueue":
        with open(path) as f:
            return cls.from_dict(json.load(f))
