"""Step metrics records and the append-only JSON-lines sink."""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss_total: float
    loss_rel: float
    loss_nce: float
    alpha: float
    lr: float
    m: float
    queue_fill: int
    embedding_std: float = 0.0
    grad_norm: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    def summary(self) -> str:
        return (f"step {self.step:>7} | ep {self.epoch:>3} | loss {self.loss_total:.4f} "
                f"(rel {self.loss_rel:.4f}, nce {self.loss_nce:.4f}) | a {self.alpha:.3f} | "
                f"lr {self.lr:.4g} | m {self.m:.4f} | queue {self.queue_fill} | std {self.embedding_std:.4f}")


class MetricsLogger:
    """One JSON object per line, appended and flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "a", encoding="utf-8")
        except OSError as e:
            raise OSError(f"metrics sink {self.path} is not writable: {e}") from e
        self._last_step: Optional[int] = None

    def log(self, record: Dict):
        step = record.get("step")
        if step is not None and self._last_step is not None and step <= self._last_step:
            raise ValueError(f"metrics step {step} does not increase past {self._last_step}")
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()
        if step is not None:
            self._last_step = step

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_metrics(record: StepMetrics, sink: MetricsLogger):
    """Append one StepMetrics record to the sink."""
    sink.log(record.to_dict())


def read_metrics(path, since_step: Optional[int] = None) -> List[Dict]:
    """Parse a metrics stream, skipping a torn final line left by a crash."""
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").split("\n")
    records = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                logger.warning(f"Skipping torn final line in {path}")
                break
            raise
        if since_step is None or record.get("step", 0) >= since_step:
            records.append(record)
    return records
