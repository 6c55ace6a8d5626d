import json
import logging
from collections import deque
from pathlib import Path
from typing import Any, Dict, List, Optional

METRICS_LOGGER = "jetmoe.metrics"
METRICS_SCHEMA_VERSION = 1


class MetricsLogHandler(logging.Handler):
    """
    Writes metrics records as one JSON object per line and keeps the most
    recent ones in memory. Records are passed as ``extra={"metrics": {...}}``
    on the ``jetmoe.metrics`` logger.
    """
    def __init__(self, path: Optional[Path] = None, capacity: int = 100):
        super().__init__()
        self.path = Path(path) if path is not None else None
        self.capacity = capacity
        self.records = deque(maxlen=capacity)
        self._stream = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._stream = open(self.path, "a", encoding="utf-8")

    def emit(self, record):
        metrics = getattr(record, "metrics", None)
        if metrics is None:
            return
        try:
            entry = {"schema": METRICS_SCHEMA_VERSION, **metrics}
            # emit() runs under the handler lock, so writes are serialized
            if self._stream is not None:
                self._stream.write(json.dumps(entry, sort_keys=True) + "\n")
                self._stream.flush()
            self.records.append(entry)
        except Exception:
            self.handleError(record)

    def get_records(self, since_step: int = -1) -> List[Dict[str, Any]]:
        """Recent records with step > since_step."""
        self.acquire()
        try:
            return [r for r in self.records if r.get("step", 0) > since_step]
        finally:
            self.release()

    def close(self):
        self.acquire()
        try:
            if self._stream is not None:
                self._stream.close()
                self._stream = None
        finally:
            self.release()
        super().close()


def attach_metrics_handler(path: Optional[Path] = None, capacity: int = 100) -> MetricsLogHandler:
    """Attach a fresh handler to the metrics logger, replacing any previous one."""
    logger = logging.getLogger(METRICS_LOGGER)
    for old in list(logger.handlers):
        if isinstance(old, MetricsLogHandler):
            logger.removeHandler(old)
            old.close()
    handler = MetricsLogHandler(path, capacity)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    logger.propagate = False
    return handler


def read_metrics(path: Path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
