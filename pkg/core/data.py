"""
Data loading: byte-level corpora for pretraining, JSONL datasets for SFT and
DPO, deterministic batch sampling, and a bounded background prefetcher.

Batches are drawn from a generator seeded by (seed, step), so the stream is
identical whether a run is resumed or prefetched ahead.
"""
import json
import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import DataError, DegenerateBatchError

logger = logging.getLogger(__name__)


@dataclass
class LmBatch:
    inputs: np.ndarray   # [B, T]
    targets: np.ndarray  # [B, T]
    mask: np.ndarray     # [B, T] 1 where the target contributes to the loss


@dataclass
class SftExample:
    prompt: np.ndarray
    response: np.ndarray


@dataclass
class PreferenceExample:
    prompt: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray


def load_corpus(path) -> np.ndarray:
    """Raw bytes of ``path`` as token ids in [0, 256)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Corpus not found: {path}")
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64)
    if data.size == 0:
        raise DataError(f"Corpus is empty: {path}")
    logger.info(f"Loaded corpus {path} ({data.size} bytes)")
    return data


def sample_lm_batch(corpus: np.ndarray, seed: int, step: int, batch_size: int, seq_len: int) -> LmBatch:
    """Random windows of seq_len + 1 bytes; deterministic in (seed, step)."""
    span = corpus.size - seq_len - 1
    if span < 0:
        raise DegenerateBatchError(f"corpus of {corpus.size} tokens is shorter than one window of {seq_len + 1}")
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, span + 1, size=batch_size)
    windows = corpus[starts[:, None] + np.arange(seq_len + 1)[None, :]]
    return LmBatch(windows[:, :-1], windows[:, 1:], np.ones((batch_size, seq_len), dtype=np.int64))


def eval_windows(corpus: np.ndarray, seq_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (inputs, targets) windows covering the corpus."""
    n = (corpus.size - 1) // seq_len
    if n < 1:
        raise DegenerateBatchError(f"corpus of {corpus.size} tokens is shorter than one window of {seq_len + 1}")
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len)[None, :]
    return corpus[idx], corpus[idx + 1]


def _token_list(value, field_name: str, where: str, vocab_size: int) -> np.ndarray:
    if not isinstance(value, list) or not all(isinstance(t, int) for t in value):
        raise DataError(f"{where}: '{field_name}' must be a list of token ids")
    arr = np.asarray(value, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise DataError(f"{where}: '{field_name}' has token ids outside [0, {vocab_size})")
    return arr


def _read_jsonl(path) -> Iterator[Tuple[str, dict]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Dataset not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: invalid JSON ({e})") from e
            if not isinstance(record, dict):
                raise DataError(f"{where}: expected a JSON object")
            yield where, record


def _check_response(prompt: np.ndarray, response: np.ndarray, name: str, where: str, max_len: int) -> None:
    if response.size == 0:
        raise DataError(f"{where}: empty '{name}'")
    if prompt.size == 0 and response.size < 2:
        raise DataError(f"{where}: '{name}' needs two tokens when the prompt is empty")
    if prompt.size + response.size - 1 > max_len:
        raise DataError(f"{where}: sequence of {prompt.size + response.size} tokens exceeds max_positions + 1")


def load_sft_dataset(path, vocab_size: int, max_len: int) -> List[SftExample]:
    """One {"prompt": [...], "response": [...]} object per line."""
    examples = []
    for where, rec in _read_jsonl(path):
        prompt = _token_list(rec.get("prompt", []), "prompt", where, vocab_size)
        response = _token_list(rec.get("response"), "response", where, vocab_size)
        _check_response(prompt, response, "response", where, max_len)
        examples.append(SftExample(prompt, response))
    if not examples:
        raise DataError(f"SFT dataset is empty: {path}")
    logger.info(f"Loaded {len(examples)} SFT examples from {path}")
    return examples


def load_preference_dataset(path, vocab_size: int, max_len: int) -> List[PreferenceExample]:
    """One {"prompt": [...], "chosen": [...], "rejected": [...]} object per line."""
    examples = []
    for where, rec in _read_jsonl(path):
        prompt = _token_list(rec.get("prompt", []), "prompt", where, vocab_size)
        chosen = _token_list(rec.get("chosen"), "chosen", where, vocab_size)
        rejected = _token_list(rec.get("rejected"), "rejected", where, vocab_size)
        _check_response(prompt, chosen, "chosen", where, max_len)
        _check_response(prompt, rejected, "rejected", where, max_len)
        examples.append(PreferenceExample(prompt, chosen, rejected))
    if not examples:
        raise DataError(f"Preference dataset is empty: {path}")
    logger.info(f"Loaded {len(examples)} preference pairs from {path}")
    return examples


def collate_responses(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> LmBatch:
    """Right-pad prompt+response sequences; the mask covers response targets only."""
    seqs = [np.concatenate([p, r]) for p, r in pairs]
    width = max(s.size for s in seqs) - 1
    b = len(seqs)
    inputs = np.zeros((b, width), dtype=np.int64)
    targets = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width), dtype=np.int64)
    for i, ((p, _), s) in enumerate(zip(pairs, seqs)):
        n = s.size - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        # target j is sequence token j + 1; it belongs to the response once j + 1 >= len(prompt)
        mask[i, max(p.size - 1, 0):n] = 1
    return LmBatch(inputs, targets, mask)


def minibatches(n: int, batch_size: int, epochs: int, seed: int) -> List[np.ndarray]:
    """Shuffled index batches for every epoch, deterministic in seed."""
    out = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        out.extend(order[i:i + batch_size] for i in range(0, n, batch_size))
    return out


class BatchPrefetcher:
    """Builds batches for steps [start, stop) on a background thread through a bounded queue."""

    _DONE = object()

    def __init__(self, make_batch: Callable[[int], object], start: int, stop: int, depth: int = 2):
        self._make_batch = make_batch
        self._start = start
        self._stop = stop
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
        self._halt = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _worker(self) -> None:
        try:
            for step in range(self._start, self._stop):
                if self._halt.is_set():
                    return
                self._put((step, self._make_batch(step)))
        except Exception as e:
            self._put(e)
            return
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._halt.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self):
        self._thread = threading.Thread(target=self._worker, daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._halt.set()
        if self._thread is not None:
            self._thread.join(timeout=1.0)
