import queue
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from control.errors import DatasetError

_END = object()


def epoch_order(n: int, seed: int, epoch: int, count: Optional[int] = None) -> np.ndarray:
    """
    Seed-determined sample order for one epoch.
    With count > n, further permutations are appended until `count` indices exist.
    """
    count = n if count is None else count
    if n == 0 and count > 0:
        raise DatasetError(f"cannot draw {count} samples from an empty split")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng([seed, epoch])
    chunks, total = [], 0
    while total < count:
        chunks.append(rng.permutation(n))
        total += n
    return np.concatenate(chunks)[:count]


class BatchStream:
    """
    Loads batches on a background thread and hands them over through a bounded queue.
    - a single producer walks `order` sequentially, so batches arrive in a fixed order
    - use as a context manager; read_batch() returns None once the order is exhausted
    - producer errors are re-raised in the consumer (and passed to on_error if set)
    """
    def __init__(self, load_fn: Callable[[int], object], order: Sequence[int], batch_size: int,
                 collate_fn: Optional[Callable[[list], object]] = None, depth: int = 4,
                 drop_last: bool = False, on_error=None):
        self.load_fn = load_fn
        self.order = [int(i) for i in order]
        self.batch_size = batch_size
        self.collate_fn = collate_fn or (lambda items: items)
        self.drop_last = drop_last
        self.on_error = on_error

        # thread control and shared state
        self._stop = threading.Event()
        self._q = queue.Queue(maxsize=max(1, depth))
        self._t: Optional[threading.Thread] = None
        self._error: Optional[BaseException] = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def __iter__(self):
        while True:
            batch = self.read_batch()
            if batch is None:
                return
            yield batch

    # Background thread: load items in order, collate, queue
    def _reader_thread(self):
        try:
            for start in range(0, len(self.order), self.batch_size):
                idx = self.order[start:start + self.batch_size]
                if self.drop_last and len(idx) < self.batch_size:
                    break
                batch = self.collate_fn([self.load_fn(i) for i in idx])
                # block while the consumer is behind, but keep checking for stop
                while not self._stop.is_set():
                    try:
                        self._q.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except Exception as e:
            self._error = e
            if self.on_error:
                self.on_error(e)
        finally:
            while not self._stop.is_set():
                try:
                    self._q.put(_END, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def start(self):
        if self._t and self._t.is_alive():
            return
        self._stop.clear()
        self._t = threading.Thread(target=self._reader_thread, daemon=True)
        self._t.start()

    def read_batch(self):
        if self._t is None:
            self.start()
        item = self._q.get()
        if item is _END:
            # leave the sentinel for any later read
            self._q.put(_END)
            if self._error is not None:
                raise self._error
            return None
        return item

    def stop(self):
        self._stop.set()
        if self._t:
            self._t.join(timeout=1.0)
            self._t = None
        # drop anything still buffered
        while True:
            try:
                self._q.get_nowait()
            except queue.Empty:
                break
