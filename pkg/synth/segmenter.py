from typing import Protocol, Sequence

import numpy as np

from control.errors import RejectedInputError


class Segmenter(Protocol):
    """Anything that turns an image into a binary mask of visible person pixels."""

    def segment(self, image: np.ndarray, record: dict) -> np.ndarray:
        ...


class OracleSegmenter:
    """
    Returns the renderer's own visible silhouette.
    The record must carry it under "silhouette" (the dataset loaders attach it).
    """

    def segment(self, image: np.ndarray, record: dict) -> np.ndarray:
        sil = record.get("silhouette")
        if sil is None:
            raise KeyError(f"record {record.get('id', '?')} has no silhouette attached")
        return np.asarray(sil, dtype=bool)


def visibility_scores(batch: Sequence[np.ndarray]) -> list:
    """
    v_i = count_i / max_j count_j over the batch.
    All-empty batches fall back to v_i = 1 for every sample.
    """
    if len(batch) == 0:
        raise RejectedInputError("visibility_scores needs a non-empty batch")
    counts = np.array([np.count_nonzero(s) for s in batch], dtype=np.float64)
    top = counts.max()
    if top == 0:
        return [1.0] * len(batch)
    return (counts / top).tolist()
