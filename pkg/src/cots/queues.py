"""Aligned negative queues of momentum embeddings and the adaptive momentum filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotReadyError, PairingError


@dataclass(frozen=True)
class AmfStats:
    mu: float
    sigma: float
    threshold: float
    k: float


class NegativeQueuePair:
    """Three index-aligned ring buffers: image, text, and their pairwise similarity.

    Entries leave in arrival order. ``similarity[j]`` is fixed at push time as
    ``image[j] . text[j]``; momentum embeddings are constants, so it never goes
    stale.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0 or dim <= 0:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._image = np.zeros((capacity, dim))
        self._text = np.zeros((capacity, dim))
        self._sim = np.zeros(capacity)
        self._start = 0
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def _order(self) -> np.ndarray:
        return (self._start + np.arange(self._len)) % self.capacity

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Copies of the image and text negatives, oldest first."""
        idx = self._order()
        return self._image[idx].copy(), self._text[idx].copy()

    def similarities(self) -> np.ndarray:
        return self._sim[self._order()].copy()

    def push_batch(self, image_emb, text_emb) -> None:
        image_emb = np.atleast_2d(np.asarray(image_emb, dtype=np.float64))
        text_emb = np.atleast_2d(np.asarray(text_emb, dtype=np.float64))
        if image_emb.shape[0] != text_emb.shape[0]:
            raise PairingError(f"image rows {image_emb.shape[0]} != text rows {text_emb.shape[0]}")
        n = image_emb.shape[0]
        if n == 0:
            return
        if image_emb.shape[1] != self.dim or text_emb.shape[1] != self.dim:
            raise PairingError(f"embedding width must be {self.dim}")
        sims = np.einsum("ij,ij->i", image_emb, text_emb)
        if n > self.capacity:
            image_emb, text_emb, sims = image_emb[-self.capacity :], text_emb[-self.capacity :], sims[-self.capacity :]
            n = self.capacity
        overflow = max(0, self._len + n - self.capacity)
        self._start = (self._start + overflow) % self.capacity
        self._len -= overflow
        slots = (self._start + self._len + np.arange(n)) % self.capacity
        self._image[slots] = image_emb
        self._text[slots] = text_emb
        self._sim[slots] = sims
        self._len += n


def amf_stats(queue: NegativeQueuePair, k: float = 2.0, warmup_min: int = 100) -> AmfStats:
    """Mean, population std and ``mu - k * sigma`` of the similarity queue."""
    if len(queue) < max(1, warmup_min):
        raise NotReadyError(f"similarity queue has {len(queue)} entries; need {warmup_min}")
    return stats_from_similarities(queue.similarities(), k)


def stats_from_similarities(sims: np.ndarray, k: float) -> AmfStats:
    mu = float(np.mean(sims))
    sigma = float(np.std(sims))
    return AmfStats(mu=mu, sigma=sigma, threshold=mu - k * sigma, k=float(k))


def filter_batch(image_momentum, text_momentum, threshold: float) -> list[int]:
    """Indices whose momentum pair similarity is strictly above ``threshold``."""
    image_momentum = np.asarray(image_momentum, dtype=np.float64)
    text_momentum = np.asarray(text_momentum, dtype=np.float64)
    if image_momentum.shape != text_momentum.shape:
        raise PairingError("image and text momentum batches must be aligned")
    sims = np.einsum("ij,ij->i", image_momentum, text_momentum)
    return [int(i) for i in np.flatnonzero(sims > threshold)]
