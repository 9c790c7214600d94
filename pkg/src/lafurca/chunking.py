"""Segmentation of a feature sequence into overlapping chunks, and the inverse merge."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, fold, pad_end, unfold

__all__ = ["ChunkingConfig", "ChunkTensor", "segment", "merge", "num_chunks", "overlap_counts"]


@dataclass(frozen=True)
class ChunkingConfig:
    chunk_len: int = 100
    hop: int | None = None  # defaults to chunk_len // 2

    def __post_init__(self):
        if self.chunk_len < 1:
            raise ValueError(f"chunk_len must be positive, got {self.chunk_len}")
        if self.hop is None:
            object.__setattr__(self, "hop", max(1, self.chunk_len // 2))
        if not 0 < self.hop <= self.chunk_len:
            raise ValueError(f"need 0 < hop <= chunk_len, got hop={self.hop}, chunk_len={self.chunk_len}")


@dataclass
class ChunkTensor:
    """``values`` has shape (N, K, C): channel, intra-chunk frame, chunk index."""

    values: Tensor
    n_frames: int
    padding: int
    config: ChunkingConfig

    @property
    def n_chunks(self) -> int:
        return self.values.shape[-1]


def num_chunks(n_frames: int, chunk_len: int, hop: int) -> int:
    return math.ceil(max(n_frames - chunk_len, 0) / hop) + 1


def segment(features, config: ChunkingConfig) -> ChunkTensor:
    """Split (N, F) features into chunk ``c`` = frames ``[c*hop, c*hop + K)``, zero-padded at the end."""
    features = as_tensor(features)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ValueError(f"segment expects (N, F) features with F >= 1, got {features.shape}")
    n_frames = features.shape[1]
    k, hop = config.chunk_len, config.hop
    c = num_chunks(n_frames, k, hop)
    padding = (c - 1) * hop + k - n_frames
    padded = pad_end(features, padding)
    return ChunkTensor(unfold(padded, k, hop), n_frames, padding, config)


def overlap_counts(n_chunks: int, chunk_len: int, hop: int) -> np.ndarray:
    """How many chunks cover each padded frame position."""
    ones = np.ones((chunk_len, n_chunks))
    counts = np.zeros((n_chunks - 1) * hop + chunk_len)
    for k in range(chunk_len):
        counts[k : k + (n_chunks - 1) * hop + 1 : hop] += ones[k]
    return counts


def merge(chunks: ChunkTensor) -> Tensor:
    """Overlap-add chunks back to (N, F), averaging frames covered by several chunks."""
    if not isinstance(chunks, ChunkTensor):
        raise TypeError("merge needs a ChunkTensor carrying its geometry")
    cfg = chunks.config
    values = chunks.values
    summed = fold(values, cfg.hop)
    counts = overlap_counts(values.shape[-1], cfg.chunk_len, cfg.hop)
    averaged = summed * (1.0 / counts).astype(values.dtype)
    return averaged[:, : chunks.n_frames]

