"""Utterance-level SI-SDR, permutation-invariant training loss and stage averaging.

All functions accept numpy arrays or :class:`~lafurca.tensor.Tensor` estimates;
with tensors the result is differentiable with respect to the estimates.
Targets are treated as constants.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, log10

__all__ = [
    "SISDRBreakdown",
    "PITResult",
    "si_sdr",
    "si_sdr_value",
    "pit_loss",
    "multistage_loss",
    "snr_db",
]

DEFAULT_EPS = 1e-8
MAX_PIT_SOURCES = 6


@dataclass
class SISDRBreakdown:
    projection: Tensor  # target scaled onto the estimate
    error: Tensor  # projection - estimate
    value: Tensor  # scalar, dB

    @property
    def value_db(self) -> float:
        return self.value.item()


@dataclass
class PITResult:
    permutation: tuple[int, ...]  # estimate index assigned to each target (0-based)
    pair_si_sdr: np.ndarray  # (S, S): [target i, estimate j]
    loss: Tensor  # negative mean SI-SDR under ``permutation``

    @property
    def loss_db(self) -> float:
        return self.loss.item()

    @property
    def selected_si_sdr(self) -> np.ndarray:
        return np.array([self.pair_si_sdr[i, j] for i, j in enumerate(self.permutation)])


def _target_array(target, dtype) -> np.ndarray:
    x = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=dtype)
    return x


def si_sdr(target, estimate, eps: float = DEFAULT_EPS) -> SISDRBreakdown:
    """SI-SDR of ``estimate`` against ``target`` over the whole utterance.

    ``projection = <x, s>/<x, x> x`` and ``error = projection - s``; the value is
    ``10 log10((|projection|^2 + eps) / (|error|^2 + eps))``.
    """
    s = as_tensor(estimate)
    x = _target_array(target, s.dtype)
    if x.shape != s.shape:
        raise ValueError(f"si_sdr: target shape {x.shape} != estimate shape {s.shape}")
    energy = float(np.dot(x.ravel().astype(np.float64), x.ravel().astype(np.float64)))
    if energy == 0.0:
        raise ValueError("si_sdr: target is all zeros, projection undefined")
    alpha = (s * x).sum() * (1.0 / energy)
    projection = alpha * x
    error = projection - s
    ratio = ((projection * projection).sum() + eps) / ((error * error).sum() + eps)
    return SISDRBreakdown(projection, error, log10(ratio) * 10.0)


def si_sdr_value(target, estimate, eps: float = DEFAULT_EPS) -> float:
    """Plain-float SI-SDR in dB (float64 arithmetic, no graph)."""
    x = np.asarray(target, dtype=np.float64)
    s = np.asarray(estimate, dtype=np.float64)
    if x.shape != s.shape:
        raise ValueError(f"si_sdr: target shape {x.shape} != estimate shape {s.shape}")
    energy = float(np.dot(x, x))
    if energy == 0.0:
        raise ValueError("si_sdr: target is all zeros, projection undefined")
    projection = (np.dot(x, s) / energy) * x
    error = projection - s
    return float(10.0 * np.log10((np.dot(projection, projection) + eps) / (np.dot(error, error) + eps)))


def snr_db(target, estimate, eps: float = DEFAULT_EPS) -> float:
    """Unscaled SNR: ``10 log10((|x|^2 + eps) / (|x - s|^2 + eps))``."""
    x = np.asarray(target, dtype=np.float64)
    s = np.asarray(estimate, dtype=np.float64)
    if x.shape != s.shape:
        raise ValueError(f"snr: target shape {x.shape} != estimate shape {s.shape}")
    d = x - s
    return float(10.0 * np.log10((np.dot(x, x) + eps) / (np.dot(d, d) + eps)))


def _rows(signals) -> list:
    if isinstance(signals, Tensor):
        return [signals[i] for i in range(signals.shape[0])]
    if isinstance(signals, np.ndarray):
        return list(signals)
    return list(signals)


def pit_loss(targets, estimates, eps: float = DEFAULT_EPS) -> PITResult:
    """Exhaustive-permutation PIT loss.

    The permutation maximizing the mean SI-SDR is chosen (ties go to the
    lexicographically smallest); it is held constant for the backward pass.
    """
    targets = _rows(targets)
    estimates = _rows(estimates)
    n = len(targets)
    if n != len(estimates):
        raise ValueError(f"pit_loss: {n} targets but {len(estimates)} estimates")
    if not 1 <= n <= MAX_PIT_SOURCES:
        raise ValueError(f"pit_loss supports 1..{MAX_PIT_SOURCES} sources, got {n}")

    pairs = [[si_sdr(targets[i], estimates[j], eps).value for j in range(n)] for i in range(n)]
    table = np.array([[p.item() for p in row] for row in pairs])
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(n)):
        score = sum(table[i, j] for i, j in enumerate(perm)) / n
        if score > best_score:
            best, best_score = perm, score
    total = None
    for i, j in enumerate(best):
        total = pairs[i][j] if total is None else total + pairs[i][j]
    loss = total * (-1.0 / n)
    return PITResult(best, table, loss)


def multistage_loss(stage_outputs: Sequence, targets, eps: float = DEFAULT_EPS):
    """Mean over stages of each stage's own PIT loss.

    Returns ``(loss, per_stage_results)``.
    """
    if not stage_outputs:
        raise ValueError("multistage_loss needs at least one stage")
    results = [pit_loss(targets, est, eps) for est in stage_outputs]
    total = None
    for r in results:
        total = r.loss if total is None else total + r.loss
    return total * (1.0 / len(results)), results
