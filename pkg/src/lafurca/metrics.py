"""Evaluation metrics and the STFT ideal-ratio-mask oracle baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .objective import DEFAULT_EPS, pit_loss, si_sdr_value, snr_db

__all__ = [
    "Spectrogram",
    "stft",
    "istft",
    "irm_masks",
    "irm_oracle",
    "UtteranceScore",
    "EvalReport",
    "score_utterance",
    "evaluate",
    "write_report",
]

REPORT_HEADER = ("utterance", "si_sdr_mix", "si_sdr_est", "si_sdri", "snri", "permutation")


@dataclass
class Spectrogram:
    """Complex STFT values, shape (frame_length // 2 + 1, frames)."""

    values: np.ndarray
    frame_length: int
    hop: int
    window: str
    length: int  # original signal length, for inversion

    @property
    def bins(self) -> int:
        return self.values.shape[0]


def _window(name: str, frame: int) -> np.ndarray:
    if name != "sqrt_hann":
        raise ValueError(f"unsupported window {name!r} (only 'sqrt_hann')")
    n = np.arange(frame)
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / frame))  # periodic Hann


def stft(x, frame: int = 256, hop: int = 128, window: str = "sqrt_hann") -> Spectrogram:
    """Short-time Fourier transform with half-frame zero padding at both ends."""
    if frame < 2 or frame & (frame - 1):
        raise ValueError(f"frame length must be a power of two, got {frame}")
    if not 0 < hop <= frame:
        raise ValueError(f"need 0 < hop <= frame, got hop={hop}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    w = _window(window, frame)
    half = frame // 2
    n_frames = int(np.ceil((x.size + 2 * half - frame) / hop)) + 1
    padded = np.zeros((n_frames - 1) * hop + frame)
    padded[half : half + x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame)[::hop][:n_frames]
    values = np.fft.rfft(frames * w, axis=1).T
    return Spectrogram(values, frame, hop, window, x.size)


def istft(spec: Spectrogram) -> np.ndarray:
    """Inverse of :func:`stft` by weighted overlap-add with window-power normalization."""
    frame, hop = spec.frame_length, spec.hop
    w = _window(spec.window, frame)
    frames = np.fft.irfft(spec.values.T, n=frame, axis=1) * w
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + frame
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop : i * hop + frame] += frames[i]
        norm[i * hop : i * hop + frame] += w * w
    out = np.where(norm > 1e-10, out / np.maximum(norm, 1e-10), 0.0)
    half = frame // 2
    return out[half : half + spec.length]


def irm_masks(source_specs: Sequence[Spectrogram], eps: float = DEFAULT_EPS) -> np.ndarray:
    """Ratio masks ``|X_s| / sum_s |X_s|``, shape (S, bins, frames).

    ``eps`` is shared equally among the sources, so bins where every source
    is silent get the uniform mask 1/S and every bin sums to one.
    """
    mags = np.stack([np.abs(s.values) for s in source_specs])
    n = mags.shape[0]
    return (mags + eps / n) / (mags.sum(axis=0, keepdims=True) + eps)


def irm_oracle(mixture, sources, frame: int = 256, hop: int = 128,
               eps: float = DEFAULT_EPS) -> np.ndarray:
    """Apply oracle ratio masks to the mixture STFT (mixture phase kept); returns (S, T)."""
    mixture = np.asarray(mixture, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    if sources.ndim != 2 or sources.shape[1] != mixture.size:
        raise ValueError("sources must be (S, T) with T equal to the mixture length")
    y = stft(mixture, frame, hop)
    masks = irm_masks([stft(s, frame, hop) for s in sources], eps)
    outs = []
    for m in masks:
        outs.append(istft(Spectrogram(m * y.values, frame, hop, y.window, y.length)))
    return np.stack(outs)


# -- reports -----------------------------------------------------------------------

@dataclass
class UtteranceScore:
    utterance: str
    si_sdr_mix: float
    si_sdr_est: float
    snr_mix: float
    snr_est: float
    permutation: tuple[int, ...]

    @property
    def si_sdri(self) -> float:
        return self.si_sdr_est - self.si_sdr_mix

    @property
    def snri(self) -> float:
        return self.snr_est - self.snr_mix


@dataclass
class EvalReport:
    rows: list[UtteranceScore] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([getattr(r, attr) for r in self.rows]))

    @property
    def mean_si_sdr_mix(self) -> float:
        return self._mean("si_sdr_mix")

    @property
    def mean_si_sdr_est(self) -> float:
        return self._mean("si_sdr_est")

    @property
    def mean_si_sdri(self) -> float:
        return self._mean("si_sdri")

    @property
    def mean_snri(self) -> float:
        return self._mean("snri")

    def summary(self) -> str:
        return (
            f"utterances={len(self.rows)} missing={len(self.missing)} "
            f"SI-SDR mix={self.mean_si_sdr_mix:.2f} dB est={self.mean_si_sdr_est:.2f} dB "
            f"SI-SDRi={self.mean_si_sdri:.2f} dB SNRi={self.mean_snri:.2f} dB"
        )


def score_utterance(name: str, mixture, references, estimates,
                    eps: float = DEFAULT_EPS) -> UtteranceScore:
    """PIT-aligned SI-SDR/SNR of the estimates and of the unprocessed mixture."""
    mixture = np.asarray(mixture, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    ests = np.asarray(estimates, dtype=np.float64)
    if refs.shape != ests.shape:
        raise ValueError(f"{name}: {refs.shape[0]} references vs estimates shaped {ests.shape}")
    perm = pit_loss(refs, ests, eps).permutation
    n = refs.shape[0]
    si_mix = float(np.mean([si_sdr_value(refs[i], mixture, eps) for i in range(n)]))
    si_est = float(np.mean([si_sdr_value(refs[i], ests[j], eps) for i, j in enumerate(perm)]))
    snr_mix = float(np.mean([snr_db(refs[i], mixture, eps) for i in range(n)]))
    snr_est = float(np.mean([snr_db(refs[i], ests[j], eps) for i, j in enumerate(perm)]))
    return UtteranceScore(name, si_mix, si_est, snr_mix, snr_est, perm)


def evaluate(items, separate: Callable[[str, np.ndarray], np.ndarray | None],
             eps: float = DEFAULT_EPS) -> EvalReport:
    """Score ``separate(name, mixture) -> (S, T)`` over ``(name, mixture, references)`` items.

    ``separate`` may return ``None`` (or raise ``FileNotFoundError``) for a
    missing estimate; that utterance is skipped and listed in ``report.missing``.
    Rows keep the input order.
    """
    report = EvalReport()
    for name, mixture, refs in items:
        try:
            est = separate(name, mixture)
        except FileNotFoundError:
            est = None
        if est is None:
            report.missing.append(name)
            continue
        report.rows.append(score_utterance(name, mixture, refs, est, eps))
    return report


def write_report(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in report.rows:
            perm = " ".join(str(j + 1) for j in r.permutation)
            writer.writerow([r.utterance, repr(r.si_sdr_mix), repr(r.si_sdr_est),
                             repr(r.si_sdri), repr(r.snri), perm])
