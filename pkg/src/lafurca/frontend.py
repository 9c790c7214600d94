"""Learned analysis/synthesis front end.

The encoder is a strided 1-D convolution (no bias) followed by a per-channel
PReLU.  The decoder maps every frame to ``window`` samples with one shared
fully connected layer and overlap-adds the frames at the encoder stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Module, Parameter
from .tensor import Tensor, as_tensor, fold, matmul, pad_end, prelu, unfold

__all__ = ["FrontendConfig", "FeatureMap", "Encoder", "Decoder", "frame_count", "frame_signal"]


@dataclass(frozen=True)
class FrontendConfig:
    window: int = 2
    stride: int = 1
    n_filters: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError(f"need 0 < stride <= window, got stride={self.stride}, window={self.window}")
        if self.n_filters < 1 or self.in_channels < 1:
            raise ValueError("n_filters and in_channels must be positive")


def frame_count(length: int, window: int, stride: int) -> int:
    """Number of full frames after zero-padding the end of a ``length``-sample signal."""
    if length < window:
        raise ValueError(f"signal of {length} samples is shorter than the window ({window})")
    return math.ceil((length - window) / stride) + 1


@dataclass
class FeatureMap:
    """Encoder output (N, F) plus the geometry the decoder needs to invert framing."""

    values: Tensor
    length: int
    window: int
    stride: int

    @property
    def n_frames(self) -> int:
        return self.values.shape[-1]


class Encoder(Module):
    def __init__(self, config: FrontendConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        n, c, w = config.n_filters, config.in_channels, config.window
        bound = 1.0 / math.sqrt(c * w)
        self.kernel = Parameter(rng.uniform(-bound, bound, (n, c, w)), dtype)
        self.slope = Parameter(np.full((n, 1), 0.25), dtype)

    def _input(self, waveforms) -> Tensor:
        x = as_tensor(waveforms, dtype=self.kernel.dtype)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[0] != self.config.in_channels:
            raise ValueError(
                f"encoder expects ({self.config.in_channels}, T) input, got {tuple(x.shape)}"
            )
        return x

    def linear(self, waveforms) -> Tensor:
        """Convolution output before the PReLU, shape (N, F)."""
        x = self._input(waveforms)
        framed = frame_signal(x, self.config.window, self.config.stride)
        return matmul(self.kernel.reshape(self.kernel.shape[0], -1), framed)

    def __call__(self, waveforms) -> FeatureMap:
        pre = self.linear(waveforms)
        length = self._input(waveforms).shape[1]
        return FeatureMap(prelu(pre, self.slope), length, self.config.window, self.config.stride)

    def encode_channel(self, waveform, channel: int = 0) -> FeatureMap:
        """Encode one waveform through the kernel taps of a single input channel.

        Equivalent to encoding a multi-channel input that is zero everywhere else.
        """
        x = as_tensor(waveform, dtype=self.kernel.dtype).reshape(1, -1)
        framed = frame_signal(x, self.config.window, self.config.stride)
        pre = matmul(self.kernel[:, channel, :], framed)
        return FeatureMap(prelu(pre, self.slope), x.shape[1], self.config.window, self.config.stride)


def frame_signal(x: Tensor, window: int, stride: int) -> Tensor:
    """(C, T) -> channel-major frames (C*W, F), zero-padding the end so every frame is full."""
    channels, length = x.shape
    f = frame_count(length, window, stride)
    padded = pad_end(x, (f - 1) * stride + window - length)
    return unfold(padded, window, stride).reshape(channels * window, f)


class Decoder(Module):
    """Frame-wise linear map (W x N), shared across sources, then overlap-add."""

    def __init__(self, config: FrontendConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        bound = 1.0 / math.sqrt(config.n_filters)
        self.weight = Parameter(rng.uniform(-bound, bound, (config.window, config.n_filters)), dtype)

    def __call__(self, features, geometry: FeatureMap | None = None, length: int | None = None) -> Tensor:
        """``features`` is (S, N, F) or (N, F); returns (S, T) or (T,) waveforms.

        The output length comes from ``geometry`` (the encoder's FeatureMap) or ``length``.
        """
        if geometry is None and length is None:
            raise ValueError("decode needs the encoder geometry (FeatureMap) or an explicit length")
        if geometry is not None:
            if (geometry.window, geometry.stride) != (self.config.window, self.config.stride):
                raise ValueError("feature geometry does not match the decoder window/stride")
            length = geometry.length
        x = as_tensor(features, dtype=self.weight.dtype)
        frames = matmul(self.weight, x)  # (..., W, F)
        out = fold(frames, self.config.stride)
        if out.shape[-1] < length:
            raise ValueError(f"cannot decode {length} samples from {x.shape[-1]} frames")
        return out[..., :length]
