"""Single-stage separator network, multi-stage refinement, and the model notation parser.

A model is written ``LF(P, C, x1, ..., xn)``: optional ``P`` (parallel
branches) and ``C`` (context-aware cross) flags followed by the number of
dual-path blocks in each stage.  ``LF(6)`` is the plain single-stage network.
Hyperparameters can be appended as ``;key=value`` pairs, e.g.
``LF(C,2,2);N=32;H=32;K=50``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .chunking import ChunkingConfig, merge, segment
from .dualpath import BlockVariant, DualPathBlock
from .frontend import Decoder, Encoder, FrontendConfig
from .nn import Module, Parameter
from .tensor import Tensor, as_tensor, concat, matmul, softmax, sqrt

__all__ = [
    "ModelSpec",
    "ModelSpecError",
    "parse_model_spec",
    "Stage",
    "LaFurca",
    "layer_norm",
]


class ModelSpecError(ValueError):
    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position}: {text!r}")


# Hyperparameter keys accepted after the LF(...) part, mapped to field names.
_HYPER_KEYS = {
    "N": "n_filters",
    "W": "window",
    "stride": "stride",
    "H": "hidden",
    "K": "chunk_len",
    "hop": "hop",
    "B": "branches",
    "S": "n_sources",
}


@dataclass
class ModelSpec:
    parallel: bool = False
    cross: bool = False
    stage_blocks: list[int] = field(default_factory=lambda: [6])
    n_sources: int = 2
    n_filters: int = 64
    window: int = 2
    stride: int = 1
    hidden: int = 128
    chunk_len: int = 100
    hop: int | None = None
    branches: int = 3
    eps: float = 1e-8

    def __post_init__(self):
        if not self.stage_blocks or any(x < 1 for x in self.stage_blocks):
            raise ValueError(f"every stage needs >= 1 block, got {self.stage_blocks}")
        if self.n_sources < 2:
            raise ValueError("n_sources must be >= 2")
        if self.hop is None:
            self.hop = max(1, self.chunk_len // 2)
        # validate geometry early
        FrontendConfig(self.window, self.stride, self.n_filters)
        ChunkingConfig(self.chunk_len, self.hop)

    @property
    def variant(self) -> BlockVariant:
        return BlockVariant.from_flags(self.parallel, self.cross)

    @property
    def n_stages(self) -> int:
        return len(self.stage_blocks)

    def notation(self) -> str:
        parts = (["P"] if self.parallel else []) + (["C"] if self.cross else [])
        parts += [str(x) for x in self.stage_blocks]
        return f"LF({','.join(parts)})"

    def to_string(self) -> str:
        """Notation plus every hyperparameter, parseable by :func:`parse_model_spec`."""
        extras = [f"{key}={getattr(self, name)}" for key, name in _HYPER_KEYS.items()]
        return ";".join([self.notation()] + extras)

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)


def parse_model_spec(text: str, **defaults) -> ModelSpec:
    """Parse ``LF(...)``/``LaFurca(...)`` notation (case-insensitive).

    ``defaults`` supplies hyperparameters not given in the text.
    """
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    skip_ws()
    lowered = text.lower()
    for prefix in ("lafurca(", "lf("):
        if lowered.startswith(prefix, pos):
            pos += len(prefix)
            break
    else:
        raise ModelSpecError("expected 'LF(' or 'LaFurca('", text, pos)

    flags: dict[str, bool] = {"parallel": False, "cross": False}
    blocks: list[int] = []
    expect_item = True
    while True:
        skip_ws()
        if pos >= n:
            raise ModelSpecError("unterminated model spec, expected ')'", text, pos)
        ch = text[pos]
        if ch == ")":
            if expect_item and (blocks or flags["parallel"] or flags["cross"]):
                raise ModelSpecError("trailing comma", text, pos)
            pos += 1
            break
        if not expect_item:
            if ch != ",":
                raise ModelSpecError("expected ',' or ')'", text, pos)
            pos += 1
            expect_item = True
            continue
        if ch.isdigit():
            start = pos
            while pos < n and text[pos].isdigit():
                pos += 1
            value = int(text[start:pos])
            if value < 1:
                raise ModelSpecError("block count must be >= 1", text, start)
            blocks.append(value)
        elif ch.isalpha():
            start = pos
            while pos < n and text[pos].isalnum():
                pos += 1
            word = text[start:pos].upper()
            if word not in ("P", "C"):
                raise ModelSpecError(f"unknown flag {text[start:pos]!r}", text, start)
            if blocks:
                raise ModelSpecError("flags must precede block counts", text, start)
            key = "parallel" if word == "P" else "cross"
            if flags[key]:
                raise ModelSpecError(f"duplicate flag {word!r}", text, start)
            flags[key] = True
        else:
            raise ModelSpecError(f"unexpected character {ch!r}", text, pos)
        expect_item = False

    if not blocks:
        raise ModelSpecError("no per-stage block counts given", text, pos - 1)

    hyper = dict(defaults)
    skip_ws()
    while pos < n:
        if text[pos] != ";":
            raise ModelSpecError("expected ';key=value' after ')'", text, pos)
        pos += 1
        start = pos
        end = text.find(";", pos)
        end = n if end < 0 else end
        item = text[start:end]
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in _HYPER_KEYS:
            raise ModelSpecError(f"unknown or malformed hyperparameter {item.strip()!r}", text, start)
        try:
            hyper[_HYPER_KEYS[key]] = int(value)
        except ValueError:
            raise ModelSpecError(f"hyperparameter {key} needs an integer", text, start) from None
        pos = end

    try:
        return ModelSpec(stage_blocks=blocks, **flags, **hyper)
    except (TypeError, ValueError) as exc:
        raise ModelSpecError(str(exc), text, 0) from None


def layer_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Normalize (N, F) features over channels for every frame."""
    x = as_tensor(x)
    centered = x - x.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


class Stage(Module):
    """Encoder -> LayerNorm -> 1x1 conv -> dual-path blocks -> 1x1 conv -> softmax masks -> decoder.

    Stage 0 sees the mixture alone; later stages see the mixture stacked with
    the previous stage's S estimates.  Masks always multiply the mixture's
    encoding.
    """

    def __init__(self, spec: ModelSpec, n_blocks: int, first: bool,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.first = first
        n, s = spec.n_filters, spec.n_sources
        in_channels = 1 if first else 1 + s
        self.frontend = FrontendConfig(spec.window, spec.stride, n, in_channels)
        self.chunking = ChunkingConfig(spec.chunk_len, spec.hop)
        self.encoder = Encoder(self.frontend, rng, dtype)
        self.ln_gain = Parameter(np.ones((n, 1)), dtype)
        self.ln_bias = Parameter(np.zeros((n, 1)), dtype)
        bound = 1.0 / math.sqrt(n)
        self.bottleneck_w = Parameter(rng.uniform(-bound, bound, (n, n)), dtype)
        self.bottleneck_b = Parameter(np.zeros((n, 1)), dtype)
        self.blocks = [
            DualPathBlock(n, spec.hidden, spec.variant, rng, spec.branches, dtype, spec.eps)
            for _ in range(n_blocks)
        ]
        self.mask_w = Parameter(rng.uniform(-bound, bound, (s * n, n)), dtype)
        self.mask_b = Parameter(np.zeros((s * n, 1)), dtype)
        self.decoder = Decoder(self.frontend, rng, dtype)

    @property
    def dtype(self):
        return self.encoder.kernel.dtype

    def __call__(self, mixture, previous=None) -> tuple[Tensor, Tensor]:
        """Return (estimates (S, T), masks (S, N, F))."""
        spec = self.spec
        mixture = as_tensor(mixture, dtype=self.dtype)
        if mixture.ndim != 1:
            raise ValueError(f"mixture must be 1-D, got shape {mixture.shape}")
        length = mixture.shape[0]
        mix_row = mixture.reshape(1, length)
        if self.first:
            if previous is not None:
                raise ValueError("the first stage takes no previous estimates")
            features = self.encoder(mix_row)
            mixture_features = features
        else:
            if previous is None:
                raise ValueError("later stages need the previous stage's estimates")
            previous = as_tensor(previous)
            if previous.shape != (spec.n_sources, length):
                raise ValueError(
                    f"expected {spec.n_sources} previous estimates of length {length}, "
                    f"got shape {previous.shape}"
                )
            features = self.encoder(concat([mix_row, previous], axis=0))
            mixture_features = self.encoder.encode_channel(mixture, 0)

        h = layer_norm(features.values, self.ln_gain, self.ln_bias, spec.eps)
        h = matmul(self.bottleneck_w, h) + self.bottleneck_b
        chunks = segment(h, self.chunking)
        v = chunks.values
        for block in self.blocks:
            v = block(v)
        h = merge(dataclasses.replace(chunks, values=v))

        logits = (matmul(self.mask_w, h) + self.mask_b).reshape(
            spec.n_sources, spec.n_filters, features.n_frames
        )
        masks = softmax(logits, axis=0)
        masked = masks * mixture_features.values
        estimates = self.decoder(masked, features)
        return estimates, masks


class LaFurca(Module):
    """Chain of :class:`Stage` networks; each stage refines the previous estimates."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.stages = [
            Stage(spec, blocks, k == 0, rng, dtype) for k, blocks in enumerate(spec.stage_blocks)
        ]

    def __call__(self, mixture, with_masks: bool = False):
        """Return one (S, T) estimate tensor per stage (and the masks if requested)."""
        outputs, masks = [], []
        previous = None
        for stage in self.stages:
            est, mask = stage(mixture, previous)
            outputs.append(est)
            masks.append(mask)
            previous = est
        if with_masks:
            return outputs, masks
        return outputs
