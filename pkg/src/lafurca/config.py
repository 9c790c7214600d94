"""Run configuration: ``key = value`` files merged with command-line flags.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys and
malformed values are rejected. Flags given on the command line override the
file, which overrides the built-in defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config_text"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model hyperparameters (0 for hop means chunk_len // 2)
    n_sources: int = 2
    n_filters: int = 64
    window: int = 2
    stride: int = 1
    hidden: int = 128
    chunk_len: int = 100
    hop: int = 0
    branches: int = 3
    norm_eps: float = 1e-8
    # training
    base_lr: float = 1e-3
    decay: float = 0.98
    decay_every: int = 2
    batch_size: int = 1
    max_epochs: int = 100
    max_restarts: int = 3
    seed: int = 0
    adam_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 5.0
    loss_eps: float = 1e-8
    # data generation
    train: int = 20
    valid: int = 5
    test: int = 5
    duration: float = 4.0
    sample_rate: int = 8000
    # evaluation and the ratio-mask oracle
    stft_frame: int = 256
    stft_hop: int = 128
    irm_eps: float = 1e-8
    # gradient check
    gradcheck_samples: int = 60
    gradcheck_h: float = 1e-5

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def updated(self, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(self.keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return dataclasses.replace(self, **values)

    def model_hyper(self) -> dict:
        return dict(n_sources=self.n_sources, n_filters=self.n_filters, window=self.window,
                    stride=self.stride, hidden=self.hidden, chunk_len=self.chunk_len,
                    hop=self.hop or None, branches=self.branches, eps=self.norm_eps)

    def to_text(self) -> str:
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in self.keys())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, where: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key or not raw:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        if key not in _TYPES:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _convert(key, raw, where)
    return values


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        config = config.updated(parse_config_text(path.read_text(), str(path)))
    if overrides:
        config = config.updated(overrides)
    return config
