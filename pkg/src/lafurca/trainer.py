"""Adam training with step decay, restart-on-validation-increase and checkpointing.

Schedule: ``lr = base_lr * decay ** (epoch // decay_every)`` with epochs
counted from 0.  Whenever an epoch's validation loss exceeds the best seen so
far, training reloads the best checkpoint (weights and optimizer state) and
continues with ``base_lr`` halved.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .objective import multistage_loss
from .separator import LaFurca, ModelSpec, parse_model_spec
from .tensor import Tape

__all__ = [
    "TrainConfig",
    "AdamState",
    "NonFiniteGradientError",
    "adam_step",
    "clip_grad_norm",
    "Trainer",
    "TrainResult",
    "LOG_HEADER",
    "model_from_checkpoint",
]

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "stage", "split", "loss_db", "lr")


@dataclass
class TrainConfig:
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

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")

    def lr(self, epoch: int, restarts: int = 0) -> float:
        return self.base_lr * 0.5 ** restarts * self.decay ** (epoch // self.decay_every)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place.

    Parameters missing from ``grads`` are treated as having zero gradient.
    Raises :class:`NonFiniteGradientError` before touching anything if a
    gradient holds NaN/Inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= update.astype(p.dtype, copy=False)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainResult:
    log_rows: list[tuple]
    best: Checkpoint
    last: Checkpoint
    lr_history: list[float]  # base learning rate in force at each epoch
    events: list[dict]


Example = tuple[np.ndarray, np.ndarray]  # (mixture (T,), sources (S, T))


def model_from_checkpoint(ck: Checkpoint, dtype=np.float32) -> LaFurca:
    model = LaFurca(parse_model_spec(ck.spec), seed=0, dtype=dtype)
    model.load_state_dict(ck.params)
    return model


class Trainer:
    """Batch-size-1 (or small batch) training loop over in-memory examples."""

    def __init__(self, model: LaFurca, config: TrainConfig, train_set: Sequence[Example],
                 valid_set: Sequence[Example], out_dir=None):
        if not train_set or not valid_set:
            raise ValueError("training and validation sets must be non-empty")
        self.model = model
        self.config = config
        self.train_set = list(train_set)
        self.valid_set = list(valid_set)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.adam = AdamState()
        self.epoch = 0
        self.restarts = 0
        self.best_valid = math.inf
        self.best: Checkpoint | None = None
        self.log_rows: list[tuple] = []
        self.lr_history: list[float] = []
        self.events: list[dict] = []

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec

    @property
    def base_lr(self) -> float:
        return self.config.base_lr * 0.5 ** self.restarts

    # -- state ------------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            spec=self.spec.to_string(),
            params=self.model.state_dict(),
            adam_m={k: v.copy() for k, v in self.adam.m.items()},
            adam_v={k: v.copy() for k, v in self.adam.v.items()},
            adam_step=self.adam.step,
            epoch=self.epoch,
            base_lr=self.base_lr,
            restarts=self.restarts,
            best_valid=self.best_valid,
            seed=self.config.seed,
        )

    def restore(self, ck: Checkpoint, schedule: bool = True):
        """Load weights and optimizer state; with ``schedule`` also epoch/restart bookkeeping."""
        self.model.load_state_dict(ck.params)
        self.adam = AdamState(
            {k: v.copy() for k, v in ck.adam_m.items()},
            {k: v.copy() for k, v in ck.adam_v.items()},
            ck.adam_step,
        )
        if schedule:
            self.epoch = ck.epoch
            self.restarts = ck.restarts
            self.best_valid = ck.best_valid

    def resume(self, last_path, best_path=None, log_path=None):
        """Continue from ``last.lfck`` (and ``best.lfck`` for future restarts)."""
        last = load_checkpoint(last_path)
        self.restore(last)
        if best_path is not None and Path(best_path).exists():
            self.best = load_checkpoint(best_path)
        if log_path is not None and Path(log_path).exists():
            self.log_rows = [r for r in _read_log(log_path) if r[0] < self.epoch]
        self.lr_history = []

    # -- loss evaluation ---------------------------------------------------------
    def example_losses(self, example: Example) -> list[float]:
        mix, sources = example
        outputs = self.model(mix)
        _, results = multistage_loss(outputs, sources, self.config.loss_eps)
        return [r.loss_db for r in results]

    def validate(self) -> list[float]:
        """Per-stage mean PIT loss (dB) over the validation set."""
        per = np.array([self.example_losses(ex) for ex in self.valid_set], dtype=np.float64)
        return [float(v) for v in per.mean(axis=0)]

    def train_epoch(self, epoch: int, lr: float) -> list[float]:
        cfg = self.config
        params = self.model.parameters()
        arrays = {k: p.data for k, p in params.items()}
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(self.train_set))
        stage_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            self.model.zero_grad()
            for idx in batch:
                mix, sources = self.train_set[idx]
                with Tape() as tape:
                    outputs = self.model(mix)
                    loss, results = multistage_loss(outputs, sources, cfg.loss_eps)
                    scaled = loss * (1.0 / len(batch))
                tape.backward(scaled)
                stage_losses.append([r.loss_db for r in results])
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(arrays, grads, self.adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        return [float(v) for v in np.mean(stage_losses, axis=0)]

    # -- main loop -----------------------------------------------------------------
    def _paths(self):
        if self.out_dir is None:
            return None, None, None
        return self.out_dir / "best.lfck", self.out_dir / "last.lfck", self.out_dir / "loss.csv"

    def run(self) -> TrainResult:
        cfg = self.config
        best_path, last_path, log_path = self._paths()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            while self.epoch < cfg.max_epochs:
                epoch = self.epoch
                lr = cfg.lr(epoch, self.restarts)
                self.lr_history.append(self.base_lr)
                train = self.train_epoch(epoch, lr)
                valid = self.validate()
                for k, v in enumerate(train, start=1):
                    self.log_rows.append((epoch, k, "train", v, lr))
                for k, v in enumerate(valid, start=1):
                    self.log_rows.append((epoch, k, "valid", v, lr))
                valid_mean = float(np.float32(np.mean(valid)))
                log.info("epoch %d lr %.6g train %s valid %s", epoch, lr,
                         " ".join(f"{v:.2f}" for v in train), " ".join(f"{v:.2f}" for v in valid))
                self.epoch = epoch + 1
                stop = False
                if self.best is None or valid_mean <= self.best_valid:
                    self.best_valid = valid_mean
                    self.best = self.checkpoint()
                    if best_path is not None:
                        save_checkpoint(best_path, self.best)
                elif self.restarts >= cfg.max_restarts:
                    self.events.append({"epoch": epoch, "event": "restarts exhausted"})
                    stop = True
                else:
                    self._restart(epoch, best_path)
                if log_path is not None:
                    _write_log(log_path, self.log_rows)
                if last_path is not None:
                    save_checkpoint(last_path, self.checkpoint())
                if stop:
                    break
        except OSError:
            if self.out_dir is not None:
                try:
                    save_checkpoint(self.out_dir / "interrupted.lfck", self.checkpoint())
                except OSError:
                    pass
            raise
        return TrainResult(self.log_rows, self.best, self.checkpoint(), self.lr_history, self.events)

    def _restart(self, epoch: int, best_path):
        source = self.best
        if best_path is not None and best_path.exists():
            source = load_checkpoint(best_path)
        self.restore(source, schedule=False)
        self.restarts += 1
        recomputed = float(np.float32(np.mean(self.validate())))
        self.events.append({
            "epoch": epoch,
            "event": "restart",
            "base_lr": self.base_lr,
            "best_valid": self.best_valid,
            "recomputed_valid": recomputed,
        })
        log.info("validation loss rose; restored best checkpoint, base lr now %.6g", self.base_lr)


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for epoch, stage, split, loss, lr in rows:
            writer.writerow([epoch, stage, split, repr(float(loss)), repr(float(lr))])


def _read_log(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [(int(e), int(s), sp, float(l), float(lr)) for e, s, sp, l, lr in reader]
