"""Finite-difference gradient checks for primitives and whole models.

Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
the floor keeps entries whose true gradient is ~0 from reporting noise as
error (they are then judged on absolute error ``<= tol * floor``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .chunking import ChunkingConfig, merge, segment
from .dualpath import bilstm, group_norm
from .objective import multistage_loss, si_sdr
from .separator import LaFurca, layer_norm, parse_model_spec
from .tensor import Tape, Tensor

__all__ = [
    "GradEntry",
    "GradcheckReport",
    "relative_error",
    "check_gradients",
    "check_primitives",
    "tiny_model",
    "check_model",
    "PRIMITIVE_TOL",
    "MODEL_TOL",
]

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
DENOM_FLOOR = 1e-6


@dataclass
class GradEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradcheckReport:
    entries: list[GradEntry] = field(default_factory=list)
    zero_grad_params: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def worst(self) -> GradEntry | None:
        return max(self.entries, key=lambda e: e.rel_err, default=None)

    def passed(self, tol: float) -> bool:
        return bool(self.entries) and self.max_rel_err < tol


def relative_error(a: float, n: float, floor: float = DENOM_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                    n_samples: int | None = None, h: float = 1e-5,
                    rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    With ``n_samples`` None every entry is checked; otherwise every
    parameter gets at least one sampled entry and the rest are drawn
    uniformly over all entries.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    names = list(params)
    if n_samples is None:
        picks = [(k, idx) for k in names for idx in np.ndindex(params[k].shape)]
    else:
        picks = [(k, tuple(int(rng.integers(s)) for s in params[k].shape)) for k in names]
        sizes = np.array([params[k].size for k in names], dtype=np.float64)
        extra = max(0, n_samples - len(picks))
        for j in rng.choice(len(names), size=extra, p=sizes / sizes.sum()):
            k = names[j]
            picks.append((k, tuple(int(rng.integers(s)) for s in params[k].shape)))

    report = GradcheckReport()
    report.zero_grad_params = [k for k in names if not np.any(analytic[k])]
    for k, idx in picks:
        p = params[k]
        orig = p.data[idx].item()
        p.data[idx] = orig + h
        up = loss_fn().item()
        p.data[idx] = orig - h
        down = loss_fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        report.entries.append(GradEntry(k, idx, float(analytic[k][idx]), numeric))
    return report


# -- primitives ---------------------------------------------------------------------

def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    u = lambda *shape: rng.uniform(-1.0, 1.0, shape)  # noqa: E731
    pos = lambda *shape: rng.uniform(0.5, 1.5, shape)  # noqa: E731
    cfg = ChunkingConfig(4, 2)
    return {
        "add": (lambda a, b: a + b, {"a": u(3, 4), "b": u(4)}),
        "sub": (lambda a, b: a - b, {"a": u(3, 4), "b": u(3, 1)}),
        "mul": (lambda a, b: a * b, {"a": u(3, 4), "b": u(1, 4)}),
        "div": (lambda a, b: a / b, {"a": u(3, 4), "b": pos(3, 4)}),
        "pow": (lambda a: a ** 3, {"a": u(5)}),
        "matmul": (lambda a, b: a @ b, {"a": u(3, 4), "b": u(4, 2)}),
        "matmul_batched_left": (lambda a, b: a @ b, {"a": u(2, 3, 4), "b": u(4, 2)}),
        "matmul_batched_right": (lambda a, b: a @ b, {"a": u(3, 4), "b": u(2, 4, 5)}),
        "matmul_batched": (lambda a, b: a @ b, {"a": u(2, 3, 4), "b": u(2, 4, 2)}),
        "sigmoid": (lambda a: T.sigmoid(a), {"a": u(6)}),
        "tanh": (lambda a: T.tanh(a), {"a": u(6)}),
        "exp": (lambda a: T.exp(a), {"a": u(6)}),
        "log": (lambda a: T.log(a), {"a": pos(6)}),
        "log10": (lambda a: T.log10(a), {"a": pos(6)}),
        "sqrt": (lambda a: T.sqrt(a), {"a": pos(6)}),
        "prelu": (lambda a, s: T.prelu(a, s), {"a": u(4, 5), "s": u(4, 1)}),
        "softmax": (lambda a: T.softmax(a, axis=0), {"a": u(3, 4)}),
        "sum_axis": (lambda a: a.sum(axis=1), {"a": u(3, 4)}),
        "mean_axis": (lambda a: a.mean(axis=0, keepdims=True), {"a": u(3, 4)}),
        "concat": (lambda a, b: T.concat([a, b], axis=1), {"a": u(3, 2), "b": u(3, 4)}),
        "stack": (lambda a, b: T.stack([a, b], axis=1), {"a": u(3, 2), "b": u(3, 2)}),
        "getitem": (lambda a: a[1:, ::2], {"a": u(3, 5)}),
        "transpose": (lambda a: a.transpose(2, 0, 1), {"a": u(2, 3, 4)}),
        "reshape": (lambda a: a.reshape(4, 3), {"a": u(2, 6)}),
        "unfold": (lambda a: T.unfold(a, 4, 2), {"a": u(2, 10)}),
        "fold": (lambda a: T.fold(a, 2), {"a": u(2, 4, 4)}),
        "pad_end": (lambda a: T.pad_end(a, 3), {"a": u(2, 5)}),
        "bilstm": (lambda x, wi, wh, b: bilstm(x, wi, wh, b),
                   {"x": u(5, 3, 4), "wi": u(2, 4, 12) * 0.5, "wh": u(2, 3, 12) * 0.5, "b": u(2, 12)}),
        "group_norm": (lambda x, g, b: group_norm(x, g, b),
                       {"x": u(3, 4, 2), "g": u(3, 1, 1), "b": u(3, 1, 1)}),
        "layer_norm": (lambda x, g, b: layer_norm(x, g, b),
                       {"x": u(4, 5), "g": u(4, 1), "b": u(4, 1)}),
        "segment_merge": (lambda x: merge(segment(x, cfg)) * 1.0, {"x": u(2, 9)}),
        "segment": (lambda x: segment(x, cfg).values, {"x": u(2, 9)}),
        "si_sdr": (lambda s: si_sdr(_SI_TARGET, s).value, {"s": u(16)}),
    }


_SI_TARGET = np.random.default_rng(99).uniform(-1, 1, 16)


def check_primitives(seed: int = 0) -> dict[str, GradcheckReport]:
    """Check every primitive at float64 on random inputs in [-1, 1]; all entries compared."""
    rng = np.random.default_rng(seed)
    reports = {}
    for name, (fn, inputs) in _primitive_cases(rng).items():
        params = {k: Tensor(v.astype(np.float64), requires_grad=True) for k, v in inputs.items()}
        out_shape = fn(*params.values()).shape
        weights = rng.uniform(-1.0, 1.0, out_shape)

        def loss_fn(fn=fn, params=params, weights=weights):
            out = fn(*params.values())
            return (out * weights).sum()

        reports[name] = check_gradients(loss_fn, params, None)
    return reports


# -- models -----------------------------------------------------------------------

TINY_HYPER = dict(n_filters=6, hidden=4, chunk_len=4, hop=2, window=2, stride=1, branches=3)


def tiny_model(notation: str, seed: int = 0, **overrides) -> LaFurca:
    hyper = {**TINY_HYPER, **overrides}
    spec = parse_model_spec(notation, **hyper)
    return LaFurca(spec, seed=seed, dtype=np.float64)


def check_model(notation: str, seed: int = 7, n_samples: int = 60, length: int = 29,
                **overrides) -> GradcheckReport:
    """End-to-end check of the stage-averaged PIT loss for a tiny float64 model."""
    model = tiny_model(notation, seed, **overrides)
    rng = np.random.default_rng(seed + 1)
    s = model.spec.n_sources
    sources = rng.uniform(-1.0, 1.0, (s, length))
    mixture = sources.sum(axis=0)

    def loss_fn():
        loss, _ = multistage_loss(model(mixture), sources)
        return loss

    return check_gradients(loss_fn, model.parameters(), n_samples, rng=rng)
