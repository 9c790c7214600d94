"""Dual-path BiLSTM blocks: serial, parallel-branch, context-aware cross and combined."""

from __future__ import annotations

import enum
import math

import numpy as np

from .nn import Module, Parameter
from .tensor import Tensor, as_tensor, custom_op, matmul, sqrt

__all__ = [
    "BlockVariant",
    "bilstm",
    "BiLSTM",
    "group_norm",
    "SubBlock",
    "DualPathBlock",
]


class BlockVariant(enum.Enum):
    SERIAL = "serial"
    PARALLEL_SERIAL = "parallel_serial"
    CROSS = "cross"
    PARALLEL_CROSS = "parallel_cross"

    @classmethod
    def from_flags(cls, parallel: bool, cross: bool) -> "BlockVariant":
        if cross:
            return cls.PARALLEL_CROSS if parallel else cls.CROSS
        return cls.PARALLEL_SERIAL if parallel else cls.SERIAL

    @property
    def parallel(self) -> bool:
        return self in (BlockVariant.PARALLEL_SERIAL, BlockVariant.PARALLEL_CROSS)

    @property
    def cross(self) -> bool:
        return self in (BlockVariant.CROSS, BlockVariant.PARALLEL_CROSS)


# -- fused bidirectional LSTM --------------------------------------------------

def _sigm(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def bilstm(x, w_ih, w_hh, b) -> Tensor:
    """Bidirectional LSTM over axis 0 of ``x`` (steps, batch, in).

    Weights are stacked per direction (0 = forward, 1 = backward):
    ``w_ih`` (2, in, 4H), ``w_hh`` (2, H, 4H), ``b`` (2, 4H), gate order i, f, g, o.
    Returns (steps, batch, 2H): forward outputs then backward outputs.
    """
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"bilstm expects (steps, batch, in) input, got {x.shape}")
    steps, batch, n_in = x.shape
    hidden = w_hh.shape[1]
    if (w_ih.shape != (2, n_in, 4 * hidden) or w_hh.shape != (2, hidden, 4 * hidden)
            or b.shape != (2, 4 * hidden)):
        raise ValueError(
            f"bilstm weight shapes {w_ih.shape}, {w_hh.shape}, {b.shape} "
            f"do not fit input size {n_in} and hidden size {hidden}"
        )
    X, Wi, Wh, B = x.data, w_ih.data, w_hh.data, b.data
    dtype = np.result_type(X, Wi, Wh, B)
    H = hidden

    # Input projections for both directions; direction 1 is stored time-reversed
    # so the recurrence below walks both directions with the same index.
    X2 = X.reshape(steps * batch, n_in)
    xp = np.empty((2, steps, batch, 4 * H), dtype=dtype)
    xp[0] = (X2 @ Wi[0]).reshape(steps, batch, 4 * H)
    xp[1] = (X2 @ Wi[1]).reshape(steps, batch, 4 * H)[::-1]
    xp += B[:, None, None, :]

    gates = np.empty((2, steps, batch, 4 * H), dtype=dtype)  # activated i, f, g, o
    cells = np.empty((2, steps + 1, batch, H), dtype=dtype)
    hs = np.empty((2, steps + 1, batch, H), dtype=dtype)
    tanh_c = np.empty((2, steps, batch, H), dtype=dtype)
    cells[:, 0] = 0.0
    hs[:, 0] = 0.0
    for t in range(steps):
        z = xp[:, t] + np.matmul(hs[:, t], Wh)
        act = gates[:, t]
        act[..., : 2 * H] = _sigm(z[..., : 2 * H])
        act[..., 2 * H : 3 * H] = np.tanh(z[..., 2 * H : 3 * H])
        act[..., 3 * H :] = _sigm(z[..., 3 * H :])
        c = act[..., H : 2 * H] * cells[:, t] + act[..., :H] * act[..., 2 * H : 3 * H]
        cells[:, t + 1] = c
        tc = np.tanh(c)
        tanh_c[:, t] = tc
        hs[:, t + 1] = act[..., 3 * H :] * tc

    out = np.concatenate([hs[0, 1:], hs[1, :0:-1]], axis=-1)

    def backward(g):
        dh_out = np.empty((2, steps, batch, H), dtype=dtype)
        dh_out[0] = g[..., :H]
        dh_out[1] = g[::-1, :, H:]
        dz = np.empty((2, steps, batch, 4 * H), dtype=dtype)
        dh = np.zeros((2, batch, H), dtype=dtype)
        dc = np.zeros((2, batch, H), dtype=dtype)
        WhT = np.swapaxes(Wh, 1, 2)
        for t in range(steps - 1, -1, -1):
            act = gates[:, t]
            i, f, gg, o = (act[..., k * H : (k + 1) * H] for k in range(4))
            tc = tanh_c[:, t]
            dh = dh + dh_out[:, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            d = dz[:, t]
            d[..., :H] = dc * gg * i * (1.0 - i)
            d[..., H : 2 * H] = dc * cells[:, t] * f * (1.0 - f)
            d[..., 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            d[..., 3 * H :] = dh * tc * o * (1.0 - o)
            dc = dc * f
            dh = np.matmul(d, WhT)
        rows = steps * batch
        h_prev = hs[:, :-1].reshape(2, rows, H)
        dz2 = dz.reshape(2, rows, 4 * H)
        g_wh = np.matmul(np.swapaxes(h_prev, 1, 2), dz2)
        g_b = dz2.sum(axis=1)
        dz_fwd = dz2[0]
        dz_bwd = np.ascontiguousarray(dz[1, ::-1]).reshape(rows, 4 * H)
        g_wi = np.stack([X2.T @ dz_fwd, X2.T @ dz_bwd])
        g_x = (dz_fwd @ Wi[0].T + dz_bwd @ Wi[1].T).reshape(steps, batch, n_in)
        return g_x, g_wi, g_wh, g_b

    return custom_op("bilstm", out, (x, w_ih, w_hh, b), backward)


class BiLSTM(Module):
    """Bidirectional LSTM with forget-gate bias 1 and weights uniform in +-1/sqrt(H)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = Parameter(rng.uniform(-bound, bound, (2, n_in, 4 * hidden)), dtype)
        self.w_hh = Parameter(rng.uniform(-bound, bound, (2, hidden, 4 * hidden)), dtype)
        bias = np.zeros((2, 4 * hidden))
        bias[:, hidden : 2 * hidden] = 1.0
        self.b = Parameter(bias, dtype)

    def __call__(self, seq) -> Tensor:
        """(steps, batch, in) or (steps, in) -> (steps, [batch,] 2H)."""
        seq = as_tensor(seq)
        if seq.ndim == 2:
            out = bilstm(seq.reshape(seq.shape[0], 1, seq.shape[1]), self.w_ih, self.w_hh, self.b)
            return out.reshape(seq.shape[0], 2 * self.hidden)
        return bilstm(seq, self.w_ih, self.w_hh, self.b)


# -- normalization --------------------------------------------------------------

def group_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Single-group normalization over all of (N, K, C), then per-channel affine.

    ``gain`` and ``bias`` broadcast along the channel axis, shape (N, 1, 1).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    centered = x - x.mean()
    var = (centered * centered).mean()
    return centered / sqrt(var + eps) * gain + bias


# -- sub-blocks -----------------------------------------------------------------

_AXES = {"intra": ((1, 2, 0), (2, 0, 1)), "inter": ((2, 1, 0), (2, 1, 0))}


class _Branch(Module):
    def __init__(self, n: int, hidden: int, rng, dtype):
        super().__init__()
        self.lstm = BiLSTM(n, hidden, rng, dtype)
        bound = 1.0 / math.sqrt(2 * hidden)
        self.fc_w = Parameter(rng.uniform(-bound, bound, (2 * hidden, n)), dtype)
        self.fc_b = Parameter(np.zeros(n), dtype)
        self.gn_gain = Parameter(np.ones((n, 1, 1)), dtype)
        self.gn_bias = Parameter(np.zeros((n, 1, 1)), dtype)

    def __call__(self, seq: Tensor, back: tuple, eps: float) -> Tensor:
        y = matmul(self.lstm(seq), self.fc_w) + self.fc_b
        return group_norm(y.transpose(back), self.gn_gain, self.gn_bias, eps)


class SubBlock(Module):
    """One intra- or inter-chunk path: B parallel BiLSTM -> FC -> GroupNorm branches,
    averaged, plus a residual connection."""

    def __init__(self, n: int, hidden: int, axis: str, rng: np.random.Generator,
                 branches: int = 1, dtype=np.float32, eps: float = 1e-8):
        super().__init__()
        if axis not in _AXES:
            raise ValueError(f"axis must be 'intra' or 'inter', got {axis!r}")
        if branches < 1:
            raise ValueError("branches must be >= 1")
        self.axis = axis
        self.eps = eps
        self.branches = [_Branch(n, hidden, rng, dtype) for _ in range(branches)]

    def __call__(self, x) -> Tensor:
        """(N, K, C) -> (N, K, C)."""
        x = as_tensor(x)
        if x.ndim != 3:
            raise ValueError(f"sub-block expects an (N, K, C) tensor, got {x.shape}")
        to_seq, back = _AXES[self.axis]
        seq = x.transpose(to_seq)
        total = None
        for branch in self.branches:
            y = branch(seq, back, self.eps)
            total = y if total is None else total + y
        if len(self.branches) > 1:
            total = total * (1.0 / len(self.branches))
        return x + total


class DualPathBlock(Module):
    def __init__(self, n: int, hidden: int, variant: BlockVariant, rng: np.random.Generator,
                 branches: int = 3, dtype=np.float32, eps: float = 1e-8):
        super().__init__()
        self.variant = variant
        nb = branches if variant.parallel else 1
        self.intra = SubBlock(n, hidden, "intra", rng, nb, dtype, eps)
        self.inter = SubBlock(n, hidden, "inter", rng, nb, dtype, eps)

    def __call__(self, x) -> Tensor:
        if self.variant.cross:
            return (self.intra(x) + self.inter(x)) * 0.5
        return self.inter(self.intra(x))
