"""Parameter containers shared by the network modules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor

__all__ = ["Parameter", "Module"]


class Parameter(Tensor):
    """A leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32, name: str | None = None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)


class Module:
    """Collects :class:`Parameter` attributes, sub-modules and lists of sub-modules.

    Parameter names are dotted paths in attribute definition order, e.g.
    ``stages.0.blocks.1.intra.branches.2.lstm.w_ih``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.parameters()
        if strict:
            missing = params.keys() - state.keys()
            unexpected = state.keys() - params.keys()
            if missing or unexpected:
                raise KeyError(
                    f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
                )
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
