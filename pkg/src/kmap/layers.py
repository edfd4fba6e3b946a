"""Minimal parameter containers on top of numcore."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .numcore import Parameter, Tensor
from .numcore import functional as F


class Module:
    """Collects :class:`Parameter` attributes and child modules by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    def _rename(self, prefix: str = "") -> None:
        # give every parameter its dotted path
        for name, p in self.named_parameters(prefix):
            p.name = name


def init_param(rng: np.random.Generator, shape, std: float = 0.1, pad_row: bool = False, name: str = "") -> Parameter:
    return Parameter(name, rng.normal(0.0, std, size=shape), pad_row=pad_row)


def xavier(rng: np.random.Generator, n_in: int, n_out: int) -> Parameter:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return Parameter("", rng.uniform(-bound, bound, size=(n_in, n_out)))


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        self.W = xavier(rng, n_in, n_out)
        self.b = Parameter("", np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear: input shape {x.shape} does not match weight shape {self.W.shape}")
        y = F.matmul(x, self.W)
        return y if self.b is None else y + self.b


class FeedForward(Module):
    """One tanh hidden layer followed by a linear output."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_out: int):
        self.hidden = Linear(rng, n_in, n_hidden)
        self.out = Linear(rng, n_hidden, n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(F.tanh(self.hidden(x)))
