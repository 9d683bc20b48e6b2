"""Parameter containers and the basic layers the network is assembled from."""

import logging
from typing import Iterator, Optional

import numpy as np

from src.core.exceptions import CheckpointError
from src.infra.numeric import ops
from src.infra.numeric.tensor import Tensor

logger = logging.getLogger(__name__)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform in ±sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """
    Base class for anything holding parameters.

    Parameters are Tensor attributes with requires_grad=True; child modules are
    Module attributes or lists of Modules. Names are dotted attribute paths
    (`encoder.layers.0.attention.w_q.weight`) and are what checkpoints key on.
    """

    training: bool = True

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Yield (path, parameter); a tensor shared by two modules appears once."""
        seen: set[int] = set()
        yield from self._walk_parameters("", seen)

    def _walk_parameters(self, prefix: str, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
            elif isinstance(value, Module):
                yield from value._walk_parameters(f"{path}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk_parameters(f"{path}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """
        Copy arrays into parameters in place.

        Raises:
            CheckpointError: If names are missing/unexpected or any shape differs
        """
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        mismatched = sorted(
            f"{name} {tuple(state[name].shape)} != {params[name].shape}"
            for name in set(params) & set(state)
            if tuple(state[name].shape) != params[name].shape
        )
        if missing or unexpected or mismatched:
            offending = [f"missing {n}" for n in missing] + [f"unexpected {n}" for n in unexpected] + mismatched
            raise CheckpointError("Parameter set does not match this model", offending)
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float64)


class Linear(Module):
    """y = x W (+ b) for x of shape [n×in]."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias: Optional[Tensor] = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        return out if self.bias is None else ops.add_bias(out, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, d: int):
        self.table = Tensor(xavier_uniform(rng, vocab_size, d), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return ops.embed_lookup(self.table, ids)
