import hashlib
import logging
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import CheckpointError, UsageError
from tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A trainable leaf tensor registered under a unique dotted name."""

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def make_rng(seed: int) -> np.random.Generator:
    """The one generator type used across the project: PCG64 seeded by the caller."""
    return np.random.Generator(np.random.PCG64(seed))


class ParameterStore:
    """Registry of every Parameter of a model, keyed by its dotted name."""

    def __init__(self, rng: np.random.Generator, init_scale: float = 1.0):
        self.rng = rng
        self.init_scale = init_scale
        self._params: Dict[str, Parameter] = {}

    def create(
        self,
        name: str,
        shape: Sequence[int],
        fan_in: Optional[int] = None,
        scale: float = 1.0,
        zeros: bool = False,
        shared: bool = False,
    ) -> Parameter:
        """
        Register a new parameter.

        Weights are drawn from U(-b, b) with b = init_scale * scale / sqrt(fan_in);
        `zeros=True` gives a zero-initialised parameter (biases). With `shared=True`
        an existing parameter of the same name and shape is returned instead of failing.
        """
        shape = tuple(int(s) for s in shape)
        if name in self._params:
            existing = self._params[name]
            if shared and existing.shape == shape:
                return existing
            raise UsageError(f"parameter name '{name}' is already registered")
        if zeros:
            data = np.zeros(shape)
        else:
            bound = self.init_scale * scale / np.sqrt(fan_in if fan_in else shape[0])
            data = self.rng.uniform(-bound, bound, size=shape)
        param = Parameter(name, data)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def with_prefix(self, prefixes: Iterable[str]) -> List[Parameter]:
        prefixes = tuple(prefixes)
        return [p for name, p in self._params.items() if name.startswith(prefixes)]

    def without_prefix(self, prefixes: Iterable[str]) -> List[Parameter]:
        prefixes = tuple(prefixes)
        return [p for name, p in self._params.items() if not name.startswith(prefixes)]

    def set_trainable(self, prefixes: Iterable[str], trainable: bool) -> List[Parameter]:
        """Switch gradient tracking for the matching parameters; frozen ones cut the backward pass."""
        params = self.with_prefix(prefixes)
        for param in params:
            param.requires_grad = trainable
            param.zero_grad()
        return params

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into matching parameters; returns the names that were loaded."""
        problems = []
        loaded = []
        for name, param in self._params.items():
            if name not in state:
                if strict:
                    problems.append(f"missing '{name}'")
                continue
            if state[name].shape != param.shape:
                problems.append(f"'{name}' has shape {state[name].shape}, model expects {param.shape}")
                continue
            loaded.append(name)
        if strict:
            problems += [f"unexpected '{name}'" for name in state if name not in self._params]
        if problems:
            raise CheckpointError("checkpoint does not match model: " + "; ".join(problems))
        for name in loaded:
            self._params[name].data[...] = state[name]
        return loaded

    def checksum(self, prefixes: Tuple[str, ...] = ("",)) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._params):
            if name.startswith(prefixes):
                digest.update(name.encode("utf-8"))
                digest.update(self._params[name].data.tobytes())
        return digest.hexdigest()

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())
