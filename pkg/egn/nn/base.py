import abc
from typing import Any, Dict, List, Mapping, Set, Tuple

import numpy as np

from ..errors import CheckpointError
from ..tensor import Tensor

__all__ = ["Parameter", "Module"]


class Parameter(Tensor):
    """
    Trainable leaf tensor.
    """

    __slots__ = ()

    def __init__(self, data: Any) -> None:
        super().__init__(data, requires_grad=True)


class Module(metaclass=abc.ABCMeta):
    """
    Base class for the building blocks of the network.

    Parameters and sub-modules are discovered from the instance attributes in
    assignment order (lists of modules included). Attributes starting with an
    underscore are skipped. A module referenced twice, or a parameter shared
    between modules, is reported once, under its first name.
    """

    @abc.abstractmethod
    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """
        Compute the output of this module.
        """

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        result: List[Tuple[str, Parameter]] = []
        self._collect("", set(), result)
        return result

    def _collect(
        self, prefix: str, seen: Set[int], result: List[Tuple[str, Parameter]]
    ) -> None:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = prefix + name
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    result.append((full, value))
            elif isinstance(value, Module):
                value._collect(full + ".", seen, result)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{full}.{i}.", seen, result)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """
        Copy values into the parameters. Names and shapes have to match
        exactly.
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f"State mismatch: missing {missing!r}, unexpected {unexpected!r}."
            )
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(
                    f"Parameter {name!r} has shape {value.shape}, expected {p.shape}."
                )
            p.data = value.copy()
