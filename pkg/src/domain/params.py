from collections import OrderedDict
from typing import Iterator, Optional

import torch
from torch import nn

from src.domain.errors import ShapeError


class ParameterStore:
    """
    Named parameter tensors with one gradient slot each and a step counter.

    A store built with `from_module` shares storage with the module, so
    optimizer updates through the store are visible to the model.
    """

    def __init__(self, tensors: "OrderedDict[str, torch.Tensor]", step: int = 0):
        self._tensors = tensors
        self.step = step

    @classmethod
    def from_module(cls, module: nn.Module, step: int = 0) -> "ParameterStore":
        return cls(OrderedDict(module.named_parameters()), step=step)

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self._tensors.items()}

    def grad(self, name: str) -> Optional[torch.Tensor]:
        return self._tensors[name].grad

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def detached_copy(self) -> "ParameterStore":
        """Copy with no autograd history and no gradient slots (used for EMA weights)."""
        copies = OrderedDict((n, t.detach().clone()) for n, t in self._tensors.items())
        return ParameterStore(copies, step=self.step)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(self._tensors)

    @torch.no_grad()
    def load_(self, tensors: dict[str, torch.Tensor]) -> None:
        """Copy values in place; names and shapes must match exactly."""
        if set(tensors) != set(self._tensors):
            missing = set(self._tensors) ^ set(tensors)
            raise ShapeError(f"parameter names differ: {sorted(missing)[:5]}")
        for name, target in self._tensors.items():
            source = tensors[name]
            if tuple(source.shape) != tuple(target.shape):
                raise ShapeError(
                    f"parameter '{name}' has shape {tuple(source.shape)}, expected {tuple(target.shape)}")
            target.copy_(source.to(target.dtype))

    def check_aligned(self, other: "ParameterStore") -> None:
        if self.shapes() != other.shapes():
            raise ShapeError("parameter stores have different names or shapes")
