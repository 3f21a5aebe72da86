"""Ordered parameter collections shared by models, optimizers and losses."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .autograd import Tensor


class ParamSet:
    """Named map of trainable tensors plus non-trainable state arrays.

    Iteration is always lexicographic on the identifier, so two ParamSets
    with equal key sets are element-wise combinable in a fixed order.
    State holds buffers such as batch-norm running statistics.
    """

    def __init__(self, params: Dict[str, Tensor] | None = None,
                 state: Dict[str, np.ndarray] | None = None):
        self.params: Dict[str, Tensor] = dict(params or {})
        self.state: Dict[str, np.ndarray] = dict(state or {})

    def keys(self) -> list[str]:
        return sorted(self.params)

    def state_keys(self) -> list[str]:
        return sorted(self.state)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for k in self.keys():
            yield k, self.params[k]

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def __setitem__(self, key: str, value: Tensor) -> None:
        self.params[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self.params

    def __len__(self) -> int:
        return len(self.params)

    def copy(self) -> "ParamSet":
        """Deep copy: fresh data buffers, gradients dropped."""
        return ParamSet(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
             for k, v in self.params.items()},
            {k: v.copy() for k, v in self.state.items()},
        )

    def frozen(self) -> "ParamSet":
        """Constant view: same data buffers, no gradient tracking."""
        return ParamSet({k: Tensor(v.data) for k, v in self.params.items()},
                        dict(self.state))

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for v in self.params.values():
            v.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Collected leaf gradients; a missing gradient is an error."""
        out = {}
        for k in self.keys():
            g = self.params[k].grad
            if g is None:
                raise ValueError(f"parameter {k!r} has no gradient")
            out[k] = g.data
        return out

    def flat(self) -> np.ndarray:
        return (np.concatenate([self.params[k].data.reshape(-1) for k in self.keys()])
                if self.params else np.zeros(0))

    def checksum(self) -> float:
        total = float(self.flat().sum())
        for k in self.state_keys():
            total += float(self.state[k].sum())
        return total

    def __repr__(self) -> str:
        n = sum(v.data.size for v in self.params.values())
        return f"ParamSet({len(self.params)} tensors, {n} values)"


def assert_same_keys(a: ParamSet, b: ParamSet) -> None:
    if a.keys() != b.keys() or a.state_keys() != b.state_keys():
        raise ValueError("ParamSets have mismatched keys")


def weighted_average(items: list[ParamSet], weights: list[float]) -> ParamSet:
    """Convex combination of parameter tensors and state buffers alike."""
    if not items:
        raise ValueError("nothing to average")
    if len(items) != len(weights):
        raise ValueError("items and weights must align")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("total weight must be positive")
    for other in items[1:]:
        assert_same_keys(items[0], other)
    coeffs = [w / total for w in weights]
    params = {}
    for key in items[0].keys():
        acc = np.zeros_like(items[0][key].data)
        for ps, c in zip(items, coeffs):
            acc += c * ps[key].data
        params[key] = Tensor(acc, requires_grad=True)
    state = {}
    for key in items[0].state_keys():
        acc = np.zeros_like(items[0].state[key])
        for ps, c in zip(items, coeffs):
            acc += c * ps.state[key]
        state[key] = acc
    return ParamSet(params, state)
