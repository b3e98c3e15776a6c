"""Parameter storage, the named forward/backward graph wrapper, and Adam."""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from rlfolio.errors import DivergenceError, ShapeError
from rlfolio.numcore.tensor import Tensor, backward as tensor_backward


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named parameter tensors plus per-parameter Adam moment accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"load_arrays: {name} {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
        return other

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            t = self._params[name]
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def adam_step(
        self,
        grads: dict[str, np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        """In-place Adam update with bias correction. Missing grads are zero."""
        b1, b2 = betas
        for g in grads.values():
            if g is not None and not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient in adam_step")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in self._params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class CompGraph:
    """Named forward/backward wrapper around a tape-building function.

    ``fn(params, inputs)`` maps a ParamStore and a dict of input Tensors to a
    dict of named output Tensors; the tape recorded during the call is what
    ``backward`` differentiates. One forward at a time per instance.
    """

    def __init__(self, params: ParamStore, fn: Callable):
        self.params = params
        self.fn = fn
        self._outputs: dict[str, Tensor] | None = None

    def forward(self, inputs: dict[str, np.ndarray]) -> dict[str, Tensor]:
        tensors = {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in inputs.items()}
        self._outputs = self.fn(self.params, tensors)
        return self._outputs

    def backward(self, loss) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter (zeros if unused)."""
        if isinstance(loss, str):
            if self._outputs is None or loss not in self._outputs:
                raise KeyError(f"no output named {loss!r}; run forward first")
            loss = self._outputs[loss]
        self.params.zero_grad()
        tensor_backward(loss)
        grads = {}
        for name, p in self.params.items():
            grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        return grads
