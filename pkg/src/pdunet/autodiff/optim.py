"""Named parameter storage and the Adam optimiser."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import AutodiffStateError, Tensor


class ParamStore:
    """Ordered mapping of parameter name -> leaf Tensor, with Adam moments."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def kaiming_uniform(self, name: str, shape, fan_in: int) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def full(self, name: str, shape, value: float) -> Tensor:
        return self.add(name, np.full(shape, value))

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads_populated(self) -> bool:
        return any(p.grad is not None for p in self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict):
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def optimizer_state(self) -> tuple[dict, dict, int]:
        """Copies of the Adam moments ``(m, v)`` and the step count."""
        return ({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step_count)

    def load_optimizer_state(self, m: dict, v: dict, step_count: int):
        if step_count < 0:
            raise ValueError("step count must be >= 0")
        for moments in (m, v):
            for name, arr in moments.items():
                if name not in self.params:
                    raise KeyError(f"optimizer state for unknown parameter {name!r}")
                if np.shape(arr) != self.params[name].shape:
                    raise ValueError(f"optimizer state {name!r}: shape {np.shape(arr)} != {self.params[name].shape}")
        if set(m) != set(v):
            raise ValueError("first and second moments cover different parameters")
        self.m = {k: np.asarray(a, dtype=np.float64).copy() for k, a in m.items()}
        self.v = {k: np.asarray(a, dtype=np.float64).copy() for k, a in v.items()}
        self.step_count = int(step_count)

    def adam_step(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, zero_grad=True):
        """One bias-corrected Adam update of every parameter that has a gradient."""
        if not self.grads_populated():
            raise AutodiffStateError("adam_step called before any backward pass")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - beta1**t
        c2 = 1 - beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros(p.shape)
                v = np.zeros(p.shape)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.data = (p.data - update).astype(self.dtype)
        if zero_grad:
            self.zero_grad()
