"""Named trainable parameters and a uniqueness-enforcing registry."""

from __future__ import annotations

import numpy as np

from svrender.adcore.tensor import Tensor


class Parameter:
    """A named leaf tensor paired with a same-shape gradient accumulator."""

    def __init__(self, name, value, dtype=None):
        self.name = str(name)
        self.value = Tensor(np.array(value, dtype=dtype, copy=True), requires_grad=True)
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def gradient(self):
        return Tensor(self.value.grad)

    @property
    def shape(self):
        return self.value.data.shape

    def zero_grad(self):
        self.value.grad = np.zeros_like(self.value.data)

    def assign(self, array):
        arr = np.asarray(array, dtype=self.value.data.dtype)
        if arr.shape != self.value.data.shape:
            raise ValueError(
                f"parameter {self.name!r}: shape {arr.shape} != {self.value.data.shape}"
            )
        self.value.data = arr.copy()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


class ParameterStore:
    """Ordered collection of parameters with unique names."""

    def __init__(self):
        self._params = {}

    def add(self, name, value, dtype=None):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, dtype=dtype)
        self._params[name] = p
        return p

    def register(self, param):
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def parameters(self, prefix=None):
        if prefix is None:
            return list(self._params.values())
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()
