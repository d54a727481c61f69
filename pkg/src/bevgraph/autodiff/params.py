"""Named trainable parameters with JSON round-tripping."""

import json

import numpy as np

from .tensor import DiffTensor, parameter


class ParameterStore:
    """An ordered collection of named parameter tensors.

    Creation order is part of the contract: initialization draws from the
    supplied RNG in call order, so a model builder that registers its
    parameters deterministically is reproducible from a single seed.
    """

    def __init__(self):
        self._params = {}

    def create(self, name, shape, rng, fan_in=None):
        """Register a matrix initialized uniformly in +-1/sqrt(fan_in).

        fan_in defaults to the input dimension shape[0].
        """
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        if fan_in is None:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(float(fan_in))
        values = rng.uniform(-bound, bound, size=shape)
        self._params[name] = parameter(values)
        return self._params[name]

    def create_zeros(self, name, shape):
        """Register a zero-initialized matrix (bias terms)."""
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        self._params[name] = parameter(np.zeros(shape))
        return self._params[name]

    def __getitem__(self, name) -> DiffTensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self):
        """Total scalar parameter count."""
        return sum(p.values.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_dict(self):
        """JSON-serializable mapping of name to nested value lists."""
        return {name: p.values.tolist() for name, p in self._params.items()}

    def load_state_dict(self, state):
        """Overwrite existing parameters; names and shapes must match."""
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(
                f"state does not match store (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})"
            )
        for name, values in state.items():
            arr = np.ascontiguousarray(values, dtype=np.float64)
            if arr.shape != self._params[name].values.shape:
                raise ValueError(
                    f"parameter {name!r}: stored shape {arr.shape} != "
                    f"expected {self._params[name].values.shape}"
                )
            self._params[name].values = arr

    @classmethod
    def from_state_dict(cls, state):
        """Rebuild a store purely from serialized values."""
        store = cls()
        for name, values in state.items():
            store._params[name] = parameter(
                np.ascontiguousarray(values, dtype=np.float64)
            )
        return store

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.state_dict(), f)

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_state_dict(json.load(f))
