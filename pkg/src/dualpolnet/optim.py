"""Parameter registry, He-style initialization, and Adam updates.

A ParamStore owns every trainable tensor plus the batch-norm running
statistics, keyed by dotted names. Initialization is deterministic: each
parameter draws from its own RNG stream derived from (root seed, name),
so registration order never changes the values.
"""

from __future__ import annotations

import numpy as np

from .seeding import derive_seed
from .tensor import BatchNormState, Tensor, default_dtype


def he_init(shape: tuple, fan_in: int, seed: int) -> Tensor:
    """Zero-mean normal with std sqrt(2 / fan_in), reproducible per seed."""
    if fan_in < 1:
        raise ValueError(f"he_init: fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class ParamStore:
    """Named parameters, batch-norm buffers, and Adam optimizer state."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.t = 0  # Adam step counter, shared by all parameters

    # -- construction -------------------------------------------------------

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def conv(self, name: str, cin: int, cout: int, k: int) -> tuple:
        """Register a k x k conv kernel (He init) and zero bias; returns (w, b)."""
        w = self.add(f"{name}.weight",
                     he_init((cout, cin, k, k), cin * k * k, derive_seed(self.seed, f"{name}.weight")))
        b = self.add(f"{name}.bias", Tensor(np.zeros(cout)))
        return w, b

    def linear(self, name: str, din: int, dout: int) -> tuple:
        w = self.add(f"{name}.weight",
                     he_init((din, dout), din, derive_seed(self.seed, f"{name}.weight")))
        b = self.add(f"{name}.bias", Tensor(np.zeros(dout)))
        return w, b

    def batchnorm(self, name: str, channels: int) -> tuple:
        """Register gamma (ones), beta (zeros), and running stats; returns (gamma, beta, state)."""
        gamma = self.add(f"{name}.gamma", Tensor(np.ones(channels)))
        beta = self.add(f"{name}.beta", Tensor(np.zeros(channels)))
        state = BatchNormState.initial(channels, dtype=default_dtype())
        self.bn[name] = state
        return gamma, beta, state

    # -- inspection ---------------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        """Total count of trainable scalars (running stats excluded)."""
        return sum(t.data.size for t in self.params.values())

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every persistable array: parameters plus running statistics."""
        out = [(name, t.data) for name, t in self.params.items()]
        for name, st in self.bn.items():
            out.append((f"{name}.running_mean", st.mean))
            out.append((f"{name}.running_var", st.var))
        return out

    # -- optimization -------------------------------------------------------

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update over every parameter in the store.

    m <- b1*m + (1-b1)*g ; v <- b2*v + (1-b2)*g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

    Gradients are left in place; clearing them is the caller's job
    (``store.zero_grad()``).
    """
    for name, p in store.params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    store.t += 1
    c1 = 1.0 - beta1 ** store.t
    c2 = 1.0 - beta2 ** store.t
    for name, p in store.params.items():
        g = p.grad
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        v = store._v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
