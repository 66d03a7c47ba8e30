"""Parameter containers and small layer helpers shared by both stages."""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Params(OrderedDict):
    """Ordered name -> Tensor mapping with per-parameter freeze flags.

    Insertion order is the serialisation and optimiser order, so it must be
    deterministic for a given config.
    """

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self[name] = t
        return t

    def freeze(self) -> None:
        self.frozen = set(self)
        for t in self.values():
            t.requires_grad = False

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.items() if k not in self.frozen]

    def weight_matrices(self) -> list[Tensor]:
        """Tensors entering the L1 penalty: every ``*.weight``, no biases."""
        return [v for k, v in self.items() if k.endswith(".weight")]

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {self[k].shape}")
            self[k].data = np.array(v, dtype=np.float64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out))


def add_conv(p: Params, rng, name: str, c_in: int, c_out: int, k: int, gain: float = 1.0) -> None:
    p.add(f"{name}.weight", he_normal(rng, (c_out, c_in, k, k), c_in * k * k, gain))
    p.add(f"{name}.bias", np.zeros(c_out))


def add_linear(p: Params, rng, name: str, d_in: int, d_out: int, gain: float = 1.0, bias: bool = True) -> None:
    p.add(f"{name}.weight", glorot(rng, d_in, d_out, gain))
    if bias:
        p.add(f"{name}.bias", np.zeros(d_out))


def conv(p: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[f"{name}.weight"]
    pad = w.shape[-1] // 2
    return ad.add_channel_bias(ad.conv2d(x, w, stride=stride, pad=pad), p[f"{name}.bias"])


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    y = ad.matmul(x, p[f"{name}.weight"])
    b = p.get(f"{name}.bias")
    return y if b is None else ad.add(y, b)


def l1_penalty(weights: list[Tensor]) -> Tensor:
    total = None
    for w in weights:
        term = ad.abs(w).sum()
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)
