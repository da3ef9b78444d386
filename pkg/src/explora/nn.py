"""Minimal module system over :mod:`explora.autograd` tensors."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Parameter container; children are discovered from instance attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Tensor):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, v in state.items():
            if k not in params:
                continue
            p = params[k]
            if p.shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {p.shape}")
            p.data = np.array(v, dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.standard_normal(shape)
    x = np.clip(x, -2.0, 2.0)
    return (x * std).astype(dtype)


class LoRAAdapter(Module):
    """Low-rank update ``(alpha / r) * B @ A`` for a ``k2 x k1`` weight."""

    def __init__(self, k1: int, k2: int, r: int, alpha: float | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if r <= 0 or r > min(k1, k2):
            raise ag.ContractError(f"LoRA rank {r} outside [1, min({k1}, {k2})]")
        rng = rng or np.random.default_rng(0)
        self.r = r
        self.alpha = float(r if alpha is None else alpha)
        self.A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(r), (r, k1)).astype(dtype),
                        requires_grad=True)
        self.B = Tensor(np.zeros((k2, r), dtype=dtype), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self) -> np.ndarray:
        return (self.scaling * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64)))


class Linear(Module):
    """``y = x W^T + b`` with W of shape (out, in); optionally LoRA-adapted."""

    def __init__(self, k1: int, k2: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, std: float = 0.02):
        self.weight = Tensor(trunc_normal(rng, (k2, k1), std, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(k2, dtype=dtype), requires_grad=True) if bias else None
        self.lora: LoRAAdapter | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, ag.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        if self.lora is not None:
            la = self.lora
            low = ag.matmul(ag.matmul(x, ag.transpose(la.A)), ag.transpose(la.B))
            y = y + (low if la.scaling == 1.0 else ag.scale(low, la.scaling))
        return y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-6):
        self.weight = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.weight, self.bias, self._eps)
