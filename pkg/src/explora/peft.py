"""LoRA injection, the block/rank trainable partition, merging, and delta weights."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError
from .nn import LoRAAdapter, Linear, Module
from .vit import TARGET_MODULES, ViTModel, classify, param_shapes, lora_shapes


class StateError(RuntimeError):
    """Operation not valid in the model's current adapter state."""


class CompatibilityError(ValueError):
    """Delta or parameter tree does not fit the model it is applied to."""


@dataclass(frozen=True)
class Partition:
    """Which encoder parameters train: full blocks ``unfrozen_blocks`` (1-based),
    rank-``rank`` adapters on ``targets`` elsewhere, and optionally all norms."""

    unfrozen_blocks: frozenset[int] = frozenset()
    rank: int = 0
    targets: frozenset[str] = frozenset({"Q", "V"})
    norms_unfrozen: bool = True
    extra_trainable: frozenset[str] = frozenset()
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "unfrozen_blocks", frozenset(int(u) for u in self.unfrozen_blocks))
        object.__setattr__(self, "targets", frozenset(t.upper() for t in self.targets))
        object.__setattr__(self, "extra_trainable", frozenset(self.extra_trainable))
        if self.rank < 0:
            raise ContractError("rank must be >= 0")
        bad = self.targets - set(TARGET_MODULES)
        if bad:
            raise ContractError(f"unknown LoRA targets {sorted(bad)}")
        if any(u < 1 for u in self.unfrozen_blocks):
            raise ContractError("unfrozen block indices are 1-based")

    @classmethod
    def full(cls, depth: int) -> "Partition":
        """Everything trainable: ordinary from-scratch training."""
        return cls(unfrozen_blocks=frozenset(range(1, depth + 1)), rank=0,
                   extra_trainable=frozenset({"patch_embed", "pos_embed", "cls_token", "mask_token"}))

    def validate(self, depth: int) -> None:
        for u in self.unfrozen_blocks:
            if u > depth:
                raise ContractError(f"unfrozen block {u} outside 1..{depth}")

    def to_dict(self) -> dict:
        return {
            "unfrozen_blocks": sorted(self.unfrozen_blocks),
            "rank": self.rank,
            "targets": sorted(self.targets),
            "norms_unfrozen": self.norms_unfrozen,
            "extra_trainable": sorted(self.extra_trainable),
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(unfrozen_blocks=frozenset(d["unfrozen_blocks"]), rank=d["rank"],
                   targets=frozenset(d["targets"]), norms_unfrozen=d["norms_unfrozen"],
                   extra_trainable=frozenset(d.get("extra_trainable", ())), alpha=d.get("alpha"))


@dataclass
class DeltaWeights:
    """The trainable slice of an adapted encoder, keyed by parameter name."""

    partition: Partition
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def num_scalars(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def clone(model: Module) -> Module:
    return copy.deepcopy(model)


def _linears(model: Module):
    for m in model.modules():
        if isinstance(m, Linear):
            yield m


def is_injected(model: Module) -> bool:
    return getattr(model, "_partition", None) is not None or any(l.lora is not None for l in _linears(model))


def _depth(model: Module) -> int:
    return len(model.blocks)


def inject(model: Module, partition: Partition, seed: int = 0) -> Module:
    """Wrap target matrices outside ``partition.unfrozen_blocks`` with adapters and set
    ``requires_grad`` on every parameter according to the partition. Mutates ``model``."""
    if is_injected(model):
        raise StateError("model already carries adapters")
    partition.validate(_depth(model))
    rng = np.random.default_rng(seed)
    if partition.rank > 0:
        for i, blk in enumerate(model.blocks, start=1):
            if i in partition.unfrozen_blocks:
                continue
            for t in sorted(partition.targets):
                for path in TARGET_MODULES[t]:
                    lin = _resolve(blk, path)
                    lin.lora = LoRAAdapter(lin.in_features, lin.out_features, partition.rank,
                                           partition.alpha, rng, lin.weight.dtype.type)
    for name, p in model.named_parameters():
        p.requires_grad = classify(name, partition) is not None
    model._partition = partition
    return model


def _resolve(root: Module, path: str):
    obj = root
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def merge(model: Module) -> Module:
    """Return a copy with every adapter folded into its base weight and all parameters frozen."""
    if not any(l.lora is not None for l in _linears(model)) and getattr(model, "_partition", None) is None:
        raise StateError("model has no injected adapters")
    out = clone(model)
    for lin in _linears(out):
        if lin.lora is None:
            continue
        w = lin.weight.data
        if np.any(lin.lora.B.data):
            lin.weight.data = (w.astype(np.float64) + lin.lora.delta()).astype(w.dtype)
        lin.lora = None
    out._partition = None
    out.requires_grad_(False)
    return out


def trainable_state(model: Module) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters() if p.requires_grad}


def extract_delta(model: Module, partition: Partition) -> DeltaWeights:
    current = getattr(model, "_partition", None)
    if current is None:
        raise StateError("model was not injected")
    if current != partition:
        raise StateError(f"model was injected with {current.to_dict()}, not {partition.to_dict()}")
    cfg = model.config.to_dict() if isinstance(model, ViTModel) else {}
    return DeltaWeights(partition, trainable_state(model), cfg)


def _check_compat(base: ViTModel, delta: DeltaWeights) -> None:
    shapes = dict(param_shapes(base.config))
    try:
        shapes.update(lora_shapes(base.config, delta.partition))
    except KeyError as e:
        raise CompatibilityError(f"delta targets missing from base: {e}") from e
    for name in sorted(delta.tensors, key=_natural_key):
        arr = delta.tensors[name]
        if name not in shapes:
            raise CompatibilityError(f"delta tensor '{name}' has no counterpart in the base model")
        if tuple(arr.shape) != tuple(shapes[name]):
            raise CompatibilityError(f"delta tensor '{name}' shape {arr.shape} != base {shapes[name]}")
    if any(u > base.config.depth for u in delta.partition.unfrozen_blocks):
        raise CompatibilityError(f"partition unfreezes blocks beyond depth {base.config.depth}")


def _natural_key(name: str):
    return [int(p) if p.isdigit() else p for p in name.split(".")]


def apply_delta(base: ViTModel, delta: DeltaWeights, mode: str = "merge", seed: int = 0) -> ViTModel:
    """Rebuild ``W_S + delta``; ``attach`` keeps adapters live, ``merge`` folds them."""
    if mode not in ("attach", "merge"):
        raise ContractError(f"unknown mode {mode!r}")
    _check_compat(base, delta)
    model = clone(base)
    model._partition = None
    for lin in _linears(model):
        lin.lora = None
    inject(model, delta.partition, seed)
    params = dict(model.named_parameters())
    for name, arr in delta.tensors.items():
        params[name].data = np.array(arr, dtype=params[name].dtype, copy=True)
    return merge(model) if mode == "merge" else model
